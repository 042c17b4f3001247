"""SNAP: a tiny stack language describing convolutional block topologies.

A program is a sequence over 8 symbols. Five are trainable layer symbols
that rewrite the top of a tensor stack; three (branch / switch / merge)
rearrange the stack. Evaluating a valid program against a stack seeded with
the two previous block outputs yields a DAG of layer nodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterator

import numpy as np

MAX_LEN = 12
GEN_LEN_RANGE = (4, 12)


class Symbol(Enum):
    CONV1 = "C1"
    CONV3 = "C3"
    DWCONV3 = "D3"
    DWSCONV3 = "S3"
    MAXPOOL3 = "P3"
    BRANCH = "B"
    SWITCH = "X"
    MERGE = "M"

    @property
    def is_layer(self) -> bool:
        return self in _LAYER_SYMBOLS

    @property
    def stack_effect(self) -> int:
        if self is Symbol.BRANCH:
            return +1
        if self is Symbol.MERGE:
            return -1
        return 0


_LAYER_SYMBOLS = frozenset(
    {Symbol.CONV1, Symbol.CONV3, Symbol.DWCONV3, Symbol.DWSCONV3, Symbol.MAXPOOL3}
)

ALPHABET: tuple[Symbol, ...] = tuple(Symbol)

# long-form aliases accepted on input; canonical tokens are the enum values
_ALIASES = {
    "conv1": Symbol.CONV1,
    "conv3": Symbol.CONV3,
    "dwconv3": Symbol.DWCONV3,
    "dwsconv3": Symbol.DWSCONV3,
    "maxpool3": Symbol.MAXPOOL3,
    "branch": Symbol.BRANCH,
    "switch": Symbol.SWITCH,
    "merge": Symbol.MERGE,
}
_TOKEN_MAP = {s.value: s for s in Symbol} | _ALIASES

VOCAB_SIZE = 10  # 8 symbols + EOS + PAD
EOS_INDEX = 8
PAD_INDEX = 9
SYMBOL_INDEX = {s: i for i, s in enumerate(ALPHABET)}


class SnapError(ValueError):
    pass


class UnknownToken(SnapError):
    def __init__(self, token: str):
        super().__init__(f"unknown token {token!r}")
        self.token = token


class EmptySequence(SnapError):
    pass


class SequenceTooLong(SnapError):
    pass


class InvalidSequence(SnapError):
    pass


class InternalError(RuntimeError):
    pass


class FailureReason(Enum):
    UNDERFLOW_SWITCH = "UnderflowSwitch"
    UNDERFLOW_MERGE = "UnderflowMerge"
    UNDERFLOW_LAYER = "UnderflowLayer"
    TOO_LONG = "TooLong"
    EMPTY = "Empty"


@dataclass(frozen=True)
class ValidationResult:
    valid: bool
    failure_index: int | None = None
    failure_reason: FailureReason | None = None
    final_stack_size: int | None = None

    def __post_init__(self):
        assert self.valid == (self.failure_index is None)


@dataclass(frozen=True)
class SnapSequence:
    symbols: tuple[Symbol, ...]

    def __len__(self) -> int:
        return len(self.symbols)

    def __iter__(self) -> Iterator[Symbol]:
        return iter(self.symbols)

    def render(self) -> str:
        return " ".join(s.value for s in self.symbols)

    def __str__(self) -> str:
        return self.render()

    def to_json(self) -> str:
        return json.dumps({"symbols": [s.value for s in self.symbols], "valid": validate(self).valid})


def parse_snap(text: str) -> SnapSequence:
    """Parse whitespace-separated tokens; stack validity is checked separately."""
    tokens = text.split()
    if not tokens:
        raise EmptySequence("empty SNAP text")
    if len(tokens) > MAX_LEN:
        raise SequenceTooLong(f"{len(tokens)} symbols exceeds limit {MAX_LEN}")
    symbols = []
    for tok in tokens:
        sym = _TOKEN_MAP.get(tok)
        if sym is None:
            raise UnknownToken(tok)
        symbols.append(sym)
    return SnapSequence(tuple(symbols))


def validate(seq: SnapSequence) -> ValidationResult:
    """Simulate stack sizes from an initial stack of 2; report first violation."""
    if len(seq) == 0:
        return ValidationResult(False, 0, FailureReason.EMPTY)
    if len(seq) > MAX_LEN:
        return ValidationResult(False, MAX_LEN, FailureReason.TOO_LONG)
    size = 2
    for i, sym in enumerate(seq):
        if sym is Symbol.SWITCH and size < 2:
            return ValidationResult(False, i, FailureReason.UNDERFLOW_SWITCH)
        if sym is Symbol.MERGE and size < 2:
            return ValidationResult(False, i, FailureReason.UNDERFLOW_MERGE)
        if sym.is_layer and size < 1:
            return ValidationResult(False, i, FailureReason.UNDERFLOW_LAYER)
        size += sym.stack_effect
    return ValidationResult(True, final_stack_size=size)


# ---------------------------------------------------------------------------
# block graphs


_LAYER_NODE_KIND = {
    Symbol.CONV1: "bn_relu_conv1",
    Symbol.CONV3: "bn_relu_conv3",
    Symbol.DWCONV3: "bn_relu_dwconv3",
    Symbol.DWSCONV3: "bn_relu_dwsconv3",
    Symbol.MAXPOOL3: "maxpool3",
}

NODE_KINDS = frozenset(
    {"input0", "input1", "concat_proj", "add"} | set(_LAYER_NODE_KIND.values())
)


@dataclass(frozen=True)
class BlockNode:
    id: int
    kind: str
    predecessors: tuple[int, ...]


@dataclass(frozen=True)
class BlockGraph:
    nodes: tuple[BlockNode, ...]
    output_id: int

    def node(self, nid: int) -> BlockNode:
        return self.nodes[nid]

    def __len__(self) -> int:
        return len(self.nodes)


def build_block_graph(seq: SnapSequence) -> BlockGraph:
    """Evaluate a validated sequence into a DAG of layer nodes.

    The stack starts as [input0, input1] with input1 (the newer block output)
    on top. Layer symbols consume the top id; merge realizes concatenate +
    1x1 projection; any tensors left on the stack after the final symbol are
    folded bottom-up into elementwise add nodes.
    """
    result = validate(seq)
    if not result.valid:
        raise InvalidSequence(f"{seq.render()!r}: {result.failure_reason.value} at {result.failure_index}")
    nodes: list[BlockNode] = [BlockNode(0, "input0", ()), BlockNode(1, "input1", ())]
    stack: list[int] = [0, 1]

    def push_node(kind: str, preds: tuple[int, ...]) -> int:
        nid = len(nodes)
        nodes.append(BlockNode(nid, kind, preds))
        return nid

    for sym in seq:
        if sym.is_layer:
            top = stack.pop()
            stack.append(push_node(_LAYER_NODE_KIND[sym], (top,)))
        elif sym is Symbol.BRANCH:
            stack.append(stack[-1])
        elif sym is Symbol.SWITCH:
            stack[-1], stack[-2] = stack[-2], stack[-1]
        else:  # merge: pops top two, pushes concat + 1x1 projection
            a = stack.pop()
            b = stack.pop()
            stack.append(push_node("concat_proj", (b, a)))
    acc = stack[0]
    for nid in stack[1:]:
        acc = push_node("add", (acc, nid))
    return BlockGraph(tuple(nodes), acc)


def export_dot(graph: BlockGraph) -> str:
    """Render a block graph as DOT text with deterministic node order."""
    lines = ["digraph block {", "  rankdir=TB;"]
    for node in graph.nodes:
        shape = "box" if node.kind.startswith("input") else "ellipse"
        suffix = " (out)" if node.id == graph.output_id else ""
        lines.append(f'  n{node.id} [label="{node.kind}{suffix}" shape={shape}];')
    for node in graph.nodes:
        for p in node.predecessors:
            lines.append(f"  n{p} -> n{node.id};")
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# generation / encoding


def random_snap(rng: np.random.Generator, length_range: tuple[int, int] = GEN_LEN_RANGE) -> SnapSequence:
    """Uniform length, i.i.d. uniform symbols, rejection-sampled to validity."""
    lo, hi = length_range
    for _ in range(10_000):
        n = int(rng.integers(lo, hi + 1))
        seq = SnapSequence(tuple(ALPHABET[i] for i in rng.integers(0, len(ALPHABET), size=n)))
        if validate(seq).valid:
            return seq
    raise InternalError("rejection sampling failed to produce a valid sequence")


def one_hot_encode(seq: SnapSequence, max_len: int = MAX_LEN, dtype=np.float64) -> np.ndarray:
    """(max_len+1) x 10 one-hot rows: symbols, then EOS, then PAD padding."""
    if len(seq) > max_len:
        raise SequenceTooLong(f"{len(seq)} symbols exceeds {max_len}")
    mat = np.zeros((max_len + 1, VOCAB_SIZE), dtype=dtype)
    for i, sym in enumerate(seq.symbols):
        mat[i, SYMBOL_INDEX[sym]] = 1.0
    mat[len(seq), EOS_INDEX] = 1.0
    mat[len(seq) + 1:, PAD_INDEX] = 1.0
    return mat


def decode_indices(indices: Iterator[int]) -> tuple[SnapSequence | None, ValidationResult]:
    """Read symbol indices up to the first EOS/PAD, then parse + validate.

    Returns (sequence, validation) where sequence is None when the prefix is
    empty or overlong; the ValidationResult always carries the failure.
    """
    symbols = []
    for idx in indices:
        if idx in (EOS_INDEX, PAD_INDEX):
            break
        symbols.append(ALPHABET[idx])
    if not symbols:
        return None, ValidationResult(False, 0, FailureReason.EMPTY)
    if len(symbols) > MAX_LEN:
        return None, ValidationResult(False, MAX_LEN, FailureReason.TOO_LONG)
    seq = SnapSequence(tuple(symbols))
    return seq, validate(seq)
