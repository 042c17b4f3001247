"""Assemble trainable landmark-regression networks from block graphs.

The macro layout repeats one block: half the blocks before a stride-2
reduction at width_pre, half after at width_post. Each block consumes the two
preceding stage outputs (the stem is duplicated for block 1), and the head
flattens the final feature map into a 12-way linear regression (six landmarks
times two coordinates).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .snap import BlockGraph, SnapSequence, build_block_graph, parse_snap


@dataclass(frozen=True)
class MacroConfig:
    blocks_total: int = 4
    width_pre: int = 24
    width_post: int = 48
    input_shape: tuple[int, int, int] = (1, 32, 32)
    landmark_count: int = 6

    def __post_init__(self):
        if self.blocks_total % 2 != 0 or self.blocks_total <= 0:
            raise ValueError("blocks_total must be even and positive")
        if self.width_post < self.width_pre:
            raise ValueError("width_post must be >= width_pre")


SEARCH_CONFIG = MacroConfig(blocks_total=4, width_pre=24, width_post=48)
VARIANT_A = MacroConfig(blocks_total=8, width_pre=24, width_post=48)
VARIANT_B = MacroConfig(blocks_total=8, width_pre=56, width_post=112)


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str  # he_uniform | zeros | ones


@dataclass(frozen=True)
class NetworkSpec:
    block: BlockGraph
    cfg: MacroConfig
    params: tuple[ParamSpec, ...]
    bn_sites: tuple[tuple[str, int], ...]  # (name, channels)

    @property
    def output_dim(self) -> int:
        return 2 * self.cfg.landmark_count


def _propagate_widths(graph: BlockGraph, w: int, in_widths: tuple[int, int]) -> list[int]:
    """Output channel count per node; depthwise and pooling keep their input width."""
    widths = [0] * len(graph)
    for node in graph.nodes:
        if node.kind == "input0":
            widths[node.id] = in_widths[0]
        elif node.kind == "input1":
            widths[node.id] = in_widths[1]
        elif node.kind in ("bn_relu_dwconv3", "maxpool3"):
            widths[node.id] = widths[node.predecessors[0]]
        else:  # conv1 / conv3 / dwsconv3 / concat_proj / add project to block width
            widths[node.id] = w
    return widths


def _block_param_specs(graph: BlockGraph, w: int, in_widths: tuple[int, int], prefix: str):
    """Parameter and batchnorm-site shapes for one block instance."""
    widths = _propagate_widths(graph, w, in_widths)
    params: list[ParamSpec] = []
    bn: list[tuple[str, int]] = []

    def conv_unit(name: str, cin: int, cout: int, k: int):
        bn.append((f"{name}.bn", cin))
        params.append(ParamSpec(f"{name}.bn_gamma", (cin,), "ones"))
        params.append(ParamSpec(f"{name}.bn_beta", (cin,), "zeros"))
        params.append(ParamSpec(f"{name}.w", (cout, cin, k, k), "he_uniform"))
        params.append(ParamSpec(f"{name}.b", (cout,), "zeros"))

    for node in graph.nodes:
        name = f"{prefix}.n{node.id}"
        cin = widths[node.predecessors[0]] if node.predecessors else 0
        if node.kind == "bn_relu_conv1":
            conv_unit(name, cin, w, 1)
        elif node.kind == "bn_relu_conv3":
            conv_unit(name, cin, w, 3)
        elif node.kind == "bn_relu_dwconv3":
            bn.append((f"{name}.bn", cin))
            params.append(ParamSpec(f"{name}.bn_gamma", (cin,), "ones"))
            params.append(ParamSpec(f"{name}.bn_beta", (cin,), "zeros"))
            params.append(ParamSpec(f"{name}.w", (cin, 1, 3, 3), "he_uniform"))
            params.append(ParamSpec(f"{name}.b", (cin,), "zeros"))
        elif node.kind == "bn_relu_dwsconv3":
            bn.append((f"{name}.bn", cin))
            params.append(ParamSpec(f"{name}.bn_gamma", (cin,), "ones"))
            params.append(ParamSpec(f"{name}.bn_beta", (cin,), "zeros"))
            params.append(ParamSpec(f"{name}.dw_w", (cin, 1, 3, 3), "he_uniform"))
            params.append(ParamSpec(f"{name}.pw_w", (w, cin, 1, 1), "he_uniform"))
            params.append(ParamSpec(f"{name}.pw_b", (w,), "zeros"))
        elif node.kind == "concat_proj":
            total = sum(widths[p] for p in node.predecessors)
            conv_unit(name, total, w, 1)
        elif node.kind == "add":
            for slot, p in enumerate(node.predecessors):
                if widths[p] != w:
                    conv_unit(f"{name}.align{slot}", widths[p], w, 1)
    return params, bn, widths


def assemble(block: BlockGraph, cfg: MacroConfig) -> NetworkSpec:
    """Pure macro assembly: enumerate every parameter the network will hold."""
    params: list[ParamSpec] = [
        ParamSpec("stem.w", (cfg.width_pre, cfg.input_shape[0], 3, 3), "he_uniform"),
        ParamSpec("stem.b", (cfg.width_pre,), "zeros"),
    ]
    bn: list[tuple[str, int]] = []
    half = cfg.blocks_total // 2
    for k in range(cfg.blocks_total):
        w = cfg.width_pre if k < half else cfg.width_post
        p, b, _ = _block_param_specs(block, w, (w, w), f"blk{k}")
        params.extend(p)
        bn.extend(b)
    for stream in (0, 1):
        name = f"center{stream}"
        bn.append((f"{name}.bn", cfg.width_pre))
        params.append(ParamSpec(f"{name}.bn_gamma", (cfg.width_pre,), "ones"))
        params.append(ParamSpec(f"{name}.bn_beta", (cfg.width_pre,), "zeros"))
        params.append(ParamSpec(f"{name}.w", (cfg.width_post, cfg.width_pre, 1, 1), "he_uniform"))
        params.append(ParamSpec(f"{name}.b", (cfg.width_post,), "zeros"))
    h, wd = cfg.input_shape[1], cfg.input_shape[2]
    head_in = cfg.width_post * ((h + 1) // 2) * ((wd + 1) // 2)
    params.append(ParamSpec("head.w", (2 * cfg.landmark_count, head_in), "he_uniform"))
    params.append(ParamSpec("head.b", (2 * cfg.landmark_count,), "zeros"))
    return NetworkSpec(block, cfg, tuple(params), tuple(bn))


def param_count(spec: NetworkSpec) -> int:
    return sum(int(np.prod(p.shape)) for p in spec.params)


class Model:
    """Instantiated network: parameters, batchnorm states, and the forward pass."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=np.float64):
        self.spec = spec
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.params: dict[str, T.Tensor] = {}
        for ps in spec.params:
            if ps.init == "he_uniform":
                fan_in = int(np.prod(ps.shape[1:])) if len(ps.shape) > 1 else ps.shape[0]
                bound = np.sqrt(6.0 / max(fan_in, 1))
                data = rng.uniform(-bound, bound, size=ps.shape)
            elif ps.init == "ones":
                data = np.ones(ps.shape)
            else:
                data = np.zeros(ps.shape)
            self.params[ps.name] = T.Tensor(data.astype(dtype), requires_grad=True)
        self.bn_states = {name: T.BatchNormState(ch, dtype=dtype) for name, ch in spec.bn_sites}

    def _bn_relu(self, x: T.Tensor, name: str, train: bool) -> T.Tensor:
        return T.batchnorm_relu(
            x, self.params[f"{name}_gamma"], self.params[f"{name}_beta"], self.bn_states[name], train
        )

    def _conv_unit(self, x: T.Tensor, name: str, train: bool) -> T.Tensor:
        h = self._bn_relu(x, f"{name}.bn", train)
        return T.conv2d(h, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _run_block(self, in0: T.Tensor, in1: T.Tensor, w: int, prefix: str, train: bool) -> T.Tensor:
        graph = self.spec.block
        widths = _propagate_widths(graph, w, (in0.shape[1], in1.shape[1]))
        values: dict[int, T.Tensor] = {}
        for node in graph.nodes:
            name = f"{prefix}.n{node.id}"
            if node.kind == "input0":
                values[node.id] = in0
            elif node.kind == "input1":
                values[node.id] = in1
            elif node.kind in ("bn_relu_conv1", "bn_relu_conv3"):
                values[node.id] = self._conv_unit(values[node.predecessors[0]], name, train)
            elif node.kind == "bn_relu_dwconv3":
                h = self._bn_relu(values[node.predecessors[0]], f"{name}.bn", train)
                values[node.id] = T.conv2d(h, self.params[f"{name}.w"], self.params[f"{name}.b"], mode="depthwise")
            elif node.kind == "bn_relu_dwsconv3":
                h = self._bn_relu(values[node.predecessors[0]], f"{name}.bn", train)
                h = T.conv2d(h, self.params[f"{name}.dw_w"], None, mode="depthwise")
                values[node.id] = T.conv2d(h, self.params[f"{name}.pw_w"], self.params[f"{name}.pw_b"])
            elif node.kind == "maxpool3":
                values[node.id] = T.maxpool3(values[node.predecessors[0]], stride=1)
            elif node.kind == "concat_proj":
                cat = T.concat([values[p] for p in node.predecessors], axis=1)
                values[node.id] = self._conv_unit(cat, name, train)
            elif node.kind == "add":
                ops = []
                for slot, p in enumerate(node.predecessors):
                    v = values[p]
                    if widths[p] != w:
                        v = self._conv_unit(v, f"{name}.align{slot}", train)
                    ops.append(v)
                values[node.id] = T.add(ops[0], ops[1])
            else:
                raise ValueError(f"unknown node kind {node.kind}")
        return values[graph.output_id]

    def forward(self, x: T.Tensor, train: bool = False) -> T.Tensor:
        """[N,1,H,W] patches to [N,12] landmark coordinates."""
        cfg = self.spec.cfg
        if x.data.ndim == 3:
            x = T.reshape(x, (1,) + x.data.shape)
        stem = T.conv2d(x, self.params["stem.w"], self.params["stem.b"])
        prev2, prev1 = stem, stem
        half = cfg.blocks_total // 2
        for k in range(cfg.blocks_total):
            if k == half:
                streams = []
                for stream, v in enumerate((prev2, prev1)):
                    name = f"center{stream}"
                    pooled = T.maxpool3(v, stride=2)
                    h = self._bn_relu(pooled, f"{name}.bn", train)
                    streams.append(T.conv2d(h, self.params[f"{name}.w"], self.params[f"{name}.b"]))
                prev2, prev1 = streams
            w = cfg.width_pre if k < half else cfg.width_post
            out = self._run_block(prev2, prev1, w, f"blk{k}", train)
            prev2, prev1 = prev1, out
        flat = T.reshape(prev1, (prev1.shape[0], -1))
        return T.dense(flat, self.params["head.w"], self.params["head.b"])

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Inference forward (eval-mode batchnorm, no tape)."""
        with T.no_grad():
            return self.forward(T.Tensor(np.asarray(x, dtype=self.dtype)), train=False).data

    def param_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.params.items()}
        for name, st in self.bn_states.items():
            arrays[f"{name}.running_mean"] = st.running_mean
            arrays[f"{name}.running_var"] = st.running_var
        return arrays

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for name, p in self.params.items():
            p.data = arrays[name].astype(self.dtype)
        for name, st in self.bn_states.items():
            st.running_mean = arrays[f"{name}.running_mean"].astype(self.dtype)
            st.running_var = arrays[f"{name}.running_var"].astype(self.dtype)


def instantiate(spec: NetworkSpec, seed: int = 0, dtype=np.float64) -> Model:
    return Model(spec, seed=seed, dtype=dtype)


# architecture export: everything needed to rebuild the network bit-exactly


def export_architecture(snap_text: str, cfg: MacroConfig) -> dict:
    return {
        "snap": snap_text,
        "blocks_total": cfg.blocks_total,
        "width_pre": cfg.width_pre,
        "width_post": cfg.width_post,
    }


def architecture_from_json(obj: dict) -> tuple[SnapSequence, MacroConfig]:
    seq = parse_snap(obj["snap"])
    cfg = MacroConfig(
        blocks_total=int(obj["blocks_total"]),
        width_pre=int(obj["width_pre"]),
        width_post=int(obj["width_post"]),
    )
    return seq, cfg


def spec_for(snap_text: str, cfg: MacroConfig) -> NetworkSpec:
    return assemble(build_block_graph(parse_snap(snap_text)), cfg)
