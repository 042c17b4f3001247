"""Sequence autoencoder with a value head over the SNAP language.

The encoder maps (soft) symbol-probability rows to a 16-dimensional latent
vector bounded to [-1,1] by tanh; the decoder unrolls that vector back into
per-step symbol distributions; a linear head predicts candidate value from
the latent vector. Training sums three losses: reconstruction cross-entropy
on random programs, value regression on evaluated programs, and a latent
cycle consistency term that maps uniform latent samples through decode and
encode back onto themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import snap as S
from . import tensor as T

LATENT_DIM = 16
SEQ_STEPS = S.MAX_LEN + 1  # symbols plus the EOS row


@dataclass(frozen=True)
class AEHyper:
    hidden: int = 64
    dense: int = 128
    lr: float = 1e-3
    batch: int = 32
    retrain_epochs: int = 50
    recon_per_epoch: int = 512  # fresh random programs per epoch when no corpus is given


def _glorot(rng, fan_in, fan_out, shape):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class ArchAutoencoder:
    """Encoder/decoder/value-estimator triple plus its training loop."""

    def __init__(self, hyper: AEHyper = AEHyper(), seed: int = 0, dtype=np.float64):
        self.hyper = hyper
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        u = hyper.hidden
        d = hyper.dense
        p: dict[str, np.ndarray] = {}

        def lstm(prefix, din):
            p[f"{prefix}.wx"] = _glorot(rng, din, 4 * u, (din, 4 * u))
            p[f"{prefix}.wh"] = _glorot(rng, u, 4 * u, (u, 4 * u))
            b = np.zeros(4 * u)
            b[u:2 * u] = 1.0  # forget-gate bias
            p[f"{prefix}.b"] = b

        for direction in ("f", "b"):
            lstm(f"enc.l1{direction}", S.VOCAB_SIZE)
            lstm(f"enc.l2{direction}", 2 * u)
        p["enc.d1.w"] = _glorot(rng, 2 * u, d, (d, 2 * u))
        p["enc.d1.b"] = np.zeros(d)
        p["enc.d2.w"] = _glorot(rng, d, LATENT_DIM, (LATENT_DIM, d))
        p["enc.d2.b"] = np.zeros(LATENT_DIM)

        p["dec.init.w"] = _glorot(rng, LATENT_DIM, 4 * u, (4 * u, LATENT_DIM))
        p["dec.init.b"] = np.zeros(4 * u)
        lstm("dec.l1", LATENT_DIM)
        lstm("dec.l2", u)
        p["dec.out.w"] = _glorot(rng, u, S.VOCAB_SIZE, (S.VOCAB_SIZE, u))
        p["dec.out.b"] = np.zeros(S.VOCAB_SIZE)

        p["value.w"] = np.zeros((1, LATENT_DIM))
        p["value.b"] = np.zeros(1)

        self.params = {k: T.Tensor(v.astype(dtype), requires_grad=True) for k, v in p.items()}

    # -- tape-building passes -------------------------------------------------

    def _zeros(self, b: int) -> T.Tensor:
        return T.Tensor(np.zeros((b, self.hyper.hidden), dtype=self.dtype))

    def _bidir(self, x: T.Tensor, prefix: str) -> T.Tensor:
        b = x.data.shape[1]
        p = self.params
        hf = T.lstm_sequence(x, self._zeros(b), self._zeros(b),
                             p[f"{prefix}f.wx"], p[f"{prefix}f.wh"], p[f"{prefix}f.b"])
        hb = T.lstm_sequence(x, self._zeros(b), self._zeros(b),
                             p[f"{prefix}b.wx"], p[f"{prefix}b.wh"], p[f"{prefix}b.b"],
                             reverse=True)
        return T.concat([hf, hb], axis=2)

    def encode_t(self, x: T.Tensor) -> T.Tensor:
        """[T,B,10] probability rows to [B,16] latent vectors (on tape)."""
        u = self.hyper.hidden
        h1 = self._bidir(x, "enc.l1")
        h2 = self._bidir(h1, "enc.l2")
        t_len = x.data.shape[0]
        fwd_last = T.reshape(T.narrow(T.narrow(h2, 0, t_len - 1, 1), 2, 0, u), (-1, u))
        bwd_first = T.reshape(T.narrow(T.narrow(h2, 0, 0, 1), 2, u, u), (-1, u))
        summary = T.concat([fwd_last, bwd_first], axis=1)
        hid = T.dense(summary, self.params["enc.d1.w"], self.params["enc.d1.b"], "tanh")
        return T.dense(hid, self.params["enc.d2.w"], self.params["enc.d2.b"], "tanh")

    def decode_logits_t(self, z: T.Tensor) -> T.Tensor:
        """[B,16] latents to [T,B,10] symbol logits (on tape)."""
        u = self.hyper.hidden
        p = self.params
        state = T.dense(z, p["dec.init.w"], p["dec.init.b"], "tanh")
        h1 = T.narrow(state, 1, 0, u)
        c1 = T.narrow(state, 1, u, u)
        h2 = T.narrow(state, 1, 2 * u, u)
        c2 = T.narrow(state, 1, 3 * u, u)
        xseq = T.tile0(z, SEQ_STEPS)
        s1 = T.lstm_sequence(xseq, h1, c1, p["dec.l1.wx"], p["dec.l1.wh"], p["dec.l1.b"])
        s2 = T.lstm_sequence(s1, h2, c2, p["dec.l2.wx"], p["dec.l2.wh"], p["dec.l2.b"])
        return T.dense(s2, p["dec.out.w"], p["dec.out.b"])

    def value_t(self, z: T.Tensor) -> T.Tensor:
        return T.dense(z, self.params["value.w"], self.params["value.b"])

    # -- inference surfaces ---------------------------------------------------

    def encode(self, mats: np.ndarray) -> np.ndarray:
        """[B,13,10] row-stochastic matrices to [B,16] latents."""
        mats = np.asarray(mats, dtype=self.dtype)
        if mats.ndim != 3 or mats.shape[1:] != (SEQ_STEPS, S.VOCAB_SIZE):
            raise T.ShapeError(f"expected [B,{SEQ_STEPS},{S.VOCAB_SIZE}], got {mats.shape}")
        with T.no_grad():
            return self.encode_t(T.Tensor(mats.transpose(1, 0, 2))).data

    def encode_sequences(self, seqs: list[S.SnapSequence]) -> np.ndarray:
        return self.encode(np.stack([S.one_hot_encode(s, dtype=self.dtype) for s in seqs]))

    def decode(self, z: np.ndarray) -> np.ndarray:
        """[B,16] latents to [B,13,10] row-stochastic matrices."""
        z = np.clip(np.asarray(z, dtype=self.dtype), -1.0, 1.0)
        with T.no_grad():
            logits = self.decode_logits_t(T.Tensor(z))
            probs = T.softmax(logits, axis=-1)
        return probs.data.transpose(1, 0, 2)

    def hard_decode(self, z: np.ndarray) -> list[tuple[S.SnapSequence | None, S.ValidationResult]]:
        """Argmax readout of each latent until the first EOS/PAD row."""
        z = np.atleast_2d(z)
        probs = self.decode(z)
        return [S.decode_indices(row) for row in probs.argmax(axis=-1)]

    def estimate_value(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=self.dtype))
        with T.no_grad():
            return self.value_t(T.Tensor(z)).data[:, 0]

    def value_gradient(self) -> np.ndarray:
        """d value / d z; exact because the head is linear."""
        return self.params["value.w"].data[0].astype(np.float64)

    # -- training -------------------------------------------------------------

    def _recon_loss(self, mats: np.ndarray, masks: np.ndarray, z_out: list | None = None) -> T.Tensor:
        x = T.Tensor(mats.transpose(1, 0, 2))
        z = self.encode_t(x)
        if z_out is not None:
            z_out.append(z)
        logits = self.decode_logits_t(z)
        probs9 = T.softmax(T.narrow(logits, 2, 0, S.VOCAB_SIZE - 1), axis=-1)
        target9 = T.Tensor(mats.transpose(1, 0, 2)[:, :, : S.VOCAB_SIZE - 1])
        lp = T.log(T.clamp(probs9, 1e-12, 1.0))
        per_pos = -T.tsum(T.mul(target9, lp), axis=2)
        masked = T.mul(per_pos, T.Tensor(masks.T))
        return T.mul(T.tsum(masked), T.Tensor(np.array(1.0 / masks.sum(), dtype=self.dtype)))

    def _cycle_loss(self, z_hat: np.ndarray) -> T.Tensor:
        logits = self.decode_logits_t(T.Tensor(z_hat))
        probs = T.softmax(logits, axis=-1)
        z_back = self.encode_t(probs)
        return T.mse_loss(z_back, T.Tensor(z_hat))

    def _value_loss(self, mats: np.ndarray, targets: np.ndarray) -> T.Tensor:
        z = self.encode_t(T.Tensor(mats.transpose(1, 0, 2)))
        v = self.value_t(z)
        return T.mse_loss(v, T.Tensor(targets[:, None]))

    def _pack(self, seqs: list[S.SnapSequence]) -> tuple[np.ndarray, np.ndarray]:
        mats = np.stack([S.one_hot_encode(s, dtype=self.dtype) for s in seqs])
        masks = np.zeros((len(seqs), SEQ_STEPS), dtype=self.dtype)
        for i, s in enumerate(seqs):
            masks[i, : len(s) + 1] = 1.0  # symbols and the EOS row are scored
        return mats, masks

    def train_epoch(self, known: list[tuple[str, float]], rng: np.random.Generator,
                    optimizer: T.Optimizer, corpus: list[S.SnapSequence] | None = None) -> tuple[float, float, float]:
        """One pass of the three mini-batch streams; returns mean losses.

        known holds (snap text, value target) pairs for the regression stream;
        it may be empty, in which case that term is skipped. The
        reconstruction stream draws from corpus when given, otherwise it
        generates fresh random programs.
        """
        batch = self.hyper.batch
        if corpus is not None:
            order = rng.permutation(len(corpus))
            recon_batches = [
                [corpus[i] for i in order[s:s + batch]] for s in range(0, len(corpus), batch)
            ]
        else:
            n = self.hyper.recon_per_epoch
            recon_batches = [
                [S.random_snap(rng) for _ in range(batch)] for _ in range(max(1, n // batch))
            ]
        snapshot = {k: p.data.copy() for k, p in self.params.items()}
        opt_snapshot = optimizer.state_snapshot()
        totals = np.zeros(3)
        try:
            for seqs in recon_batches:
                mats, masks = self._pack(seqs)
                optimizer.zero_grad()
                ce = self._recon_loss(mats, masks)
                z_hat = rng.uniform(-1.0, 1.0, size=(len(seqs), LATENT_DIM)).astype(self.dtype)
                cyc = self._cycle_loss(z_hat)
                loss = T.add(ce, cyc)
                if known:
                    idx = rng.integers(0, len(known), size=min(batch, len(known)))
                    vseqs = [S.parse_snap(known[i][0]) for i in idx]
                    vtargets = np.array([known[i][1] for i in idx], dtype=self.dtype)
                    vmats, _ = self._pack(vseqs)
                    vloss = self._value_loss(vmats, vtargets)
                    loss = T.add(loss, vloss)
                    totals[1] += vloss.item()
                loss.backward()
                optimizer.step()
                totals[0] += ce.item()
                totals[2] += cyc.item()
        except T.NonFiniteGradient:
            for k, p in self.params.items():
                p.data = snapshot[k]
            optimizer.state_restore(opt_snapshot)
            raise
        n_b = len(recon_batches)
        return totals[0] / n_b, totals[1] / n_b, totals[2] / n_b

    def retrain(self, known: list[tuple[str, float]], seed: int,
                epochs: int | None = None, corpus: list[S.SnapSequence] | None = None,
                log: list | None = None) -> None:
        """Warm-start training for a fixed number of epochs (search step 1)."""
        rng = np.random.default_rng(seed)
        opt = T.Optimizer(self.params, kind="adam", lr=self.hyper.lr)
        for ep in range(epochs if epochs is not None else self.hyper.retrain_epochs):
            losses = self.train_epoch(known, rng, opt, corpus=corpus)
            if log is not None:
                log.append((ep,) + losses)

    # -- persistence ----------------------------------------------------------

    def save(self, path_prefix: str):
        T.save_params(path_prefix, {k: p.data for k, p in self.params.items()})

    def load(self, path_prefix: str):
        arrays = T.load_params(path_prefix)
        for k, p in self.params.items():
            p.data = arrays[k].astype(self.dtype)


def reconstruction_accuracy(ae: ArchAutoencoder, seqs: list[S.SnapSequence]) -> tuple[float, float]:
    """(token accuracy, exact-match rate) of encode-then-hard-decode."""
    z = ae.encode_sequences(seqs)
    decoded = ae.hard_decode(z)
    tok_hit = 0
    tok_all = 0
    exact = 0
    for seq, (dec, _res) in zip(seqs, decoded):
        want = [S.SYMBOL_INDEX[s] for s in seq.symbols] + [S.EOS_INDEX]
        got = ([S.SYMBOL_INDEX[s] for s in dec.symbols] + [S.EOS_INDEX]) if dec is not None else []
        hits = sum(1 for a, b in zip(want, got) if a == b)
        tok_hit += hits
        tok_all += len(want)
        if dec is not None and dec == seq:
            exact += 1
    return tok_hit / tok_all, exact / len(seqs)
