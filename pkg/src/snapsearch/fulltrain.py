"""Full-scale retraining of a discovered architecture and pose evaluation.

Scales the block up to the eight-block macro layout (variant A keeps the
search widths 24/48, variant B widens to 56/112), trains with RMSProp, and
reports mean and standard deviation of the absolute position and angle
errors for one and three refinement iterations on the held-out scenes.
"""

from __future__ import annotations

import json
import os
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import network as N
from . import poseenv as E
from . import tensor as T

VARIANTS = {"A": N.VARIANT_A, "B": N.VARIANT_B}


def error_stats(errs: np.ndarray) -> dict:
    return {
        "position_mm": {"mean": float(errs[:, 0].mean()), "std": float(errs[:, 0].std())},
        "angle_deg": {"mean": float(errs[:, 1].mean()), "std": float(errs[:, 1].std())},
    }


def train_full(arch: dict, variant: str, env_cfg: E.EnvConfig, epochs: int = 80,
               lr: float = 3e-4, batch: int = 32, seed: int = 0,
               dtype: str = "float32", out_dir: str | None = None, log=print) -> dict:
    """Train the scaled architecture and produce the four-cell metrics table."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {sorted(VARIANTS)}")
    seq, _search_cfg = N.architecture_from_json(arch)
    macro = VARIANTS[variant]
    spec = N.spec_for(seq.render(), macro)
    log(f"variant {variant}: {seq.render()!r}, {N.param_count(spec)} parameters")

    dataset = E.build_dataset(env_cfg)
    model = N.instantiate(spec, seed=seed, dtype=E._np_dtype(dtype))
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        E.train_landmark_model(
            model, dataset.train_x, dataset.train_y, epochs, batch, lr, seed,
            optimizer="rmsprop",
            on_epoch=lambda ep: log(f"epoch {ep + 1}/{epochs}") if (ep + 1) % 10 == 0 else None,
        )
        train_s = time.perf_counter() - t0
        regmse = E.batched_regmse(model, dataset.modelsel_x, dataset.modelsel_y)
        metrics = {
            "snap": seq.render(),
            "variant": variant,
            "param_count": N.param_count(spec),
            "epochs": epochs,
            "optimizer": "rmsprop",
            "train_seconds": round(train_s, 1),
            "modelsel_regmse": regmse,
            "modelsel_value": E.value_from_regmse(regmse),
        }
        for iters in (1, 3):
            errs = E.evaluate_pose_errors(model, dataset.eval_samples, iterations=iters)
            metrics[f"iterations_{iters}"] = error_stats(errs)
            metrics[f"iterations_{iters}"]["position_mm_median"] = float(np.median(errs[:, 0]))
            metrics[f"iterations_{iters}"]["angle_deg_median"] = float(np.median(errs[:, 1]))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        T.save_params(os.path.join(out_dir, f"model_{variant}"), model.param_arrays())
        with open(os.path.join(out_dir, f"metrics_{variant}.json"), "w") as f:
            json.dump(metrics, f, indent=1, sort_keys=True)
    return metrics
