"""Plain-text key=value run configuration.

Lines hold `key = value` pairs; `#` starts a comment; unknown keys are
rejected with their line number so typos fail loudly instead of silently
falling back to defaults.
"""

from __future__ import annotations

from .autoencoder import AEHyper
from .poseenv import EnvConfig, TrainConfig
from .search import SearchConfig


class ConfigError(ValueError):
    pass


_SCHEMA = {
    # search loop
    "n_initial": int,
    "n_per_iteration": int,
    "budget_total": int,
    "ascent_step": float,
    "ascent_limit": int,
    "elite_batch": int,
    "seed": int,
    "worker_count": int,
    "ae_epochs": int,
    "record_timing": bool,
    # environment / dataset
    "n_train": int,
    "n_eval": int,
    "augment_fold": int,
    "env_seed": int,
    # candidate training
    "candidate_epochs": int,
    "candidate_batch": int,
    "candidate_lr": float,
    "candidate_dtype": str,
    "value_seeds": int,
    # autoencoder
    "ae_hidden": int,
    "ae_dense": int,
    "ae_lr": float,
    "ae_batch": int,
    "ae_recon_per_epoch": int,
}

_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config_text(text: str) -> dict:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        typ = _SCHEMA[key]
        try:
            if typ is bool:
                if val.lower() not in _BOOL_WORDS:
                    raise ValueError
                values[key] = _BOOL_WORDS[val.lower()]
            else:
                values[key] = typ(val)
        except ValueError:
            raise ConfigError(f"line {lineno}: cannot parse {val!r} as {typ.__name__}") from None
    return values


def search_config_from_values(values: dict) -> SearchConfig:
    v = dict(values)
    env = EnvConfig(
        n_train=v.pop("n_train", 2000),
        n_eval=v.pop("n_eval", 500),
        augment_fold=v.pop("augment_fold", 4),
        seed=v.pop("env_seed", 0),
    )
    train = TrainConfig(
        epochs=v.pop("candidate_epochs", 20),
        batch=v.pop("candidate_batch", 64),
        lr=v.pop("candidate_lr", 1e-3),
        dtype=v.pop("candidate_dtype", "float32"),
        value_seeds=v.pop("value_seeds", 1),
    )
    ae = AEHyper(
        hidden=v.pop("ae_hidden", 64),
        dense=v.pop("ae_dense", 128),
        lr=v.pop("ae_lr", 1e-3),
        batch=v.pop("ae_batch", 32),
        recon_per_epoch=v.pop("ae_recon_per_epoch", 512),
    )
    return SearchConfig(env=env, train=train, ae=ae, **v)


def load_search_config(path: str) -> SearchConfig:
    with open(path) as f:
        values = parse_config_text(f.read())
    try:
        return search_config_from_values(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
