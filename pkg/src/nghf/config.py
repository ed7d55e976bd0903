"""Plain-text ``key = value`` run configuration.

Every key has a typed default; unknown keys and unparsable values are
rejected.  ``#`` starts a comment.  The resolved configuration is written
back in the same format next to every run's outputs.
"""

from __future__ import annotations

from pathlib import Path

from .cg import CGConfig
from .loss import LossConfig
from .model import LayerSpec, ModelSpec
from .optim import OptimizerConfig
from .synthetic import SyntheticConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    # data
    "data_dir": "",
    "train_split": "train",
    "valid_split": "valid",
    "init_checkpoint": "",
    # synthetic task
    "num_train": 200,
    "num_valid": 50,
    "num_phones": 8,
    "states_per_phone": 3,
    "feat_dim": 10,
    "avg_frames": 40,
    "min_phone_frames": 3,
    "confusability": 3,
    "separation": 2.0,
    "partner_offset": 0.6,
    "noise": 1.0,
    "lm_noise": 0.5,
    # model: hidden layers, output layer is added from the dataset
    "layers": "tdnn:32:sigmoid:-2,-1,0,1,2",
    "init_scale": 1.0,
    # loss
    "loss": "mpe",
    "kappa": 1.0,
    "prior": "estimated",
    # optimiser
    "optimizer": "nghf",
    "learning_rate": 0.01,
    "momentum": 0.0,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "ng_lambda": 1.0,
    "inner_ng_iters": 4,
    "ng_curvature": "fisher",
    "cg_iters": 8,
    "damping": 0.0,
    "stabilize": True,
    "precondition": "auto",
    "eval_every": 1,
    "updates_per_epoch": 8,
    "gradient_batch_size": 0,
    "cg_batch_size": 32,
    "minibatch_size": 1,
    "select_on": "cg_batch",
    # run
    "epochs": 2,
    "valid_every": 0,
    "seed": 0,
    "precision": "f64",
    "workers": 1,
    "out": "",
    "timings": True,
}

_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            return _BOOL[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, val)
    return values


def resolve(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the file, then explicit overrides (already typed or strings)."""
    cfg = dict(DEFAULTS)
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        cfg.update(parse_config_text(p.read_text(), str(p)))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        cfg[key] = _coerce(key, val) if isinstance(val, str) else val
    if cfg["precision"] not in ("f32", "f64"):
        raise ConfigError("precision must be f32 or f64")
    if cfg["precondition"] not in ("auto", "on", "off"):
        raise ConfigError("precondition must be auto, on or off")
    if cfg["workers"] < 1 or cfg["epochs"] < 0:
        raise ConfigError("workers must be >= 1 and epochs >= 0")
    return cfg


def format_config(cfg: dict) -> str:
    lines = []
    for key in DEFAULTS:
        val = cfg[key]
        if isinstance(val, bool):
            val = "true" if val else "false"
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def parse_layers(text: str) -> list[LayerSpec]:
    """``kind:dim[:activation[:extra]]`` separated by ``;``.

    ``extra`` is the comma-separated splice offsets for tdnn layers and the
    number of unfolded steps for rnn/lstm layers.
    """
    layers = []
    for chunk in filter(None, (c.strip() for c in text.split(";"))):
        parts = chunk.split(":")
        if len(parts) < 2:
            raise ConfigError(f"layer {chunk!r}: need at least kind:dim")
        try:
            kind, dim = parts[0], int(parts[1])
            kw = {}
            if len(parts) > 2 and parts[2]:
                kw["activation"] = parts[2]
            if len(parts) > 3:
                if kind == "tdnn":
                    kw["splice_offsets"] = tuple(int(x) for x in parts[3].split(","))
                elif kind in ("rnn", "lstm"):
                    kw["unfold_steps"] = int(parts[3])
                else:
                    raise ConfigError(f"layer {chunk!r}: {kind} takes no extra field")
            layers.append(LayerSpec(kind, dim, **kw))
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"layer {chunk!r}: {exc}") from None
    return layers


def model_spec(cfg: dict, input_dim: int, num_states: int) -> ModelSpec:
    hidden = parse_layers(cfg["layers"])
    try:
        return ModelSpec(tuple(hidden) + (LayerSpec("fc", num_states, "identity"),),
                         input_dim, num_states)
    except ValueError as exc:
        raise ConfigError(f"layers: {exc}") from None


def loss_config(cfg: dict) -> LossConfig:
    try:
        return LossConfig(cfg["loss"], cfg["kappa"], cfg["prior"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def optimizer_config(cfg: dict) -> OptimizerConfig:
    precond = {"auto": None, "on": True, "off": False}[cfg["precondition"]]
    try:
        cg = CGConfig(max_iters=cfg["cg_iters"], damping=cfg["damping"],
                      stabilize=cfg["stabilize"], precondition=precond,
                      eval_every=cfg["eval_every"])
        return OptimizerConfig(
            kind=cfg["optimizer"], learning_rate=cfg["learning_rate"],
            momentum=cfg["momentum"], beta1=cfg["beta1"], beta2=cfg["beta2"],
            eps=cfg["eps"], ng_lambda=cfg["ng_lambda"], inner_ng_iters=cfg["inner_ng_iters"],
            cg=cg, updates_per_epoch=cfg["updates_per_epoch"],
            gradient_batch_size=cfg["gradient_batch_size"],
            cg_batch_size=cfg["cg_batch_size"], minibatch_size=cfg["minibatch_size"],
            select_on=cfg["select_on"], ng_curvature=cfg["ng_curvature"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def synthetic_config(cfg: dict) -> SyntheticConfig:
    try:
        return SyntheticConfig(**{k: cfg[k] for k in (
            "num_train", "num_valid", "num_phones", "states_per_phone", "feat_dim",
            "avg_frames", "min_phone_frames", "confusability", "separation",
            "partner_offset", "noise", "lm_noise", "seed")})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
