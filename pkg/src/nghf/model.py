"""Layered acoustic models with forward, backprop and R-forward passes.

Every layer maps a (T, n_in) frame matrix to a (T, dim) frame matrix.  The
network output is the pre-activation of the last layer (the logits); the
softmax lives in the losses.

Recurrent layers (Elman and LSTM) are evaluated with truncated unfolding:
the output at frame ``t`` is the state reached after running the recurrence
over frames ``t-u+1 .. t`` starting from a zero state.  The whole network is
therefore a fixed feed-forward graph per frame, and backprop / R-forward are
exact derivatives of it.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class LayerKind(str, enum.Enum):
    FC = "fc"
    TDNN = "tdnn"
    RNN = "rnn"
    LSTM = "lstm"


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


_ACTIVATIONS = {
    # name: (h(a), h'(a))
    "sigmoid": (_sigmoid, lambda a: _sigmoid(a) * (1.0 - _sigmoid(a))),
    "tanh": (np.tanh, lambda a: 1.0 - np.tanh(a) ** 2),
    # derivative at exactly 0 is taken as 0
    "relu": (lambda a: np.maximum(a, 0.0), lambda a: (a > 0).astype(a.dtype)),
    "identity": (lambda a: a, lambda a: np.ones_like(a)),
}


class ModelError(ValueError):
    """Inconsistent model description, parameters or inputs."""


class DivergenceError(FloatingPointError):
    """A forward pass produced non-finite activations."""


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    dim: int
    activation: str = "sigmoid"
    splice_offsets: tuple[int, ...] = (0,)
    unfold_steps: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "splice_offsets", tuple(int(o) for o in self.splice_offsets))
        if self.dim < 1:
            raise ModelError(f"layer dim must be positive, got {self.dim}")
        if self.activation not in _ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        if self.kind is LayerKind.TDNN:
            offs = self.splice_offsets
            if not offs or any(b <= a for a, b in zip(offs, offs[1:])):
                raise ModelError(f"splice offsets must be strictly increasing: {offs}")
        if self.unfold_steps < 1:
            raise ModelError("unfold_steps must be >= 1")

    @property
    def recurrent(self) -> bool:
        return self.kind in (LayerKind.RNN, LayerKind.LSTM)

    def input_replication(self) -> int:
        """How many time-shifted copies of its input one output frame reads."""
        if self.kind is LayerKind.TDNN:
            return len(self.splice_offsets)
        if self.recurrent:
            return self.unfold_steps
        return 1

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "dim": self.dim, "activation": self.activation}
        if self.kind is LayerKind.TDNN:
            d["splice_offsets"] = list(self.splice_offsets)
        if self.recurrent:
            d["unfold_steps"] = self.unfold_steps
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            kind=LayerKind(d["kind"]),
            dim=int(d["dim"]),
            activation=d.get("activation", "sigmoid"),
            splice_offsets=tuple(d.get("splice_offsets", (0,))),
            unfold_steps=int(d.get("unfold_steps", 1)),
        )


def _param_shapes(spec: LayerSpec, n_in: int) -> list[tuple[str, tuple[int, ...]]]:
    d = spec.dim
    if spec.kind is LayerKind.FC:
        return [("W", (d, n_in)), ("b", (d,))]
    if spec.kind is LayerKind.TDNN:
        return [("W", (d, n_in * len(spec.splice_offsets))), ("b", (d,))]
    if spec.kind is LayerKind.RNN:
        return [("W", (d, n_in + d)), ("b", (d,))]
    shapes = []
    for gate in ("i", "f", "g", "o"):
        shapes += [(f"W_{gate}", (d, n_in + d)), (f"b_{gate}", (d,))]
    return shapes


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer stack; the last layer emits ``output_dim`` logits."""

    layers: tuple[LayerSpec, ...]
    input_dim: int
    output_dim: int
    _layout: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ModelError("model needs at least one layer")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ModelError("input_dim and output_dim must be positive")
        last = self.layers[-1]
        if last.dim != self.output_dim:
            raise ModelError(f"last layer dim {last.dim} != output_dim {self.output_dim}")
        if last.recurrent or last.activation != "identity":
            raise ModelError("output layer must be fc/tdnn with identity activation")
        layout, offset, n_in = [], 0, self.input_dim
        for spec in self.layers:
            entries = []
            for name, shape in _param_shapes(spec, n_in):
                size = int(np.prod(shape))
                entries.append((name, shape, offset, size))
                offset += size
            layout.append(entries)
            n_in = spec.dim
        object.__setattr__(self, "_layout", layout)
        object.__setattr__(self, "_num_params", offset)

    @property
    def num_params(self) -> int:
        return self._num_params

    def layer_slices(self) -> list[slice]:
        """Flat-index range owned by each layer."""
        out = []
        for entries in self._layout:
            start = entries[0][2]
            stop = entries[-1][2] + entries[-1][3]
            out.append(slice(start, stop))
        return out

    def unpack(self, params: np.ndarray) -> list[dict[str, np.ndarray]]:
        """Per-layer dicts of reshaped views into the flat parameter vector."""
        params = np.asarray(params)
        if params.ndim != 1 or params.shape[0] != self.num_params:
            raise ModelError(f"expected {self.num_params} parameters, got {params.shape}")
        return [
            {name: params[off:off + size].reshape(shape) for name, shape, off, size in entries}
            for entries in self._layout
        ]

    def init_params(self, rng: np.random.Generator, scale: float = 1.0,
                    dtype=np.float64) -> np.ndarray:
        """Glorot-style uniform weights, zero biases (forget-gate bias 1)."""
        params = np.zeros(self.num_params, dtype=dtype)
        for spec, views in zip(self.layers, self.unpack(params)):
            for name, view in views.items():
                if name.startswith("W"):
                    fan_in, fan_out = view.shape[1], view.shape[0]
                    lim = scale * np.sqrt(6.0 / (fan_in + fan_out))
                    view[...] = rng.uniform(-lim, lim, size=view.shape)
                elif name == "b_f":
                    view[...] = 1.0
        return params

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            layers=tuple(LayerSpec.from_dict(x) for x in d["layers"]),
            input_dim=int(d["input_dim"]),
            output_dim=int(d["output_dim"]),
        )


# --------------------------------------------------------------------------
# per-layer passes


def _f64(x):
    return np.asarray(x, dtype=np.float64)


def _splice_index(T: int, offsets) -> np.ndarray:
    # boundary frames are replicated at utterance edges
    t = np.arange(T)
    return np.stack([np.clip(t + o, 0, T - 1) for o in offsets])


def _splice(X, index):
    return np.concatenate([X[idx] for idx in index], axis=1)


def _unsplice_into(dX, dXs, index, n_in):
    for j, idx in enumerate(index):
        np.add.at(dX, idx, dXs[:, j * n_in:(j + 1) * n_in])


def _window_steps(T: int, u: int):
    """(source frame, valid mask) for each of the u unfolded steps."""
    t = np.arange(T)
    for step in range(u):
        idx = t - (u - 1) + step
        yield np.maximum(idx, 0), idx >= 0


def _dense_forward(spec, p, X):
    if spec.kind is LayerKind.TDNN:
        index = _splice_index(X.shape[0], spec.splice_offsets)
        Xin = _splice(X, index)
    else:
        index, Xin = None, X
    A = Xin @ p["W"].T + p["b"]
    Y = _ACTIVATIONS[spec.activation][0](A)
    return {"a": A, "x": Y, "in": Xin, "index": index}


def _dense_backward(spec, p, cache, dY, g, n_in, need_input_grad=True):
    dA = dY * _ACTIVATIONS[spec.activation][1](cache["a"])
    g["W"] += _f64(dA).T @ _f64(cache["in"])
    g["b"] += _f64(dA).sum(axis=0)
    if not need_input_grad:
        return None
    dXin = dA @ p["W"]
    if cache["index"] is None:
        return dXin
    dX = np.zeros((dY.shape[0], n_in), dtype=dY.dtype)
    _unsplice_into(dX, dXin, cache["index"], n_in)
    return dX


def _dense_rforward(spec, p, v, cache, RX):
    Xin = cache["in"]
    RA = Xin @ v["W"].T + v["b"]
    if RX is not None:
        RXin = RX if cache["index"] is None else _splice(RX, cache["index"])
        RA = RA + RXin @ p["W"].T
    return RA, _ACTIVATIONS[spec.activation][1](cache["a"]) * RA


def _rnn_forward(spec, p, X):
    T, d = X.shape[0], spec.dim
    h, _ = _ACTIVATIONS[spec.activation]
    S = np.zeros((T, d), dtype=X.dtype)
    steps = []
    for idx, valid in _window_steps(T, spec.unfold_steps):
        Z = np.concatenate([X[idx], S], axis=1)
        A = Z @ p["W"].T + p["b"]
        steps.append({"idx": idx, "valid": valid, "z": Z, "a": A})
        S = np.where(valid[:, None], h(A), S)
    return {"a": steps[-1]["a"], "x": S, "steps": steps}


def _rnn_backward(spec, p, cache, dY, g, n_in):
    hprime = _ACTIVATIONS[spec.activation][1]
    dX = np.zeros((dY.shape[0], n_in), dtype=dY.dtype)
    dS = dY
    for st in reversed(cache["steps"]):
        valid = st["valid"][:, None]
        dA = np.where(valid, dS * hprime(st["a"]), 0.0).astype(dY.dtype)
        g["W"] += _f64(dA).T @ _f64(st["z"])
        g["b"] += _f64(dA).sum(axis=0)
        dZ = dA @ p["W"]
        np.add.at(dX, st["idx"][st["valid"]], dZ[st["valid"], :n_in])
        dS = np.where(valid, dZ[:, n_in:], dS)
    return dX


def _rnn_rforward(spec, p, v, cache, RX):
    hprime = _ACTIVATIONS[spec.activation][1]
    n_in = cache["steps"][0]["z"].shape[1] - spec.dim
    RS = np.zeros_like(cache["x"])
    RA = None
    for st in cache["steps"]:
        RXi = np.zeros((RS.shape[0], n_in), dtype=RS.dtype) if RX is None else RX[st["idx"]]
        RZ = np.concatenate([RXi, RS], axis=1)
        RA = RZ @ p["W"].T + st["z"] @ v["W"].T + v["b"]
        RS = np.where(st["valid"][:, None], hprime(st["a"]) * RA, RS)
    return RA, RS


_GATES = ("i", "f", "g", "o")


def r_hadamard(g, Rg, z, Rz):
    """Directional derivative of a gated product: R(g * z) = R(g) * z + g * R(z)."""
    return Rg * z + g * Rz


def _lstm_forward(spec, p, X):
    T, d = X.shape[0], spec.dim
    H = np.zeros((T, d), dtype=X.dtype)
    C = np.zeros((T, d), dtype=X.dtype)
    steps = []
    for idx, valid in _window_steps(T, spec.unfold_steps):
        Z = np.concatenate([X[idx], H], axis=1)
        pre = {k: Z @ p[f"W_{k}"].T + p[f"b_{k}"] for k in _GATES}
        i, f, o = _sigmoid(pre["i"]), _sigmoid(pre["f"]), _sigmoid(pre["o"])
        gc = np.tanh(pre["g"])
        c = f * C + i * gc
        tc = np.tanh(c)
        m = valid[:, None]
        steps.append({"idx": idx, "valid": valid, "z": Z, "c_prev": C,
                      "i": i, "f": f, "g": gc, "o": o, "tc": tc})
        H = np.where(m, o * tc, H)
        C = np.where(m, c, C)
    return {"a": pre, "x": H, "steps": steps}


def _lstm_backward(spec, p, cache, dY, g, n_in):
    dX = np.zeros((dY.shape[0], n_in), dtype=dY.dtype)
    dH = dY
    dC = np.zeros_like(dY)
    for st in reversed(cache["steps"]):
        valid = st["valid"][:, None]
        i, f, gc, o, tc = st["i"], st["f"], st["g"], st["o"], st["tc"]
        dc = dC + dH * o * (1.0 - tc * tc)
        dpre = {
            "i": dc * gc * i * (1.0 - i),
            "f": dc * st["c_prev"] * f * (1.0 - f),
            "g": dc * i * (1.0 - gc * gc),
            "o": dH * tc * o * (1.0 - o),
        }
        dZ = np.zeros_like(st["z"])
        z64 = _f64(st["z"])
        for k in _GATES:
            dA = np.where(valid, dpre[k], 0.0).astype(dY.dtype)
            g[f"W_{k}"] += _f64(dA).T @ z64
            g[f"b_{k}"] += _f64(dA).sum(axis=0)
            dZ += dA @ p[f"W_{k}"]
        np.add.at(dX, st["idx"][st["valid"]], dZ[st["valid"], :n_in])
        dH = np.where(valid, dZ[:, n_in:], dH)
        dC = np.where(valid, dc * f, dC)
    return dX


def _lstm_rforward(spec, p, v, cache, RX):
    d = spec.dim
    n_in = cache["steps"][0]["z"].shape[1] - d
    RH = np.zeros_like(cache["x"])
    RC = np.zeros_like(cache["x"])
    for st in cache["steps"]:
        RXi = np.zeros((RH.shape[0], n_in), dtype=RH.dtype) if RX is None else RX[st["idx"]]
        RZ = np.concatenate([RXi, RH], axis=1)
        Rpre = {k: RZ @ p[f"W_{k}"].T + st["z"] @ v[f"W_{k}"].T + v[f"b_{k}"] for k in _GATES}
        i, f, gc, o, tc = st["i"], st["f"], st["g"], st["o"], st["tc"]
        Ri = i * (1.0 - i) * Rpre["i"]
        Rf = f * (1.0 - f) * Rpre["f"]
        Rg = (1.0 - gc * gc) * Rpre["g"]
        Ro = o * (1.0 - o) * Rpre["o"]
        Rc = r_hadamard(f, Rf, st["c_prev"], RC) + r_hadamard(i, Ri, gc, Rg)
        Rh = r_hadamard(o, Ro, tc, (1.0 - tc * tc) * Rc)
        m = st["valid"][:, None]
        RH = np.where(m, Rh, RH)
        RC = np.where(m, Rc, RC)
    return Rpre, RH


_FORWARD = {LayerKind.FC: _dense_forward, LayerKind.TDNN: _dense_forward,
            LayerKind.RNN: _rnn_forward, LayerKind.LSTM: _lstm_forward}
_RFORWARD = {LayerKind.FC: _dense_rforward, LayerKind.TDNN: _dense_rforward,
             LayerKind.RNN: _rnn_rforward, LayerKind.LSTM: _lstm_rforward}


# --------------------------------------------------------------------------
# network-level operations


@dataclass
class ActivationTape:
    """Cached per-layer activations of one utterance.

    ``layers[l]["a"]`` / ``layers[l]["x"]`` are the pre- and post-activations
    of layer ``l`` (for recurrent layers, those of the last unfolded step).
    """

    inputs: np.ndarray
    layers: list[dict]
    model: ModelSpec | None = None

    @property
    def T(self) -> int:
        return self.inputs.shape[0]

    @property
    def dtype(self):
        return self.inputs.dtype

    @property
    def logits(self) -> np.ndarray:
        return self.layers[-1]["a"]


def forward(model: ModelSpec, params: np.ndarray, features: np.ndarray) -> ActivationTape:
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != model.input_dim:
        raise ModelError(f"features must be (T, {model.input_dim}), got {features.shape}")
    if features.shape[0] < 1:
        raise ModelError("utterance has no frames")
    X = inputs = features.astype(params.dtype, copy=False)
    caches = []
    with np.errstate(over="ignore", invalid="ignore"):
        for spec, p in zip(model.layers, model.unpack(params)):
            cache = _FORWARD[spec.kind](spec, p, X)
            caches.append(cache)
            X = cache["x"]
    if not np.all(np.isfinite(X)):
        raise DivergenceError("non-finite activations in forward pass")
    return ActivationTape(inputs=inputs, layers=caches, model=model)


def _check_tape(model: ModelSpec, params: np.ndarray, tape: ActivationTape) -> None:
    if np.shape(params) != (model.num_params,):
        raise ModelError(f"expected {model.num_params} parameters, got {np.shape(params)}")
    if (tape.model is not None and tape.model != model) or len(tape.layers) != len(model.layers):
        raise ModelError("tape does not belong to this model")


def backprop(model: ModelSpec, params: np.ndarray, tape: ActivationTape,
             output_grads: np.ndarray, normalize_by_share: bool = False) -> np.ndarray:
    """Sum over frames of J_t^T g_t, accumulated in float64."""
    output_grads = np.asarray(output_grads)
    if output_grads.shape != (tape.T, model.output_dim):
        raise ModelError(f"output grads must be ({tape.T}, {model.output_dim}), "
                         f"got {output_grads.shape}")
    _check_tape(model, params, tape)
    grad = np.zeros(model.num_params, dtype=np.float64)
    gviews = model.unpack(grad)
    pviews = model.unpack(params)
    dY = output_grads.astype(tape.dtype, copy=False)
    for l in range(len(model.layers) - 1, -1, -1):
        spec, p, cache, g = model.layers[l], pviews[l], tape.layers[l], gviews[l]
        n_in = model.input_dim if l == 0 else model.layers[l - 1].dim
        if spec.kind is LayerKind.RNN:
            dY = _rnn_backward(spec, p, cache, dY, g, n_in)
        elif spec.kind is LayerKind.LSTM:
            dY = _lstm_backward(spec, p, cache, dY, g, n_in)
        else:
            dY = _dense_backward(spec, p, cache, dY, g, n_in, need_input_grad=l > 0)
    if normalize_by_share:
        grad /= share_counts(model)
    return grad


def r_forward(model: ModelSpec, params: np.ndarray, tape: ActivationTape,
              v: np.ndarray) -> np.ndarray:
    """Directional derivative of the logits, R(a_out) = J v, per frame."""
    v = np.asarray(v)
    if v.shape != (model.num_params,):
        raise ModelError(f"direction must have {model.num_params} entries, got {v.shape}")
    _check_tape(model, params, tape)
    v = v.astype(tape.dtype, copy=False)
    RX = None
    RA = None
    for spec, p, vp, cache in zip(model.layers, model.unpack(params), model.unpack(v),
                                  tape.layers):
        RA, RX = _RFORWARD[spec.kind](spec, p, vp, cache, RX)
    return RA


def share_counts(model: ModelSpec) -> np.ndarray:
    """Time-replicated uses of every parameter in one output frame's graph.

    A layer's parameters are copied once per unfolded step of its own
    recurrence and once per time-shifted read by every layer above it.
    """
    counts = np.ones(model.num_params, dtype=np.int64)
    above = 1
    for spec, sl in reversed(list(zip(model.layers, model.layer_slices()))):
        own = spec.unfold_steps if spec.recurrent else 1
        counts[sl] = own * above
        above *= spec.input_replication()
    return counts


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: ModelSpec, params: np.ndarray, extra: dict | None = None):
    header = {
        "format": "nghf-checkpoint",
        "version": CHECKPOINT_VERSION,
        "precision": "f32" if params.dtype == np.float32 else "f64",
        "model": model.to_dict(),
        "extra": extra or {},
    }
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, header=blob, params=params)


def load_checkpoint(path) -> tuple[ModelSpec, np.ndarray, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(bytes(data["header"]).decode("utf-8"))
        params = data["params"].copy()
    if header.get("format") != "nghf-checkpoint":
        raise ModelError(f"{path}: not a checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {header.get('version')}")
    model = ModelSpec.from_dict(header["model"])
    want = np.float32 if header["precision"] == "f32" else np.float64
    if params.dtype != want or params.shape != (model.num_params,):
        raise ModelError(f"{path}: parameter block does not match header")
    return model, params, header.get("extra", {})
