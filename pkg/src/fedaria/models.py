"""Desk-scale MLP zoo with pluggable normalization and hand-written backprop.

Parameter layout
----------------
All trainable scalars live in one flat float64 vector. Layers are stored in
order (hidden layers first, classification head last). Within a layer the
order is: weight matrix ``W`` (out x in, row-major), bias ``b``, then for
normalized hidden layers the gain and, for batch/layer norm, the shift.
Weight-standardized layers carry a gain only; the bias already plays the
role of a shift.

Batch-norm running statistics are not part of the parameter vector; they are
kept in ``ModelState.running_mean`` / ``running_var`` (one pair per hidden
layer) and aggregated separately by the federation engine.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import numkit
from .errors import DimensionError, ValidationError
from .numkit import RngStream

NormKind = Literal["none", "batch_norm", "layer_norm", "weight_standardized"]
NORM_KINDS = ("none", "batch_norm", "layer_norm", "weight_standardized")
ACTIVATIONS = ("relu", "tanh")
INIT_SCHEMES = ("xavier_uniform", "kaiming_normal")

BN_EPS = 1e-5
LN_EPS = 1e-5
# Relative to the row's mean square, so rescaling a row leaves it unchanged.
WS_EPS = 1e-12
BN_MOMENTUM = 0.1

# Hidden-layer widths of the named desk-scale architectures.
ARCHITECTURE_PRESETS: dict[str, tuple[int, ...]] = {
    "softmax": (),
    "mlp": (16,),
    "mlp-deep": (16, 16),
    "mlp-wide": (32,),
}


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = ()
    activation: str = "relu"
    norm_kind: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValidationError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(h < 1 for h in self.hidden_dims):
            raise ValidationError(f"hidden_dims entries must be >= 1, got {self.hidden_dims}")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.norm_kind not in NORM_KINDS:
            raise ValidationError(f"unknown norm_kind {self.norm_kind!r}")

    @property
    def has_bn(self) -> bool:
        return self.norm_kind == "batch_norm" and len(self.hidden_dims) > 0

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "hidden_dims": list(self.hidden_dims),
            "activation": self.activation,
            "norm_kind": self.norm_kind,
        }


@dataclass(frozen=True)
class LayerLayout:
    fan_in: int
    fan_out: int
    hidden: bool
    W: slice
    b: slice
    gain: slice | None
    shift: slice | None


@functools.lru_cache(maxsize=256)
def layout(spec: ModelSpec) -> tuple[LayerLayout, ...]:
    dims = [spec.input_dim, *spec.hidden_dims, spec.num_classes]
    layers = []
    pos = 0
    for i in range(len(dims) - 1):
        fin, fout = dims[i], dims[i + 1]
        hidden = i < len(dims) - 2
        W = slice(pos, pos + fin * fout)
        pos = W.stop
        b = slice(pos, pos + fout)
        pos = b.stop
        gain = shift = None
        if hidden and spec.norm_kind != "none":
            gain = slice(pos, pos + fout)
            pos = gain.stop
            if spec.norm_kind in ("batch_norm", "layer_norm"):
                shift = slice(pos, pos + fout)
                pos = shift.stop
        layers.append(LayerLayout(fin, fout, hidden, W, b, gain, shift))
    return tuple(layers)


def param_count(spec: ModelSpec) -> int:
    last = layout(spec)[-1]
    return last.b.stop


def unflatten(spec: ModelSpec, params: np.ndarray) -> list[dict[str, np.ndarray]]:
    """Split a flat vector into per-layer views (no copies)."""
    params = np.asarray(params)
    if params.shape != (param_count(spec),):
        raise DimensionError(f"expected {param_count(spec)} params, got {params.shape}")
    out = []
    for lay in layout(spec):
        d = {"W": params[lay.W].reshape(lay.fan_out, lay.fan_in), "b": params[lay.b]}
        if lay.gain is not None:
            d["gain"] = params[lay.gain]
        if lay.shift is not None:
            d["shift"] = params[lay.shift]
        out.append(d)
    return out


def flatten(spec: ModelSpec, layers: list[dict[str, np.ndarray]]) -> np.ndarray:
    out = np.empty(param_count(spec))
    for lay, d in zip(layout(spec), layers, strict=True):
        out[lay.W] = np.asarray(d["W"]).reshape(-1)
        out[lay.b] = d["b"]
        if lay.gain is not None:
            out[lay.gain] = d["gain"]
        if lay.shift is not None:
            out[lay.shift] = d["shift"]
    return out


@dataclass
class ModelState:
    spec: ModelSpec
    params: np.ndarray
    running_mean: list[np.ndarray] = field(default_factory=list)
    running_var: list[np.ndarray] = field(default_factory=list)
    momentum: float = BN_MOMENTUM

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (param_count(self.spec),):
            raise DimensionError(
                f"params length {self.params.size} != param_count {param_count(self.spec)}"
            )
        if self.spec.has_bn and not self.running_mean:
            self.running_mean = [np.zeros(h) for h in self.spec.hidden_dims]
            self.running_var = [np.ones(h) for h in self.spec.hidden_dims]

    def copy(self) -> "ModelState":
        return ModelState(
            self.spec,
            self.params.copy(),
            [m.copy() for m in self.running_mean],
            [v.copy() for v in self.running_var],
            self.momentum,
        )

    def stats_vector(self) -> np.ndarray:
        """Running means then running variances, layer by layer."""
        if not self.running_mean:
            return np.zeros(0)
        return np.concatenate([*self.running_mean, *self.running_var])

    def set_stats_vector(self, flat: np.ndarray) -> None:
        if not self.running_mean:
            return
        pos = 0
        for lst in (self.running_mean, self.running_var):
            for i, m in enumerate(lst):
                lst[i] = np.array(flat[pos : pos + m.size], dtype=np.float64)
                pos += m.size


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray


def init_params(spec: ModelSpec, scheme: str, rng: RngStream) -> ModelState:
    """Fresh model: fan-scaled random weights, zero biases, unit gains."""
    if scheme not in INIT_SCHEMES:
        raise ValidationError(f"unknown init scheme {scheme!r}")
    params = np.zeros(param_count(spec))
    for lay in layout(spec):
        n = lay.fan_in * lay.fan_out
        if scheme == "xavier_uniform":
            a = math.sqrt(6.0 / (lay.fan_in + lay.fan_out))
            params[lay.W] = numkit.uniform(rng, n, -a, a)
        else:
            params[lay.W] = numkit.gaussian(rng, n, 0.0, math.sqrt(2.0 / lay.fan_in))
        if lay.gain is not None:
            params[lay.gain] = 1.0
    return ModelState(spec, params)


def _standardize_rows(W: np.ndarray, eps: float):
    # Denominator sqrt(var + eps * mean(W^2)) is homogeneous of degree one in
    # the row; an all-zero row maps to zero.
    mu = W.mean(axis=1, keepdims=True)
    denom2 = W.var(axis=1, keepdims=True) + eps * np.mean(W * W, axis=1, keepdims=True)
    inv_std = np.divide(1.0, np.sqrt(denom2), out=np.zeros_like(denom2), where=denom2 > 0)
    return (W - mu) * inv_std, inv_std


def _ws_backward(dWhat: np.ndarray, W: np.ndarray, What: np.ndarray, inv_std: np.ndarray, eps: float):
    n = W.shape[1]
    s2 = (dWhat * What).sum(axis=1, keepdims=True)
    return _norm_backward(dWhat, What, inv_std, axis=1) - eps * inv_std**2 * W * s2 / n


def _norm_backward(dxhat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axis: int):
    # Gradient through (x - mean) / sqrt(var + eps) along `axis`.
    n = xhat.shape[axis]
    s1 = dxhat.sum(axis=axis, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=axis, keepdims=True)
    return inv_std * (dxhat - s1 / n - xhat * s2 / n)


def effective_weights(spec: ModelSpec, lay: LayerLayout, layer: dict) -> tuple[np.ndarray, dict]:
    W = layer["W"]
    if not (lay.hidden and spec.norm_kind == "weight_standardized"):
        return W, {}
    What, inv_std = _standardize_rows(W, WS_EPS)
    scale = layer["gain"][:, None] / math.sqrt(lay.fan_in)
    return scale * What, {"What": What, "ws_inv_std": inv_std}


def forward(state: ModelState, x: np.ndarray, mode: str = "eval", update_stats: bool = True):
    """Compute logits for a batch of feature rows.

    In train mode batch norm uses batch statistics and (unless
    ``update_stats`` is false) folds them into the running statistics.
    Returns ``(logits, cache)``; the cache feeds :func:`backward`.
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    spec = state.spec
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(f"features shape {x.shape} does not match input_dim {spec.input_dim}")
    B = x.shape[0]
    if mode == "train" and spec.has_bn and B < 2:
        raise ValidationError("batch norm in train mode needs batch_size >= 2")

    layers = unflatten(spec, state.params)
    a = x
    records = []
    for li, (lay, layer) in enumerate(zip(layout(spec), layers)):
        Weff, ws = effective_weights(spec, lay, layer)
        z = a @ Weff.T + layer["b"]
        rec = {"a_in": a, "Weff": Weff, **ws}
        if lay.hidden:
            kind = spec.norm_kind
            if kind == "batch_norm":
                if mode == "train":
                    mean = z.mean(axis=0)
                    var = z.var(axis=0)
                    if update_stats:
                        m = state.momentum
                        unbiased = var * B / (B - 1)
                        state.running_mean[li] = (1 - m) * state.running_mean[li] + m * mean
                        state.running_var[li] = (1 - m) * state.running_var[li] + m * unbiased
                else:
                    mean, var = state.running_mean[li], state.running_var[li]
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                zhat = (z - mean) * inv_std
                rec.update(zhat=zhat, inv_std=inv_std)
                z = layer["gain"] * zhat + layer["shift"]
            elif kind == "layer_norm":
                mean = z.mean(axis=1, keepdims=True)
                inv_std = 1.0 / np.sqrt(z.var(axis=1, keepdims=True) + LN_EPS)
                zhat = (z - mean) * inv_std
                rec.update(zhat=zhat, inv_std=inv_std)
                z = layer["gain"] * zhat + layer["shift"]
            if spec.activation == "relu":
                a = np.maximum(z, 0.0)
                rec["act_grad"] = (z > 0).astype(np.float64)
            else:
                a = np.tanh(z)
                rec["act_grad"] = 1.0 - a * a
        else:
            a = z
        records.append(rec)
    return a, {"mode": mode, "layers": records, "params": state.params}


def backward(state: ModelState, cache: dict, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of the loss w.r.t. the flat parameter vector."""
    if cache.get("mode") != "train":
        raise ValidationError("backward needs a cache from a train-mode forward")
    spec = state.spec
    lays = layout(spec)
    layers = unflatten(spec, state.params)
    grad = np.zeros(param_count(spec))
    g_layers = unflatten(spec, grad)
    recs = cache["layers"]
    dout = np.asarray(dlogits, dtype=np.float64)
    if dout.shape[1] != spec.num_classes:
        raise DimensionError("dlogits width does not match num_classes")

    for li in range(len(lays) - 1, -1, -1):
        lay, rec, layer, g = lays[li], recs[li], layers[li], g_layers[li]
        dz = dout
        if lay.hidden:
            dz = dz * rec["act_grad"]
            kind = spec.norm_kind
            if kind in ("batch_norm", "layer_norm"):
                g["gain"][:] = (dz * rec["zhat"]).sum(axis=0)
                g["shift"][:] = dz.sum(axis=0)
                axis = 0 if kind == "batch_norm" else 1
                dz = _norm_backward(dz * layer["gain"], rec["zhat"], rec["inv_std"], axis)
        dWeff = dz.T @ rec["a_in"]
        g["b"][:] = dz.sum(axis=0)
        if lay.hidden and spec.norm_kind == "weight_standardized":
            scale = 1.0 / math.sqrt(lay.fan_in)
            What = rec["What"]
            g["gain"][:] = (dWeff * What).sum(axis=1) * scale
            dWhat = dWeff * (layer["gain"][:, None] * scale)
            g["W"][:] = _ws_backward(dWhat, layer["W"], What, rec["ws_inv_std"], WS_EPS)
        else:
            g["W"][:] = dWeff
        if li > 0:
            dout = dz @ rec["Weff"]
    return grad


def predict(state: ModelState, x: np.ndarray) -> np.ndarray:
    logits, _ = forward(state, x, "eval")
    return np.argmax(logits, axis=1)


def bn_stat_mismatch(client_states: list[ModelState], global_state: ModelState) -> float:
    """Mean L2 distance between client and global BN running means.

    Averaged over every (client, BN layer) pair.
    """
    spec = global_state.spec
    if not spec.has_bn:
        raise ValidationError("bn_stat_mismatch needs a spec with batch-norm hidden layers")
    if not client_states:
        raise ValidationError("no client states given")
    total = 0.0
    count = 0
    for cs in client_states:
        if cs.spec != spec:
            raise ValidationError("client spec differs from global spec")
        for cm, gm in zip(cs.running_mean, global_state.running_mean):
            total += float(np.linalg.norm(cm - gm))
            count += 1
    return total / count
