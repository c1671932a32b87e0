"""Initialization strategies: random schemes, checkpoint warm-start and a
denoising-autoencoder pretext task that pre-trains the hidden stack.

Checkpoint layout (all little-endian)::

    b"FSCK" | u32 version (1) | u64 spec hash | u64 param count
    | f64 params[param count] | f64 running means | f64 running variances
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkit
from .data import Dataset
from .errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    SpecMismatchError,
    ValidationError,
)
from .models import ModelSpec, ModelState, backward, forward, init_params, layout, param_count
from .numkit import RngStream
from .optim import OptimizerState, optimizer_step

CHECKPOINT_MAGIC = b"FSCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")

INIT_KINDS = ("random", "checkpoint", "ssl_autoencoder")


@dataclass
class SSLConfig:
    epochs: int = 10
    lr: float = 1e-2
    noise_std: float = 0.3
    batch_size: int = 32
    scheme: str = "kaiming_normal"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.lr <= 0 or self.noise_std < 0 or self.batch_size < 2:
            raise ValidationError("ssl config needs lr > 0, noise_std >= 0, batch_size >= 2")


@dataclass
class InitStrategy:
    kind: str = "random"
    scheme: str | None = "kaiming_normal"
    path: str | None = None
    ssl: SSLConfig | None = None

    def __post_init__(self):
        if self.kind not in INIT_KINDS:
            raise ValidationError(f"unknown init kind {self.kind!r}")
        populated = {
            "random": self.scheme is not None,
            "checkpoint": self.path is not None,
            "ssl_autoencoder": self.ssl is not None,
        }
        if not populated[self.kind]:
            raise ValidationError(f"init kind {self.kind!r} is missing its settings")
        if self.kind == "checkpoint" and self.ssl is not None:
            raise ValidationError("checkpoint init takes no ssl settings")
        if self.kind == "ssl_autoencoder" and self.path is not None:
            raise ValidationError("ssl init takes no checkpoint path")
        if self.kind == "random" and (self.path is not None or self.ssl is not None):
            raise ValidationError("random init takes only a scheme")


@dataclass
class PretrainResult:
    state: ModelState
    losses: list[float] = field(default_factory=list)


def _hidden_prefix(spec: ModelSpec) -> int:
    return layout(spec)[-1].W.start


def reconstruction_mse(state: ModelState, x: np.ndarray) -> float:
    recon, _ = forward(state, x, "eval")
    return float(np.mean((recon - x) ** 2))


def ssl_pretrain(spec: ModelSpec, unlabeled: Dataset, cfg: SSLConfig, rng: RngStream) -> PretrainResult:
    """Pre-train the hidden stack as the encoder of a denoising autoencoder.

    A temporary linear decoder maps the last hidden layer back to the input;
    the objective is the mean squared error between the reconstruction of a
    noise-corrupted input and the clean input. The decoder is discarded and
    the classification head is drawn fresh. ``losses`` holds the clean
    reconstruction MSE before training and after every epoch.
    """
    if not spec.hidden_dims:
        raise ValidationError("ssl pre-training needs at least one hidden layer")
    x = unlabeled.features
    if x.shape[1] != spec.input_dim:
        raise ValidationError(f"unlabeled dim {x.shape[1]} != input_dim {spec.input_dim}")
    if spec.input_dim < 2:
        raise ValidationError("autoencoder pretext needs input_dim >= 2")

    base = init_params(spec, cfg.scheme, rng)
    head = init_params(spec, cfg.scheme, rng)
    ae_spec = ModelSpec(spec.input_dim, spec.input_dim, spec.hidden_dims, spec.activation, spec.norm_kind)
    ae = init_params(ae_spec, cfg.scheme, rng.derive("decoder"))
    k = _hidden_prefix(spec)
    ae.params[:k] = base.params[:k]

    n = len(x)
    batch = min(cfg.batch_size, n)
    opt = OptimizerState("adam", cfg.lr, ae.params.size)
    losses = [reconstruction_mse(ae, x)]
    for _ in range(cfg.epochs):
        order = numkit.permutation(rng, n)
        for start in range(0, n - batch + 1, batch):
            idx = order[start : start + batch]
            clean = x[idx]
            noisy = clean
            if cfg.noise_std > 0:
                noisy = clean + numkit.gaussian(rng, clean.size, 0.0, cfg.noise_std).reshape(clean.shape)
            recon, cache = forward(ae, noisy, "train")
            drecon = 2.0 * (recon - clean) / recon.size
            ae.params = optimizer_step(opt, ae.params, backward(ae, cache, drecon), cfg.lr)
        losses.append(reconstruction_mse(ae, x))

    params = head.params.copy()
    params[:k] = ae.params[:k]
    out = ModelState(spec, params)
    if spec.has_bn:
        out.running_mean = [m.copy() for m in ae.running_mean]
        out.running_var = [v.copy() for v in ae.running_var]
    return PretrainResult(out, losses)


# -- checkpoints -------------------------------------------------------------------


def spec_hash(spec: ModelSpec) -> int:
    text = json.dumps(spec.to_dict(), sort_keys=True).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def _stats_len(spec: ModelSpec) -> int:
    return 2 * sum(spec.hidden_dims) if spec.has_bn else 0


def save_checkpoint(state: ModelState, path) -> None:
    spec = state.spec
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, spec_hash(spec), state.params.size)
    body = state.params.astype("<f8").tobytes() + state.stats_vector().astype("<f8").tobytes()
    Path(path).write_bytes(header + body)


def load_checkpoint(path, expected_spec: ModelSpec) -> ModelState:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise CheckpointTruncatedError(f"{path}: file too short for a checkpoint header")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    _, version, h, count = _HEADER.unpack_from(buf)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")
    if h != spec_hash(expected_spec) or count != param_count(expected_spec):
        raise SpecMismatchError(f"{path}: checkpoint was written for a different model spec")
    n_stats = _stats_len(expected_spec)
    expected = _HEADER.size + 8 * (count + n_stats)
    if len(buf) < expected:
        raise CheckpointTruncatedError(f"{path}: expected {expected} bytes, found {len(buf)}")
    if len(buf) > expected:
        raise CheckpointError(f"{path}: {len(buf) - expected} unexpected trailing bytes")
    params = np.frombuffer(buf, dtype="<f8", count=count, offset=_HEADER.size).astype(np.float64)
    state = ModelState(expected_spec, params)
    if n_stats:
        stats = np.frombuffer(buf, dtype="<f8", count=n_stats, offset=_HEADER.size + 8 * count)
        state.set_stats_vector(stats.astype(np.float64))
    return state


def initialize(
    strategy: InitStrategy, spec: ModelSpec, rng: RngStream, unlabeled: Dataset | None = None
) -> ModelState:
    if strategy.kind == "random":
        return init_params(spec, strategy.scheme, rng)
    if strategy.kind == "checkpoint":
        return load_checkpoint(strategy.path, spec)
    if unlabeled is None:
        raise ValidationError("ssl_autoencoder init needs an unlabeled dataset")
    return ssl_pretrain(spec, unlabeled, strategy.ssl, rng).state
