"""Numeric kernel: flat float64 vectors, counter-based random streams, samplers.

Every random draw in the package goes through :class:`RngStream`. A stream is
keyed by ``(seed, stream_id)`` and each sampler call consumes exactly one
counter value, so the bits a call produces depend only on
``(seed, stream_id, counter)``. Per-client streams are therefore independent
of the order in which clients run.
"""

from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np

from .errors import DimensionError, ValidationError

Vec64 = np.ndarray  # 1-D float64
Mat64 = np.ndarray  # 2-D float64, C order

_MASK64 = (1 << 64) - 1


class RngStream:
    """Splittable, counter-based random stream on top of Philox4x64."""

    __slots__ = ("seed", "stream_id", "counter")

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self.counter = int(counter)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    def __eq__(self, other):
        if not isinstance(other, RngStream):
            return NotImplemented
        return (self.seed, self.stream_id, self.counter) == (other.seed, other.stream_id, other.counter)

    def copy(self) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.counter)

    def derive(self, *labels) -> "RngStream":
        """Child stream whose id is a hash of this stream's id and ``labels``.

        The child starts at counter 0 and does not advance the parent.
        """
        text = "|".join([str(self.stream_id), *map(str, labels)]).encode()
        digest = hashlib.blake2b(text, digest_size=8).digest()
        return RngStream(self.seed, int.from_bytes(digest, "little"))

    def generator(self) -> np.random.Generator:
        """Generator for the next call; advances the counter by one."""
        key = self.seed | (self.stream_id << 64)
        bitgen = np.random.Philox(key=key, counter=[0, self.counter, 0, 0])
        self.counter += 1
        return np.random.Generator(bitgen)


def as_stream(rng: RngStream | int) -> RngStream:
    return rng if isinstance(rng, RngStream) else RngStream(rng)


# -- vector arithmetic -------------------------------------------------------


def vec(values) -> Vec64:
    out = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(out)):
        raise ValidationError("vector contains non-finite entries")
    return out


def weighted_sum(vectors: Sequence[Vec64], weights: Sequence[float]) -> Vec64:
    """Return sum_i weights[i] * vectors[i]; weights must sum to one."""
    if len(vectors) == 0:
        raise ValidationError("weighted_sum needs at least one vector")
    if len(vectors) != len(weights):
        raise DimensionError(f"{len(vectors)} vectors but {len(weights)} weights")
    n = len(vectors[0])
    for v in vectors:
        if len(v) != n:
            raise DimensionError(f"vector lengths differ: {len(v)} vs {n}")
    w = np.asarray(weights, dtype=np.float64)
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValidationError(f"weights sum to {w.sum()!r}, expected 1")
    out = np.zeros(n)
    for wi, v in zip(w, vectors):
        out += wi * np.asarray(v, dtype=np.float64)
    return out


def argmax(v) -> int:
    """Index of the maximum; ties go to the lowest index."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValidationError("argmax of empty vector")
    return int(np.argmax(v))  # numpy returns the first occurrence


# -- samplers ----------------------------------------------------------------


def gaussian(rng: RngStream, n: int, mean: float = 0.0, std: float = 1.0) -> Vec64:
    if std < 0:
        raise ValidationError(f"std must be >= 0, got {std}")
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    z = rng.generator().standard_normal(n)
    return mean + std * z


def uniform(rng: RngStream, n: int, low: float = 0.0, high: float = 1.0) -> Vec64:
    return rng.generator().uniform(low, high, n)


def integers(rng: RngStream, n: int, high: int) -> np.ndarray:
    """``n`` draws from ``{0, .., high-1}`` with replacement."""
    if high < 1:
        raise ValidationError("integers needs high >= 1")
    return rng.generator().integers(0, high, size=n, dtype=np.int64)


def permutation(rng: RngStream, n: int) -> np.ndarray:
    return rng.generator().permutation(n)


def _log_gamma_mt(gen: np.random.Generator, alpha: np.ndarray) -> np.ndarray:
    # Marsaglia-Tsang for alpha >= 1; alpha < 1 uses G(alpha+1) * U**(1/alpha),
    # kept in log space so very small alphas cannot underflow to zero.
    alpha = np.asarray(alpha, dtype=np.float64)
    boost = alpha < 1.0
    a = np.where(boost, alpha + 1.0, alpha).reshape(-1)
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty_like(a)
    pending = np.arange(a.size)
    while pending.size:
        x = gen.standard_normal(pending.size)
        u = gen.random(pending.size)
        dd, cc = d[pending], c[pending]
        v = (1.0 + cc * x) ** 3
        ok = v > 0
        safe_v = np.where(ok, v, 1.0)
        accept = ok & (
            (u < 1.0 - 0.0331 * x**4)
            | (np.log(np.maximum(u, 1e-300)) < 0.5 * x * x + dd * (1.0 - safe_v + np.log(safe_v)))
        )
        out[pending[accept]] = np.log(dd[accept] * safe_v[accept])
        pending = pending[~accept]
    out = out.reshape(alpha.shape)
    if np.any(boost):
        u = 1.0 - gen.random(alpha.shape)  # (0, 1]
        out = np.where(boost, out + np.log(u) / np.where(boost, alpha, 1.0), out)
    return out


def gamma(rng: RngStream, shape, size: int | None = None) -> np.ndarray:
    """Gamma(shape, 1) draws; ``shape`` may be a scalar or a vector."""
    shape = np.asarray(shape, dtype=np.float64)
    if np.any(~(shape > 0)):
        raise ValidationError("gamma shape must be > 0")
    target = shape if size is None else np.broadcast_to(shape, (size, *shape.shape))
    return np.exp(_log_gamma_mt(rng.generator(), np.array(target)))


def dirichlet(rng: RngStream, alphas, size: int | None = None) -> np.ndarray:
    """Dirichlet draw(s) by normalising independent Gamma(alpha_i, 1) variates.

    Returns a vector, or a ``(size, k)`` matrix when ``size`` is given.
    """
    alphas = np.asarray(alphas, dtype=np.float64).reshape(-1)
    if alphas.size == 0 or np.any(~(alphas > 0)):
        raise ValidationError("dirichlet alphas must all be > 0")
    target = alphas if size is None else np.broadcast_to(alphas, (size, alphas.size))
    logg = _log_gamma_mt(rng.generator(), np.array(target))
    logg -= logg.max(axis=-1, keepdims=True)
    g = np.exp(logg)
    return g / g.sum(axis=-1, keepdims=True)
