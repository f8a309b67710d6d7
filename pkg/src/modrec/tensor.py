"""Numeric primitives and the deterministic random generator.

Tensors are plain ``numpy.ndarray`` values (C order, float32 by default,
float64 for gradient checks). The helpers here add the shape checking the
layers rely on.

Random numbers come from :class:`Rng`: a Philox-4x64 counter-based stream
(numpy's ``Philox`` bit generator, Salmon et al. 2011 constants) keyed by a
64-bit seed. Child generators are derived with the SplitMix64 finalizer so
that ``rng.split(i)`` is a pure function of ``(seed, i)``.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError, SizeError

DEFAULT_DTYPE = np.float32

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def splitmix64(x: int) -> int:
    """SplitMix64 output function applied to ``x + golden``."""
    z = (x + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """Seeded random stream. Same seed gives the same draws on every platform."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def __repr__(self):
        return f"Rng(seed={self.seed:#018x})"

    def split(self, index: int) -> "Rng":
        return rng_split(self, index)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def next_u64(self) -> int:
        return int(self._gen.integers(0, 1 << 64, dtype=np.uint64))


def rng_split(rng: Rng, index: int) -> Rng:
    """Derive an independent child stream from ``(rng.seed, index)``.

    The parent's own stream position is not consulted or advanced.
    """
    child = splitmix64(rng.seed ^ splitmix64(int(index) & _MASK64))
    return Rng(child)


def tensor_from(shape, values, dtype=DEFAULT_DTYPE) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise SizeError(f"extents must be positive, got {shape}")
    flat = np.asarray(values, dtype=dtype).ravel()
    expected = math.prod(shape)
    if flat.size != expected:
        raise SizeError(f"shape {shape} needs {expected} values, got {flat.size}")
    return flat.reshape(shape).copy()


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
    return a + b


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents disagree: {a.shape} x {b.shape}")
    return a @ b


def concat_channels(parts) -> np.ndarray:
    """Stack ``C_i x H x W`` maps (or ``N x C_i x H x W`` batches) along channels."""
    parts = list(parts)
    if not parts:
        raise ShapeError("nothing to concatenate")
    spatial = parts[0].shape[-2:]
    ndim = parts[0].ndim
    for p in parts:
        if p.ndim != ndim or p.shape[-2:] != spatial or p.shape[:-3] != parts[0].shape[:-3]:
            raise ShapeError(f"spatial extents disagree: {parts[0].shape} vs {p.shape}")
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=ndim - 3)


def flat_index(idx, shape) -> int:
    """Row-major flat offset of a multi-index."""
    strides = np.cumprod((1,) + tuple(shape[:0:-1]))[::-1]
    return int(sum(int(i) * int(s) for i, s in zip(idx, strides)))
