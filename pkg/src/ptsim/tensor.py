"""Deterministic dense-tensor kernels shared by every model variant.

Tensors are C-contiguous numpy arrays in the run's element width (32- or
64-bit float, a run-global setting). Every reduction in this module --
the matmul inner sum, softmax row sums, the RMS mean -- accumulates
strictly left to right, so each result is reproducible bit-for-bit by a
scalar reference implementation at the same width. That discipline is what
makes golden files and the sequential-vs-parallel equivalence checks exact
rather than tolerance-based.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, DimensionError

_ELEMENT_WIDTH = 32

# SplitMix64 constants.
_SM64_GOLDEN = 0x9E3779B97F4A7C15
_SM64_MIX1 = 0xBF58476D1CE4E5B9
_SM64_MIX2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1


def set_element_width(bits: int) -> None:
    """Set the run-global float width (32 or 64 bits)."""
    global _ELEMENT_WIDTH
    if bits not in (32, 64):
        raise ConfigError(f"element width must be 32 or 64, got {bits}")
    _ELEMENT_WIDTH = bits


def element_width() -> int:
    return _ELEMENT_WIDTH


def float_dtype() -> np.dtype:
    """Numpy dtype for the current element width."""
    return np.dtype(np.float32 if _ELEMENT_WIDTH == 32 else np.float64)


@contextmanager
def use_element_width(bits: int):
    """Temporarily switch the run-global element width."""
    previous = _ELEMENT_WIDTH
    set_element_width(bits)
    try:
        yield
    finally:
        set_element_width(previous)


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.isfinite(x).all():
        raise ValueError(f"{op} produced non-finite elements")


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute difference scaled by the reference tensor's magnitude."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cannot compare shapes {a.shape} and {b.shape}")
    scale = float(np.max(np.abs(b)))
    if scale == 0.0:
        return float(np.max(np.abs(a)))
    return float(np.max(np.abs(a - b)) / scale)


class SeededRng:
    """SplitMix64 stream; identical seeds yield bit-identical streams."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _SM64_GOLDEN) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _SM64_MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _SM64_MIX2) & _MASK64
        return z ^ (z >> 31)

    def next_unit(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0 ** -53


def _splitmix_block(seed: int, count: int) -> np.ndarray:
    """First `count` outputs of the SplitMix64 stream, vectorized."""
    idx = np.arange(1, count + 1, dtype=np.uint64)
    z = np.uint64(seed & _MASK64) + idx * np.uint64(_SM64_GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_SM64_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_SM64_MIX2)
    return z ^ (z >> np.uint64(31))


def seeded_init(shape, seed: int, scale: float) -> np.ndarray:
    """Tensor of uniforms in (-scale, +scale) drawn from SplitMix64.

    The value mapping is u = (z >> 11) * 2**-53, value = (2u - 1) * scale,
    computed in 64-bit and cast to the run width. Bit-identical across runs
    for the same (shape, seed, scale).
    """
    if scale <= 0:
        raise ConfigError(f"seeded_init scale must be positive, got {scale}")
    shape = tuple(int(s) for s in (shape if hasattr(shape, "__iter__") else (shape,)))
    if any(s <= 0 for s in shape):
        raise DimensionError(f"seeded_init shape must be positive, got {shape}")
    count = int(np.prod(shape))
    z = _splitmix_block(seed, count)
    u = (z >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    values = (2.0 * u - 1.0) * scale
    out = values.reshape(shape).astype(float_dtype())
    _check_finite(out, "seeded_init")
    # Weight tensors are shared across worker threads; freeze them.
    out.flags.writeable = False
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product with a fixed left-to-right inner sum.

    c[i, j] = sum_p a[i, p] * b[p, j], accumulated in ascending p, in the
    operands' dtype. Implemented as a cumulative scan, which is bit-equal
    to the scalar fold.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    products = a[:, :, None] * b[None, :, :]
    out = np.cumsum(products, axis=1)[:, -1, :]
    _check_finite(out, "matmul")
    return out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction; row sums accumulate left to right.

    -inf entries (causal masking) are allowed and map to exact zeros.
    """
    x = np.asarray(x)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    denom = np.cumsum(e, axis=-1)[..., -1:]
    out = e / denom
    _check_finite(out, "softmax_rows")
    return out


def rms_norm(x: np.ndarray, gamma: np.ndarray, eps: float) -> np.ndarray:
    """y = x / sqrt(mean(x^2) + eps) * gamma over the trailing dimension."""
    x = np.asarray(x)
    gamma = np.asarray(gamma)
    if eps <= 0:
        raise ConfigError(f"rms_norm eps must be positive, got {eps}")
    if gamma.ndim != 1 or x.shape[-1] != gamma.shape[0]:
        raise DimensionError(
            f"rms_norm gain length {tuple(gamma.shape)} does not match "
            f"trailing dimension of {tuple(x.shape)}"
        )
    squares = x * x
    mean_sq = np.cumsum(squares, axis=-1)[..., -1:] / x.shape[-1]
    out = (x / np.sqrt(mean_sq + x.dtype.type(eps))) * gamma
    _check_finite(out, "rms_norm")
    return out


def rope_apply(x: np.ndarray, positions, base: float) -> np.ndarray:
    """Rotate consecutive (2i, 2i+1) pairs by angle pos * base**(-2i/head_dim).

    x has shape (seq, heads, head_dim) with even head_dim; positions is one
    integer per sequence slot. Angle tables are built in 64-bit and cast to
    the input dtype before the rotation arithmetic.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"rope_apply expects (seq, heads, head_dim), got {tuple(x.shape)}")
    seq, _, head_dim = x.shape
    if head_dim % 2 != 0:
        raise ConfigError(f"rope_apply head_dim must be even, got {head_dim}")
    positions = list(positions)
    if len(positions) != seq:
        raise DimensionError(
            f"rope_apply got {len(positions)} positions for sequence length {seq}"
        )
    half = head_dim // 2
    inv_freq = float(base) ** (-2.0 * np.arange(half, dtype=np.float64) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(angles).astype(x.dtype)[:, None, :]
    sin = np.sin(angles).astype(x.dtype)[:, None, :]
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    _check_finite(out, "rope_apply")
    return out


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x), elementwise in the input dtype."""
    x = np.asarray(x)
    one = x.dtype.type(1.0)
    return x * (one / (one + np.exp(-x)))
