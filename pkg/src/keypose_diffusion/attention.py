"""3D rotary relative attention, its absolute-position ablation, and FiLM.

Rotary layout: a width-``D`` feature is split into three equal blocks for
the x, y and z coordinates. Inside a block, channels ``(2k, 2k+1)`` form a
pair rotated by ``coordinate * freqs[k]``. The dot product of two encoded
vectors then depends on the positions only through their difference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ContractError, DimensionError

DEFAULT_MAX_FREQ = 200.0
DEFAULT_MIN_FREQ = 1.0


@dataclass(frozen=True)
class RotaryFrequencies:
    """Per-axis angular frequencies (radians per metre), strictly decreasing."""

    freqs: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.freqs, dtype=np.float64)
        if f.ndim != 1 or len(f) == 0 or np.any(f <= 0):
            raise ConfigError("rotary frequencies must be a non-empty vector of positive reals")
        if np.any(np.diff(f) >= 0):
            raise ConfigError("rotary frequencies must be strictly decreasing")
        object.__setattr__(self, "freqs", f)

    @classmethod
    def geometric(cls, dim: int, max_freq: float = DEFAULT_MAX_FREQ,
                  min_freq: float = DEFAULT_MIN_FREQ) -> "RotaryFrequencies":
        """Ladder for a width-``dim`` feature: ``dim // 6`` frequencies from max to min."""
        if dim % 6:
            raise ConfigError(f"rotary width must be divisible by 6, got {dim}")
        n = dim // 6
        if n == 1:
            return cls(np.array([max_freq]))
        return cls(max_freq * (min_freq / max_freq) ** (np.arange(n) / (n - 1)))

    def __len__(self) -> int:
        return len(self.freqs)


@dataclass
class PositionedTokens:
    """Token features ``(..., N, D)`` with world positions ``(..., N, 3)``."""

    features: T.Tensor
    positions: np.ndarray

    def __post_init__(self):
        self.features = T.as_tensor(self.features)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.shape[-1] != 3 or self.positions.shape[-2] != self.features.shape[-2]:
            raise DimensionError(
                f"positions {self.positions.shape} do not match features {self.features.shape}")


def rotary_angles(positions, freqs: RotaryFrequencies) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape ``(..., N, 3 * len(freqs))``."""
    positions = np.asarray(positions, dtype=np.float64)
    theta = positions[..., :, None] * freqs.freqs  # (..., N, 3, n)
    theta = theta.reshape(positions.shape[:-1] + (-1,))
    return np.cos(theta), np.sin(theta)


def _check_width(width: int, freqs: RotaryFrequencies) -> None:
    if width % 6:
        raise ConfigError(f"rotary width must be divisible by 6, got {width}")
    if width // 6 != len(freqs):
        raise ConfigError(f"width {width} needs {width // 6} frequencies per axis, got {len(freqs)}")


def rotate_pairs(x, cos, sin) -> T.Tensor:
    """Rotate consecutive channel pairs of ``x`` by the given angle tables."""
    x = T.as_tensor(x)
    shape = x.shape
    cos = np.asarray(cos, dtype=x.dtype)
    sin = np.asarray(sin, dtype=x.dtype)
    xp = x.data.reshape(shape[:-1] + (shape[-1] // 2, 2))
    a, b = xp[..., 0], xp[..., 1]
    out = np.stack([a * cos - b * sin, a * sin + b * cos], axis=-1).reshape(shape)

    def backward(g):
        gp = g.reshape(xp.shape)
        g0, g1 = gp[..., 0], gp[..., 1]
        ga = g0 * cos + g1 * sin
        gb = g1 * cos - g0 * sin
        return (_sum_to(np.stack([ga, gb], axis=-1).reshape(g.shape[:-1] + (shape[-1],)), shape),)

    return T.record("rotary", out, (x,), backward)


def _sum_to(g, shape):
    return T._unbroadcast(g, shape)


def rotary_encode(tokens: PositionedTokens, freqs: RotaryFrequencies) -> T.Tensor:
    _check_width(tokens.features.shape[-1], freqs)
    cos, sin = rotary_angles(tokens.positions, freqs)
    return rotate_pairs(tokens.features, cos, sin)


def absolute_encoding(positions, freqs: RotaryFrequencies) -> np.ndarray:
    """Sinusoidal features of absolute positions, width ``6 * len(freqs)``.

    Uses ``sin`` and ``1 - cos`` so the origin encodes to zero.
    """
    cos, sin = rotary_angles(positions, freqs)
    return np.stack([sin, 1.0 - cos], axis=-1).reshape(cos.shape[:-1] + (-1,))


# -- parameters ---------------------------------------------------------------------
def init_attention(dim: int, rng: np.random.Generator, prefix: str) -> dict:
    scale = 1.0 / np.sqrt(dim)
    params = {}
    for name in ("q", "k", "v", "o"):
        params[f"{prefix}.w{name}"] = T.Tensor(rng.normal(0, scale, (dim, dim)), requires_grad=True)
        params[f"{prefix}.b{name}"] = T.Tensor(np.zeros(dim), requires_grad=True)
    return params


def init_film(cond_dim: int, dim: int, prefix: str) -> dict:
    """FiLM maps, zero-initialised so the modulation starts as the identity."""
    return {
        f"{prefix}.wg": T.Tensor(np.zeros((cond_dim, dim)), requires_grad=True),
        f"{prefix}.bg": T.Tensor(np.zeros(dim), requires_grad=True),
        f"{prefix}.wb": T.Tensor(np.zeros((cond_dim, dim)), requires_grad=True),
        f"{prefix}.bb": T.Tensor(np.zeros(dim), requires_grad=True),
    }


# -- attention ----------------------------------------------------------------------
def _split_heads(x: T.Tensor, n_heads: int) -> T.Tensor:
    *lead, n, d = x.shape
    return x.reshape(tuple(lead) + (n, n_heads, d // n_heads)).swapaxes(-2, -3)


def _merge_heads(x: T.Tensor) -> T.Tensor:
    *lead, h, n, d = x.shape
    return x.swapaxes(-2, -3).reshape(tuple(lead) + (n, h * d))


def _attend(q_in, kv_in, params, prefix, n_heads, q_rot=None, k_rot=None, return_weights=False):
    dim = q_in.shape[-1]
    if dim % n_heads:
        raise ConfigError(f"width {dim} not divisible by {n_heads} heads")
    q = _split_heads(T.linear(q_in, params[f"{prefix}.wq"], params[f"{prefix}.bq"]), n_heads)
    k = _split_heads(T.linear(kv_in, params[f"{prefix}.wk"], params[f"{prefix}.bk"]), n_heads)
    v = _split_heads(T.linear(kv_in, params[f"{prefix}.wv"], params[f"{prefix}.bv"]), n_heads)
    if q_rot is not None:
        q = rotate_pairs(q, *q_rot)
        k = rotate_pairs(k, *k_rot)
    head = dim // n_heads
    logits = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(head))
    weights = T.softmax(logits, axis=-1)
    out = T.linear(_merge_heads(T.matmul(weights, v)), params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    return (out, weights) if return_weights else out


def _head_angles(positions, freqs):
    cos, sin = rotary_angles(positions, freqs)
    # insert the head axis so the tables broadcast over (..., heads, N, d/2)
    return cos[..., None, :, :], sin[..., None, :, :]


def relative_attention(queries: PositionedTokens, keys_values: PositionedTokens, params: dict,
                       prefix: str, n_heads: int, freqs: RotaryFrequencies, residual: bool = True,
                       return_weights: bool = False):
    """Multi-head attention whose logits see positions only through their differences.

    Queries and keys are rotary-encoded by their positions; values are not.
    With ``residual`` the query features are added to the output.
    """
    if keys_values.features.shape[-2] == 0:
        raise ContractError("relative_attention needs at least one key")
    dim = queries.features.shape[-1]
    if keys_values.features.shape[-1] != dim:
        raise DimensionError(f"query width {dim} differs from key width {keys_values.features.shape[-1]}")
    if dim % n_heads:
        raise ConfigError(f"width {dim} not divisible by {n_heads} heads")
    _check_width(dim // n_heads, freqs)
    res = _attend(queries.features, keys_values.features, params, prefix, n_heads,
                  _head_angles(queries.positions, freqs), _head_angles(keys_values.positions, freqs),
                  return_weights)
    out, weights = res if return_weights else (res, None)
    if residual:
        out = out + queries.features
    return (out, weights) if return_weights else out


def absolute_attention(queries: PositionedTokens, keys_values: PositionedTokens, params: dict,
                       prefix: str, n_heads: int, freqs: RotaryFrequencies, residual: bool = True,
                       return_weights: bool = False):
    """Ablation: add sinusoidal absolute-position features before the projections."""
    if keys_values.features.shape[-2] == 0:
        raise ContractError("absolute_attention needs at least one key")
    dim = queries.features.shape[-1]
    if keys_values.features.shape[-1] != dim:
        raise DimensionError(f"query width {dim} differs from key width {keys_values.features.shape[-1]}")
    if dim % 6 or dim // 6 != len(freqs):
        raise ConfigError(f"absolute encoding of width {dim} needs {dim // 6} frequencies, got {len(freqs)}")
    dtype = queries.features.dtype
    q_in = queries.features + absolute_encoding(queries.positions, freqs).astype(dtype)
    kv_in = keys_values.features + absolute_encoding(keys_values.positions, freqs).astype(dtype)
    res = _attend(q_in, kv_in, params, prefix, n_heads, return_weights=return_weights)
    out, weights = res if return_weights else (res, None)
    if residual:
        out = out + queries.features
    return (out, weights) if return_weights else out


def film_modulate(features, cond, params: dict, prefix: str) -> T.Tensor:
    """``features * (1 + gamma(cond)) + beta(cond)`` with one cond row per sample."""
    features = T.as_tensor(features)
    cond = T.as_tensor(cond)
    wg = params[f"{prefix}.wg"]
    if cond.shape[-1] != wg.shape[0]:
        raise DimensionError(f"conditioning width {cond.shape[-1]} != configured {wg.shape[0]}")
    gamma = T.linear(cond, wg, params[f"{prefix}.bg"])
    beta = T.linear(cond, params[f"{prefix}.wb"], params[f"{prefix}.bb"])
    if features.ndim == cond.ndim + 1:
        # one conditioning row per sample, shared by all of its tokens
        lead = gamma.shape[:-1]
        gamma = gamma.reshape(lead + (1, gamma.shape[-1]))
        beta = beta.reshape(lead + (1, beta.shape[-1]))
    return features * (gamma + 1.0) + beta
