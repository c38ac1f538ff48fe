"""Relative-position machinery: rotary phase on queries/keys and decay masks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, rotate_pairs

DIRECTIONS = ("forward", "backward", "bidirectional")


def default_gammas(n_heads: int) -> tuple[float, ...]:
    """Per-head decay rates ``1 - 2**(-5 - h)``."""
    return tuple(1.0 - 2.0 ** (-5 - h) for h in range(n_heads))


@dataclass(frozen=True)
class RotarySpec:
    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ValueError(f"rotary head_dim must be a positive even integer, got {self.head_dim}")
        if self.base <= 1.0:
            raise ValueError("rotary base must exceed 1 so angles decrease")

    @property
    def angles(self) -> np.ndarray:
        i = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * i / self.head_dim)


@dataclass(frozen=True)
class DecaySpec:
    gammas: tuple[float, ...]
    direction: str = "forward"

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        for g in self.gammas:
            if not 0.0 < g < 1.0:
                raise ValueError(f"decay gamma must lie in (0, 1), got {g}")


@dataclass(frozen=True)
class PositionIndex:
    """Non-decreasing timestamps, token indices for regular series."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "values", check_positions(self.values))

    @classmethod
    def regular(cls, n: int, start: float = 0.0) -> PositionIndex:
        return cls(np.arange(n, dtype=np.float64) + start)

    def __len__(self) -> int:
        return self.values.shape[-1]


def check_positions(positions) -> np.ndarray:
    if isinstance(positions, PositionIndex):
        return positions.values
    p = np.asarray(positions, dtype=np.float64)
    if p.ndim not in (1, 2):
        raise ValueError(f"positions must be 1-D or (batch, N), got shape {p.shape}")
    if p.shape[-1] > 1 and (np.diff(p, axis=-1) < 0).any():
        raise ValueError("positions must be non-decreasing")
    return p


def apply_rotation(x: Tensor, positions, rotary: RotarySpec, sign: int = 1) -> Tensor:
    """Rotate dimension pairs of ``x`` (..., N, head_dim) by ``sign * theta_i * p_n``.

    ``positions`` is (N,) or (B, N); a (B, N) index broadcasts over any head
    axis sitting between batch and sequence.
    """
    if x.shape[-1] != rotary.head_dim:
        raise ValueError(f"head_dim mismatch: tensor has {x.shape[-1]}, rotary expects {rotary.head_dim}")
    p = check_positions(positions)
    phase = sign * p[..., None] * rotary.angles
    if p.ndim == 2 and x.ndim > 3:
        phase = phase.reshape(p.shape[:1] + (1,) * (x.ndim - 3) + phase.shape[1:])
    return rotate_pairs(x, np.cos(phase), np.sin(phase))


def build_decay_matrix(positions, gamma: float, direction: str = "forward") -> np.ndarray:
    """Decay mask ``D`` with entries ``gamma ** |p_n - p_m|`` on the allowed triangle.

    forward keeps n >= m, backward keeps n <= m, bidirectional keeps all.
    Batched positions (B, N) give (B, N, N).
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"decay gamma must lie in (0, 1), got {gamma}")
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    p = check_positions(positions)
    n = p.shape[-1]
    gap = p[..., :, None] - p[..., None, :]
    rows, cols = np.indices((n, n))
    if direction == "forward":
        keep = rows >= cols
    elif direction == "backward":
        keep = rows <= cols
        gap = -gap
    else:
        keep = np.ones((n, n), dtype=bool)
        gap = np.abs(gap)
    return np.where(keep, gamma_power(gamma, np.where(keep, gap, 0.0)), 0.0)


def gamma_power(gamma: float, gaps) -> np.ndarray:
    """``gamma ** gaps`` with each distinct gap sent once through the C library ``pow``.

    numpy's vectorised power may land an ulp away from ``pow``; going through
    the distinct gaps keeps every entry identical to evaluating ``gamma ** gap``
    directly. Whole-number gaps (regular steps, months) use a lookup table.
    """
    gaps = np.asarray(gaps, dtype=np.float64)
    if gaps.size == 0:
        return np.ones_like(gaps)
    flat = gaps.ravel()
    whole = np.rint(flat)
    if np.array_equal(whole, flat) and whole.min() >= 0 and whole.max() <= 1 << 20:
        table = np.array([math.pow(gamma, k) for k in range(int(whole.max()) + 1)])
        return table[whole.astype(np.intp)].reshape(gaps.shape)
    uniq, inv = np.unique(flat, return_inverse=True)
    return np.array([math.pow(gamma, u) for u in uniq])[inv].reshape(gaps.shape)


def decay_powers(gammas, gaps) -> np.ndarray:
    """``gammas[h] ** gaps`` laid out as (batch, head, *gap_tail)."""
    gaps = np.asarray(gaps, dtype=np.float64)
    return np.stack([gamma_power(float(g), gaps) for g in gammas], axis=1)
