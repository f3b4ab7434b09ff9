"""Time-series augmentations operating on a single ``(d, L)`` sample.

Every function takes an ``rng`` (a ``numpy.random.Generator`` or an integer
seed) so equal seeds give equal outputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.linalg import solve_banded

KINDS = ("Jitter", "Permutation", "MagnitudeWarp", "WindowWarp", "Resize", "Flip", "TimeMask")

DEFAULTS: dict[str, dict[str, Any]] = {
    "Jitter": {"sigma": 0.03},
    "Permutation": {"n_segments": 5},
    "MagnitudeWarp": {"sigma": 0.2, "n_knots": 4},
    "WindowWarp": {"window_ratio": 0.1, "scales": [0.5, 2.0]},
    "Resize": {"crop_ratio": 0.9},
    "Flip": {},
    "TimeMask": {"mask_ratio": 0.1},
}


class UnknownKindError(ValueError):
    pass


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _floor_frac(ratio: float, L: int) -> int:
    # guard against 0.29 * 100 == 28.999999999999996
    return int(math.floor(ratio * L + 1e-9))


def natural_cubic_spline(knots_x: np.ndarray, knots_y: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Evaluate the natural cubic spline through the knots at ``t``.

    ``knots_y`` may be 2-D ``(m, n_knots)`` to evaluate ``m`` splines sharing
    the same abscissae. Second derivatives at both ends are zero.
    """
    xk = np.asarray(knots_x, dtype=np.float64)
    yk = np.atleast_2d(np.asarray(knots_y, dtype=np.float64))
    n = xk.size
    if n < 2 or yk.shape[1] != n:
        raise ValueError("need at least two knots with matching values")
    h = np.diff(xk)
    if np.any(h <= 0):
        raise ValueError("knot positions must be strictly increasing")

    m = np.zeros_like(yk)  # second derivatives
    if n > 2:
        slope = np.diff(yk, axis=1) / h
        rhs = 6.0 * np.diff(slope, axis=1)  # (m, n-2)
        ab = np.zeros((3, n - 2))
        ab[0, 1:] = h[1:-1]
        ab[1, :] = 2.0 * (h[:-1] + h[1:])
        ab[2, :-1] = h[1:-1]
        m[:, 1:-1] = solve_banded((1, 1), ab, rhs.T).T

    t = np.asarray(t, dtype=np.float64)
    seg = np.clip(np.searchsorted(xk, t, side="right") - 1, 0, n - 2)
    x0, x1, hs = xk[seg], xk[seg + 1], h[seg]
    a = (x1 - t) / hs
    b = (t - x0) / hs
    y0, y1 = yk[:, seg], yk[:, seg + 1]
    m0, m1 = m[:, seg], m[:, seg + 1]
    out = a * y0 + b * y1 + ((a ** 3 - a) * m0 + (b ** 3 - b) * m1) * hs ** 2 / 6.0
    return out if np.ndim(knots_y) > 1 else out[0]


def resample(x: np.ndarray, length: int) -> np.ndarray:
    """Linearly resample each row of ``x`` (d, n) to ``length`` points."""
    n = x.shape[1]
    if n == length:
        return x.copy()
    if n == 1:
        return np.repeat(x, length, axis=1)
    pos = np.linspace(0.0, n - 1, length)
    src = np.arange(n)
    return np.stack([np.interp(pos, src, row) for row in x])


def jitter(x: np.ndarray, sigma: float = 0.03, rng=None) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return x.copy()
    return x + _rng(rng).normal(0.0, sigma, size=x.shape)


def permute_segments(x: np.ndarray, n_segments: int = 5, rng=None) -> np.ndarray:
    L = x.shape[1]
    if not 1 <= n_segments <= L:
        raise ValueError(f"n_segments must be in [1, {L}]")
    chunks = np.array_split(np.arange(L), n_segments)
    order = _rng(rng).permutation(n_segments)
    idx = np.concatenate([chunks[i] for i in order])
    return x[:, idx]


def magnitude_warp(x: np.ndarray, sigma: float = 0.2, n_knots: int = 4, rng=None) -> np.ndarray:
    if n_knots < 2:
        raise ValueError("n_knots must be >= 2")
    d, L = x.shape
    knots_x = np.linspace(0.0, L - 1, n_knots) if L > 1 else np.arange(n_knots, dtype=float)
    knots_y = _rng(rng).normal(1.0, sigma, size=(d, n_knots))
    if sigma == 0:
        return x.copy()
    curve = natural_cubic_spline(knots_x, knots_y, np.arange(L))
    return x * curve


def window_warp(x: np.ndarray, window_ratio: float = 0.1, scales=(0.5, 2.0), rng=None) -> np.ndarray:
    if not 0 < window_ratio < 1:
        raise ValueError("window_ratio must be in (0, 1)")
    scales = list(scales)
    if not scales or any(s <= 0 for s in scales):
        raise ValueError("scales must be non-empty and positive")
    g = _rng(rng)
    L = x.shape[1]
    w = max(1, _floor_frac(window_ratio, L))
    start = int(g.integers(0, L - w + 1))
    scale = float(scales[int(g.integers(0, len(scales)))])
    window = x[:, start:start + w]
    warped = resample(window, max(1, int(round(w * scale))))
    joined = np.concatenate([x[:, :start], warped, x[:, start + w:]], axis=1)
    return resample(joined, L)


def crop_resize(x: np.ndarray, crop_ratio: float = 0.9, rng=None) -> np.ndarray:
    if not 0 < crop_ratio <= 1:
        raise ValueError("crop_ratio must be in (0, 1]")
    L = x.shape[1]
    c = max(1, _floor_frac(crop_ratio, L))
    start = int(_rng(rng).integers(0, L - c + 1))
    return resample(x[:, start:start + c], L)


def flip(x: np.ndarray, rng=None) -> np.ndarray:
    return x[:, ::-1].copy()


def time_mask(x: np.ndarray, mask_ratio: float = 0.1, rng=None) -> np.ndarray:
    if not 0 <= mask_ratio < 1:
        raise ValueError("mask_ratio must be in [0, 1)")
    L = x.shape[1]
    m = _floor_frac(mask_ratio, L)
    out = x.copy()
    if m == 0:
        return out
    start = int(_rng(rng).integers(0, L - m + 1))
    out[:, start:start + m] = 0.0
    return out


_DISPATCH = {
    "Jitter": jitter,
    "Permutation": permute_segments,
    "MagnitudeWarp": magnitude_warp,
    "WindowWarp": window_warp,
    "Resize": crop_resize,
    "Flip": flip,
    "TimeMask": time_mask,
}


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in _DISPATCH:
            raise UnknownKindError(f"unknown augmentation kind {self.kind!r}; expected one of {KINDS}")
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        p = self.resolved()
        checks = {
            "sigma": lambda v: v >= 0,
            "n_segments": lambda v: int(v) >= 1,
            "n_knots": lambda v: int(v) >= 2,
            "window_ratio": lambda v: 0 < v < 1,
            "scales": lambda v: len(v) > 0 and all(s > 0 for s in v),
            "crop_ratio": lambda v: 0 < v <= 1,
            "mask_ratio": lambda v: 0 <= v < 1,
        }
        for k, v in p.items():
            if not checks[k](v):
                raise ValueError(f"{self.kind}: parameter {k}={v!r} out of range")

    def resolved(self) -> dict:
        return {**DEFAULTS[self.kind], **self.params}

    @classmethod
    def from_config(cls, cfg: dict | str) -> "AugmentationSpec":
        if isinstance(cfg, str):
            return cls(cfg)
        return cls(cfg.get("kind", ""), dict(cfg.get("params", {})), int(cfg.get("seed", 0)))

    def to_config(self) -> dict:
        return {"kind": self.kind, "params": self.resolved(), "seed": self.seed}


def apply(spec: AugmentationSpec, x: np.ndarray, rng=None) -> np.ndarray:
    """Apply ``spec`` to one sample; ``rng`` overrides ``spec.seed``."""
    fn = _DISPATCH.get(spec.kind)
    if fn is None:
        raise UnknownKindError(f"unknown augmentation kind {spec.kind!r}")
    return fn(np.asarray(x, dtype=np.float64), rng=spec.seed if rng is None else rng, **spec.resolved())
