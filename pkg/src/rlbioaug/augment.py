"""Strong (agent-selectable) and weak (anchor) augmentations for single-channel epochs.

All kernels keep the signal length and are deterministic given their seed.
They accept either an :class:`Epoch` or a 1-D array and return the same kind.
"""
from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import Seed, key, make_rng


@dataclass(frozen=True)
class Epoch:
    samples: np.ndarray
    label: int | None = None
    subject_id: int = 0

    def __len__(self) -> int:
        return len(self.samples)


class ActionKind(enum.IntEnum):
    TimeMasking = 0
    TimePermutation = 1
    CropResize = 2
    TimeFlip = 3
    TimeWarp = 4


N_ACTIONS = len(ActionKind)

# mid-strength defaults; comparable distortion across kinds
MASK_RATIO = 0.25
N_SEGMENTS = 4
CROP_FRACTION = 0.5
WARP_KNOTS = 4
WARP_MAX_SPEED = 2.0
JITTER_SIGMA = 0.01
SCALE_DELTA = 0.02


@dataclass(frozen=True)
class AugmentationAction:
    kind: ActionKind
    params: dict = field(default_factory=dict)


def _epochwise(fn):
    @functools.wraps(fn)
    def wrapper(x, *args, **kwargs):
        if isinstance(x, Epoch):
            return replace(x, samples=fn(np.asarray(x.samples, dtype=np.float64), *args, **kwargs))
        return fn(np.asarray(x, dtype=np.float64), *args, **kwargs)
    return wrapper


# ---------------------------------------------------------------------------
# deterministic cores (explicit parameters)


@_epochwise
def mask_span(x: np.ndarray, start: int, stop: int) -> np.ndarray:
    if not 0 <= start <= stop <= len(x):
        raise ValueError(f"mask span [{start}, {stop}) outside signal of length {len(x)}")
    out = x.copy()
    out[start:stop] = 0.0
    return out


@_epochwise
def permute_segments(x: np.ndarray, n_segments: int, order) -> np.ndarray:
    segments = np.array_split(x, n_segments)
    order = list(order)
    if sorted(order) != list(range(n_segments)):
        raise ValueError(f"order {order} is not a permutation of {n_segments} segments")
    return np.concatenate([segments[i] for i in order])


@_epochwise
def crop_window(x: np.ndarray, start: int, length: int) -> np.ndarray:
    """Linearly resample ``x[start:start+length]`` back to ``len(x)`` samples."""
    n = len(x)
    if not (1 <= length <= n and 0 <= start <= n - length):
        raise ValueError(f"crop window start={start} length={length} invalid for length {n}")
    if length == n:
        return x.copy()
    if n == 1:
        return x[start:start + 1].copy()
    pos = start + np.arange(n) * ((length - 1) / (n - 1))
    return np.interp(pos, np.arange(n), x)


def warp_map(n: int, speeds) -> np.ndarray:
    """Strictly increasing piecewise-linear time map of [0, n-1] onto itself.

    Output segments have equal length; segment k advances through the input
    in proportion to ``speeds[k]``.
    """
    speeds = np.asarray(speeds, dtype=np.float64)
    if np.any(speeds <= 0):
        raise ValueError("warp speeds must be positive")
    knots_out = np.linspace(0.0, n - 1, len(speeds) + 1)
    steps = np.diff(knots_out) * speeds
    knots_in = np.concatenate([[0.0], np.cumsum(steps)])
    knots_in *= (n - 1) / knots_in[-1] if knots_in[-1] > 0 else 0.0
    knots_in[-1] = n - 1
    return np.interp(np.arange(n, dtype=np.float64), knots_out, knots_in)


@_epochwise
def warp_with_speeds(x: np.ndarray, speeds) -> np.ndarray:
    n = len(x)
    if n == 1:
        return x.copy()
    return np.interp(warp_map(n, speeds), np.arange(n), x)


# ---------------------------------------------------------------------------
# strong kernels


@_epochwise
def time_masking(x: np.ndarray, mask_ratio: float = MASK_RATIO, rng_seed: Seed = 0) -> np.ndarray:
    if not 0 < mask_ratio <= 1:
        raise ValueError(f"mask_ratio must be in (0, 1], got {mask_ratio}")
    span = int(math.floor(mask_ratio * len(x)))
    start = int(make_rng(rng_seed).integers(0, len(x) - span + 1))
    return mask_span(x, start, start + span)


@_epochwise
def time_permutation(x: np.ndarray, n_segments: int = N_SEGMENTS, rng_seed: Seed = 0) -> np.ndarray:
    if not 1 <= n_segments <= len(x):
        raise ValueError(f"n_segments must be in [1, {len(x)}], got {n_segments}")
    order = make_rng(rng_seed).permutation(n_segments)
    return permute_segments(x, n_segments, order)


@_epochwise
def crop_resize(x: np.ndarray, crop_fraction: float = CROP_FRACTION, rng_seed: Seed = 0) -> np.ndarray:
    if not 0 < crop_fraction <= 1:
        raise ValueError(f"crop_fraction must be in (0, 1], got {crop_fraction}")
    length = min(len(x), int(math.ceil(crop_fraction * len(x))))
    start = int(make_rng(rng_seed).integers(0, len(x) - length + 1))
    return crop_window(x, start, length)


@_epochwise
def time_flip(x: np.ndarray) -> np.ndarray:
    return x[::-1].copy()


def _warp_speeds(n_knots: int, max_speed_ratio: float, rng_seed: Seed) -> np.ndarray:
    if n_knots < 2:
        raise ValueError(f"n_knots must be >= 2, got {n_knots}")
    if not max_speed_ratio >= 1:
        raise ValueError(f"max_speed_ratio must be >= 1, got {max_speed_ratio}")
    bound = math.log(max_speed_ratio)
    return np.exp(make_rng(rng_seed).uniform(-bound, bound, size=n_knots - 1))


@_epochwise
def time_warp(x: np.ndarray, n_knots: int = WARP_KNOTS, max_speed_ratio: float = WARP_MAX_SPEED,
              rng_seed: Seed = 0) -> np.ndarray:
    return warp_with_speeds(x, _warp_speeds(n_knots, max_speed_ratio, rng_seed))


# ---------------------------------------------------------------------------
# weak kernels


@_epochwise
def jitter(x: np.ndarray, sigma: float = JITTER_SIGMA, rng_seed: Seed = 0) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return x.copy()
    return x + make_rng(rng_seed).normal(0.0, sigma, size=x.shape)


@_epochwise
def scale(x: np.ndarray, max_delta: float = SCALE_DELTA, rng_seed: Seed = 0) -> np.ndarray:
    if max_delta < 0:
        raise ValueError(f"max_delta must be >= 0, got {max_delta}")
    if max_delta == 0:
        return x.copy()
    return x * make_rng(rng_seed).uniform(1.0 - max_delta, 1.0 + max_delta)


def weak_view(x, rng_seed: Seed = 0, sigma: float = JITTER_SIGMA, max_delta: float = SCALE_DELTA):
    """Scale, then jitter; the two draws use child streams of ``rng_seed``."""
    scaled = scale(x, max_delta, key(rng_seed, 0))
    return jitter(scaled, sigma, key(rng_seed, 1))


# ---------------------------------------------------------------------------
# action dispatch


def sample_params(kind: ActionKind, rng_seed: Seed, length: int) -> dict:
    """Concrete kernel parameters for ``kind`` drawn from ``rng_seed``."""
    kind = ActionKind(kind)
    rng = make_rng(rng_seed)
    if kind is ActionKind.TimeMasking:
        span = int(math.floor(MASK_RATIO * length))
        start = int(rng.integers(0, length - span + 1))
        return {"start": start, "stop": start + span}
    if kind is ActionKind.TimePermutation:
        n = min(N_SEGMENTS, length)
        return {"n_segments": n, "order": [int(i) for i in rng.permutation(n)]}
    if kind is ActionKind.CropResize:
        crop = min(length, int(math.ceil(CROP_FRACTION * length)))
        return {"start": int(rng.integers(0, length - crop + 1)), "length": crop}
    if kind is ActionKind.TimeFlip:
        return {}
    bound = math.log(WARP_MAX_SPEED)
    return {"speeds": [float(s) for s in np.exp(rng.uniform(-bound, bound, size=WARP_KNOTS - 1))]}


def apply_action(x, a: AugmentationAction | ActionKind | int, rng_seed: Seed = 0):
    if not isinstance(a, AugmentationAction):
        try:
            a = AugmentationAction(ActionKind(int(a)))
        except ValueError:
            raise ValueError(f"unknown augmentation kind {a!r}") from None
    kind = ActionKind(a.kind)
    length = len(x.samples) if isinstance(x, Epoch) else len(x)
    p = a.params or sample_params(kind, rng_seed, length)
    if kind is ActionKind.TimeMasking:
        return mask_span(x, p["start"], p["stop"])
    if kind is ActionKind.TimePermutation:
        return permute_segments(x, p["n_segments"], p["order"])
    if kind is ActionKind.CropResize:
        return crop_window(x, p["start"], p["length"])
    if kind is ActionKind.TimeFlip:
        return time_flip(x)
    return warp_with_speeds(x, p["speeds"])
