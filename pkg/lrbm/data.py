"""
Turns raw landmark/joint sequences into fixed-length normalized samples,
and implements the corruptions used by the robustness experiments.

Skeleton frames are laid out joint-major: rows 3k, 3k+1, 3k+2 hold the
x, y, z coordinates of joint k (any fixed number of coordinates per joint
works, as long as it divides d).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy.ndimage import convolve1d

from . import config
from .core import SequenceSample
from .errors import ConfigError, ContractError, DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RawSequence:
    """A d x n_raw recording before resampling; NaN entries are covered by ``missing``."""

    frames: np.ndarray
    label: Optional[str] = None
    id: Optional[str] = None
    topology: Optional[tuple] = None
    missing: Optional[np.ndarray] = None

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise DataError(f"sequence {self.id!r}: frames must be a non-empty d x n_raw matrix")
        missing = np.zeros(frames.shape, dtype=bool) if self.missing is None else np.array(self.missing, dtype=bool)
        if missing.shape != frames.shape:
            raise DataError(f"sequence {self.id!r}: missing mask shape {missing.shape} != {frames.shape}")
        if not np.all(np.isfinite(frames[~missing])):
            raise DataError(f"sequence {self.id!r} contains non-finite entries outside the missing mask")
        frames[missing] = np.nan
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "missing", missing)
        if self.topology is not None:
            object.__setattr__(self, "topology", tuple(int(p) for p in self.topology))

    @property
    def d(self) -> int:
        return self.frames.shape[0]

    @property
    def n_raw(self) -> int:
        return self.frames.shape[1]

    @property
    def has_missing(self) -> bool:
        return bool(self.missing.any())


@dataclass(frozen=True)
class PreprocessConfig:
    """How raw sequences become model input."""

    target_length: Optional[int] = None
    smoothing_window: int = config.DEFAULT_SMOOTH_WINDOW
    normalize: bool = True
    feature_subset: Optional[tuple] = None

    def __post_init__(self):
        if self.target_length is not None and self.target_length < 2:
            raise ConfigError(f"target_length must be >= 2, got {self.target_length}")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ConfigError(f"smoothing_window must be odd and >= 1, got {self.smoothing_window}")
        if self.feature_subset is not None:
            object.__setattr__(self, "feature_subset", tuple(int(i) for i in self.feature_subset))

    def to_dict(self) -> dict:
        return {
            "target_length": self.target_length,
            "smoothing_window": self.smoothing_window,
            "normalize": self.normalize,
            "feature_subset": list(self.feature_subset) if self.feature_subset is not None else None,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "PreprocessConfig":
        return cls(
            target_length=payload.get("target_length"),
            smoothing_window=payload.get("smoothing_window", config.DEFAULT_SMOOTH_WINDOW),
            normalize=payload.get("normalize", True),
            feature_subset=payload.get("feature_subset"),
        )


@dataclass(frozen=True, eq=False)
class NormStats:
    """Per-dimension training mean and (floored) standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "NormStats":
        return cls(mean=np.array(payload["mean"], dtype=np.float64), std=np.array(payload["std"], dtype=np.float64))


@dataclass(frozen=True, eq=False)
class MaskedSample:
    """A sample whose entries under ``mask`` are unknown."""

    sample: SequenceSample
    mask: np.ndarray


Sequenceish = Union[SequenceSample, RawSequence]


# --- resampling and filtering ---

def interpolate(raw: Sequenceish, n_t: int) -> SequenceSample:
    """Linearly resamples every dimension at n_t uniform positions over [0, n_raw - 1]."""
    frames = raw.frames
    n_raw = frames.shape[1]
    if n_raw < 2:
        raise DataError(f"sequence {raw.id!r} has {n_raw} frame(s); interpolation needs at least 2")
    if n_t < 1:
        raise ConfigError(f"target length must be >= 1, got {n_t}")
    if not np.all(np.isfinite(frames)):
        raise DataError(f"sequence {raw.id!r} still has missing entries; impute before interpolating")
    positions = np.linspace(0.0, n_raw - 1, n_t)
    grid = np.arange(n_raw, dtype=np.float64)
    resampled = np.stack([np.interp(positions, grid, row) for row in frames])
    return SequenceSample(resampled, label=raw.label, id=raw.id)


def smooth(sample: Sequenceish, window: int) -> Sequenceish:
    """Centered moving average per dimension.

    Near the edges the average runs over the frames the window still covers,
    e.g. [0, 3, 0] with window 3 becomes [1.5, 1.0, 1.5].
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"smoothing window must be odd and >= 1, got {window}")
    if window == 1:
        return sample
    frames = sample.frames
    kernel = np.ones(window)
    totals = convolve1d(frames, kernel, axis=1, mode="constant", cval=0.0)
    counts = convolve1d(np.ones(frames.shape[1]), kernel, mode="constant", cval=0.0)
    return replace(sample, frames=totals / counts[None, :])


def select_features(sample: SequenceSample, indices: Sequence[int]) -> SequenceSample:
    idx = np.asarray(indices, dtype=int)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= sample.d:
        raise ConfigError(f"feature subset {list(indices)} is out of range for d={sample.d}")
    return replace(sample, frames=sample.frames[idx])


# --- normalization ---

def normalize_fit(samples: Sequence[SequenceSample]) -> NormStats:
    """Per-dimension z-score statistics over every frame of every training sample."""
    if not samples:
        raise ContractError("normalize_fit needs at least one sample")
    pooled = np.concatenate([s.frames for s in samples], axis=1)
    mean = pooled.mean(axis=1)
    std = np.maximum(pooled.std(axis=1), config.NORM_STD_FLOOR)
    return NormStats(mean=mean, std=std)


def normalize_apply(sample: SequenceSample, stats: NormStats) -> SequenceSample:
    if stats.mean.shape != (sample.d,):
        raise ContractError(f"normalization stats cover {stats.mean.shape[0]} dimensions, sample has {sample.d}")
    return replace(sample, frames=(sample.frames - stats.mean[:, None]) / stats.std[:, None])


# --- skeleton bone lengths ---

def _traversal_order(topology: Sequence[int]) -> list[int]:
    """Joints in root-to-leaf order; raises DataError unless parents form one tree."""
    parents = list(topology)
    n = len(parents)
    roots = [k for k, p in enumerate(parents) if p == -1]
    if len(roots) != 1:
        raise DataError(f"skeleton topology must have exactly one root, found {len(roots)}")
    children = [[] for _ in range(n)]
    for k, p in enumerate(parents):
        if p == -1:
            continue
        if not 0 <= p < n or p == k:
            raise DataError(f"joint {k} has invalid parent {p}")
        children[p].append(k)
    order, frontier = [], [roots[0]]
    while frontier:
        joint = frontier.pop(0)
        order.append(joint)
        frontier.extend(children[joint])
    if len(order) != n:
        raise DataError("skeleton topology contains a cycle or unreachable joints")
    return order


def _joint_view(frames: np.ndarray, n_joints: int) -> np.ndarray:
    d, n_frames = frames.shape
    if d % n_joints != 0:
        raise DataError(f"d={d} is not a multiple of the {n_joints} skeleton joints")
    return frames.reshape(n_joints, d // n_joints, n_frames)


def average_bone_lengths(raws: Sequence[RawSequence], topology: Sequence[int]) -> np.ndarray:
    """Mean length of every bone over the frames where both its joints are known.

    Index = child joint; the root entry is 0.
    """
    order = _traversal_order(topology)
    totals = np.zeros(len(topology))
    counts = np.zeros(len(topology), dtype=int)
    for raw in raws:
        joints = _joint_view(raw.frames, len(topology))
        for k in order[1:]:
            lengths = np.linalg.norm(joints[k] - joints[topology[k]], axis=0)
            known = np.isfinite(lengths)
            totals[k] += lengths[known].sum()
            counts[k] += int(known.sum())
    missing = [k for k in order[1:] if counts[k] == 0]
    if missing:
        raise DataError(f"no frame has both joints of the bone(s) ending at {missing}")
    return np.divide(totals, counts, out=np.zeros_like(totals), where=counts > 0)


def skeleton_renormalize(raw: RawSequence, topology: Sequence[int], target_bone_lengths) -> RawSequence:
    """Rescales every bone to its target length, keeping directions and the root position."""
    order = _traversal_order(topology)
    targets = np.asarray(target_bone_lengths, dtype=np.float64)
    if targets.shape != (len(topology),):
        raise DataError(f"expected {len(topology)} target lengths (root entry ignored), got {targets.shape}")
    if np.any(targets[order[1:]] <= 0.0):
        raise DataError("target bone lengths must be positive")

    joints = _joint_view(raw.frames, len(topology))
    result = joints.copy()
    n_frames = joints.shape[2]
    for k in order[1:]:
        bones = joints[k] - joints[topology[k]]
        lengths = np.linalg.norm(bones, axis=0)
        valid = lengths > config.BONE_EPS
        if not valid.any():
            raise DataError(f"sequence {raw.id!r}: bone ending at joint {k} has zero length in every frame")
        directions = np.zeros_like(bones)
        directions[:, valid] = bones[:, valid] / lengths[valid]
        if not valid.all():
            logger.warning(
                f"sequence {raw.id!r}: bone ending at joint {k} has zero length in "
                f"{int((~valid).sum())} frame(s); reusing the previous frame's direction"
            )
            first = int(np.argmax(valid))
            for t in range(n_frames):
                if not valid[t]:
                    directions[:, t] = directions[:, t - 1] if t > first else directions[:, first]
        result[k] = result[topology[k]] + targets[k] * directions
    return replace(raw, frames=result.reshape(raw.frames.shape))


# --- corruption and imputation ---

def _corruption_count(fraction: float, size: int) -> int:
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"corruption fraction must lie in [0, 1], got {fraction}")
    return int(np.floor(fraction * size + 1e-9))


def inject_noise(sample: SequenceSample, fraction: float, rng: np.random.Generator) -> SequenceSample:
    """Multiplies a random subset of entries by independent draws of 1 + N(0, 1)."""
    count = _corruption_count(fraction, sample.frames.size)
    flat = sample.frames.ravel().copy()
    chosen = rng.choice(flat.size, size=count, replace=False)
    flat[chosen] *= 1.0 + rng.standard_normal(count)
    return replace(sample, frames=flat.reshape(sample.frames.shape))


def inject_missing(sample: SequenceSample, fraction: float, rng: np.random.Generator) -> MaskedSample:
    """Marks a uniformly random subset of entries as missing."""
    count = _corruption_count(fraction, sample.frames.size)
    mask = np.zeros(sample.frames.size, dtype=bool)
    mask[rng.choice(mask.size, size=count, replace=False)] = True
    return MaskedSample(sample=sample, mask=mask.reshape(sample.frames.shape))


def _impute_frames(frames: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fills masked entries from temporal neighbours of the same dimension.

    Entries with an available neighbour at t-1 or t+1 take the mean of the
    available ones; otherwise the nearest available frame (both averaged on a
    tie); a dimension with nothing available becomes 0.
    """
    values = np.where(mask, 0.0, frames)
    available = ~mask
    n_frames = frames.shape[1]
    result = values.copy()

    left_ok = np.zeros_like(available)
    right_ok = np.zeros_like(available)
    left_ok[:, 1:] = available[:, :-1]
    right_ok[:, :-1] = available[:, 1:]
    left_val = np.zeros_like(values)
    right_val = np.zeros_like(values)
    left_val[:, 1:] = values[:, :-1]
    right_val[:, :-1] = values[:, 1:]
    counts = left_ok.astype(int) + right_ok.astype(int)
    direct = mask & (counts > 0)
    totals = np.where(left_ok, left_val, 0.0) + np.where(right_ok, right_val, 0.0)
    result[direct] = totals[direct] / counts[direct]

    times = np.arange(n_frames)
    for s, t in zip(*np.nonzero(mask & (counts == 0))):
        candidates = times[available[s]]
        if candidates.size == 0:
            result[s, t] = 0.0
            continue
        distance = np.abs(candidates - t)
        nearest = candidates[distance == distance.min()]
        result[s, t] = values[s, nearest].mean()
    return result


def impute_missing(masked: MaskedSample) -> SequenceSample:
    sample = masked.sample
    mask = np.asarray(masked.mask, dtype=bool)
    if mask.shape != sample.frames.shape:
        raise ContractError(f"mask shape {mask.shape} does not match sample {sample.frames.shape}")
    return replace(sample, frames=_impute_frames(sample.frames, mask))


def impute_raw(raw: RawSequence) -> RawSequence:
    """Imputes explicit missing markers of a raw recording."""
    if not raw.has_missing:
        return raw
    frames = _impute_frames(raw.frames, raw.missing)
    return replace(raw, frames=frames, missing=np.zeros_like(raw.missing))


# --- full pipeline ---

def preprocess(
    raw: RawSequence,
    pre: PreprocessConfig,
    norm_stats: Optional[NormStats] = None,
    bone_lengths: Optional[np.ndarray] = None,
) -> SequenceSample:
    """skeleton -> impute -> smooth -> interpolate -> feature subset -> normalize."""
    if bone_lengths is not None:
        if raw.topology is None:
            raise DataError(f"sequence {raw.id!r} has no skeleton topology")
        raw = skeleton_renormalize(impute_raw(raw), raw.topology, bone_lengths)
    raw = smooth(impute_raw(raw), pre.smoothing_window)
    if pre.target_length is not None:
        sample = interpolate(raw, pre.target_length)
    else:
        sample = SequenceSample(raw.frames, label=raw.label, id=raw.id)
    if pre.feature_subset is not None:
        sample = select_features(sample, pre.feature_subset)
    if norm_stats is not None:
        sample = normalize_apply(sample, norm_stats)
    return sample
