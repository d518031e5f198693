"""Quantitative and qualitative evaluation of the learned body image."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import Dataset, denormalize_motor, make_record
from .scene import SceneConfig
from .segmentation import extract_mask


def mask_match(estimated: np.ndarray, ground_truth: np.ndarray) -> float:
    """Intersection over union, every channel counted separately.

    Two empty masks agree perfectly and score 1.
    """
    est = np.asarray(estimated, dtype=bool)
    gt = np.asarray(ground_truth, dtype=bool)
    if est.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {est.shape} vs {gt.shape}")
    union = np.count_nonzero(est | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(est & gt) / union


def appearance_match(prediction: np.ndarray, target: np.ndarray, estimated: np.ndarray,
                     ground_truth: np.ndarray) -> float | None:
    """1 minus the mean absolute error over the components both masks call body.

    The prediction is clipped to [0, 1] first.  Returns ``None`` when the
    masks do not intersect.
    """
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    est = np.asarray(estimated, dtype=bool)
    gt = np.asarray(ground_truth, dtype=bool)
    if not (prediction.shape == target.shape == est.shape == gt.shape):
        raise ValueError("prediction, target and masks must share a shape")
    both = est & gt
    n = np.count_nonzero(both)
    if n == 0:
        return None
    return 1.0 - float(np.abs(np.clip(prediction[both], 0.0, 1.0) - target[both]).sum() / n)


# ---------------------------------------------------------------------------
# Conditional variance
# ---------------------------------------------------------------------------


def sample_variance(samples: np.ndarray, axis: int = 0) -> np.ndarray:
    """Unbiased variance, shifted by the first sample so constant data gives exactly 0."""
    x = np.asarray(samples, dtype=np.float64)
    d = x - np.take(x, [0], axis=axis)
    k = x.shape[axis]
    var = (np.sum(d * d, axis=axis) - np.sum(d, axis=axis) ** 2 / k) / (k - 1)
    return np.maximum(var, 0.0)


@dataclass
class VarianceProbeResult:
    variances: np.ndarray  # (H, W, 3)
    body_mask: np.ndarray  # (H, W, 3)

    @property
    def body(self) -> np.ndarray:
        return self.variances[self.body_mask]

    @property
    def environment(self) -> np.ndarray:
        return self.variances[~self.body_mask]

    @property
    def mean_environment(self) -> float:
        env = self.environment
        return float(env.mean()) if env.size else math.nan


def conditional_variance_probe(motor: Sequence[float], k: int, config: SceneConfig, seeds=0) -> VarianceProbeResult:
    """Per-component variance of the sensory state for one fixed motor state.

    The pose is rendered over ``k`` backgrounds, one per entry of ``seeds``
    (or per child of a single master seed), through the same pipeline that
    builds the dataset.
    """
    if k < 2:
        raise ValueError("need at least two backgrounds")
    if np.ndim(seeds) == 0 and not isinstance(seeds, (list, tuple)):
        seeds = np.random.SeedSequence(seeds).spawn(k)
    if len(seeds) != k:
        raise ValueError(f"{len(seeds)} seeds for {k} backgrounds")
    joints = denormalize_motor(motor, config.ranges)
    records = [make_record(joints, config, s) for s in seeds]
    images = np.stack([r.sensory for r in records])
    return VarianceProbeResult(sample_variance(images), records[0].gt_mask.copy())


# ---------------------------------------------------------------------------
# Histogram and sweep
# ---------------------------------------------------------------------------


def error_histogram(samples: Sequence[float], bins: int, value_range: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    """Bin edges and normalised masses; out-of-range samples land in the edge bins."""
    lo, hi = value_range
    if bins < 1 or not lo < hi:
        raise ValueError("need bins >= 1 and lo < hi")
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("no samples to histogram")
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.floor((x - lo) / (hi - lo) * bins).astype(np.int64), 0, bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    return edges, counts / x.size


def histogram_csv(edges: np.ndarray, mass: np.ndarray) -> str:
    rows = ["bin_lo,bin_hi,mass"] + [f"{lo!r},{hi!r},{m!r}" for lo, hi, m in zip(edges[:-1].tolist(), edges[1:].tolist(), mass.tolist())]
    return "\n".join(rows) + "\n"


@dataclass
class SweepGrid:
    values: np.ndarray   # (steps,) swept coordinate values
    motors: np.ndarray   # (N_m, steps, N_m)
    images: np.ndarray   # (N_m, steps, H, W, 3)
    errors: np.ndarray   # (N_m, steps, H, W, 3)
    masks: np.ndarray    # (N_m, steps, H, W, 3)


def motor_sweep(model, steps: int, threshold: float, motor_dim: int | None = None) -> SweepGrid:
    """Cross each motor dimension from -1 to 1 with the others held at 0."""
    if steps < 2:
        raise ValueError("need at least two steps")
    n_m = motor_dim if motor_dim is not None else model.motor_dim
    values = np.linspace(-1.0, 1.0, steps)
    motors = np.zeros((n_m, steps, n_m))
    for d in range(n_m):
        motors[d, :, d] = values
    images, errors = model.predict(motors.reshape(-1, n_m))
    shape = (n_m, steps) + images.shape[1:]
    images, errors = images.reshape(shape), errors.reshape(shape)
    return SweepGrid(values, motors, images, errors, extract_mask(errors, threshold))


# ---------------------------------------------------------------------------
# Whole-dataset evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    mask_match: np.ndarray        # (n,)
    appearance_match: np.ndarray  # (n,), NaN where undefined
    threshold: float

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.appearance_match)

    @property
    def n_undefined(self) -> int:
        return int(np.count_nonzero(~self.defined))

    @property
    def mask_match_mean(self) -> float:
        return float(self.mask_match.mean())

    @property
    def mask_match_std(self) -> float:
        return float(self.mask_match.std())

    @property
    def appearance_match_mean(self) -> float:
        vals = self.appearance_match[self.defined]
        return float(vals.mean()) if vals.size else math.nan

    @property
    def appearance_match_std(self) -> float:
        vals = self.appearance_match[self.defined]
        return float(vals.std()) if vals.size else math.nan

    def to_csv(self) -> str:
        rows = ["record,mask_match,appearance_match"]
        for i, (m, a) in enumerate(zip(self.mask_match.tolist(), self.appearance_match.tolist())):
            rows.append(f"{i},{m!r},{'' if math.isnan(a) else repr(a)}")
        return "\n".join(rows) + "\n"

    def summary(self) -> str:
        return (
            f"records: {len(self.mask_match)}\n"
            f"threshold: {self.threshold!r}\n"
            f"mask_match: {self.mask_match_mean:.4f} +/- {self.mask_match_std:.4f}\n"
            f"appearance_match: {self.appearance_match_mean:.4f} +/- {self.appearance_match_std:.4f}\n"
            f"empty_intersections: {self.n_undefined}\n"
        )


def evaluate_dataset(model, threshold: float, dataset: Dataset) -> EvalReport:
    """Predict every record, threshold the predicted error, score both metrics."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    images, errors = model.predict(dataset.motors)
    masks = extract_mask(errors, threshold)
    mm = np.empty(len(dataset))
    am = np.empty(len(dataset))
    for i in range(len(dataset)):
        mm[i] = mask_match(masks[i], dataset.masks[i])
        a = appearance_match(images[i], dataset.images[i], masks[i], dataset.masks[i])
        am[i] = math.nan if a is None else a
    return EvalReport(mm, am, float(threshold))
