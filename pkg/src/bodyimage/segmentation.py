"""Threshold predicted errors with a two-component Gaussian mixture.

Body components are the predictable ones, so their predicted error sits in
the low mode of the error distribution.  The threshold is placed where the
two weighted component densities cross.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

VARIANCE_FLOOR = 1e-10


class DegenerateDataError(ValueError):
    """Samples cannot support a two-component fit."""


@dataclass
class GmmFit:
    weights: tuple[float, float]
    means: tuple[float, float]
    variances: tuple[float, float]
    threshold: float
    log_likelihood: float  # mean per sample
    n_iter: int = 0
    history: list[float] = field(default_factory=list, repr=False)

    def to_record(self) -> str:
        """``w1 w2 mu1 mu2 var1 var2 T loglik`` on one line."""
        values = (*self.weights, *self.means, *self.variances, self.threshold, self.log_likelihood)
        return " ".join(repr(float(v)) for v in values) + "\n"

    @classmethod
    def from_record(cls, text: str) -> "GmmFit":
        fields = text.split()
        if len(fields) != 8:
            raise ValueError(f"expected 8 fields in a GMM record, got {len(fields)}")
        w1, w2, m1, m2, v1, v2, t, ll = map(float, fields)
        return cls((w1, w2), (m1, m2), (v1, v2), t, ll)


def collect_error_samples(model, motors: np.ndarray) -> np.ndarray:
    """Every predicted-error component for every motor state, flattened."""
    motors = np.asarray(motors)
    if len(motors) == 0:
        raise ValueError("need at least one motor state")
    _, errors = model.predict(motors)
    return np.asarray(errors, dtype=np.float64).ravel()


def _log_normal(x: np.ndarray, mean: float, var: float) -> np.ndarray:
    return -0.5 * (math.log(2 * math.pi * var) + (x - mean) ** 2 / var)


def fit_gmm2(samples: Sequence[float], max_iters: int = 200, tol: float = 1e-7) -> GmmFit:
    """EM on 1-D data, initialised at the 10th and 90th percentiles.

    Stops once the mean log-likelihood improves by less than ``tol``.
    Components come back sorted by mean and the threshold is filled in.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2 or np.all(x == x[0]):
        raise DegenerateDataError("need at least two distinct sample values")
    means = np.percentile(x, [10, 90])
    variances = np.full(2, max(x.var(), VARIANCE_FLOOR))
    weights = np.array([0.5, 0.5])

    def e_step():
        logp = np.stack([np.log(weights[k]) + _log_normal(x, means[k], variances[k]) for k in range(2)])
        top = logp.max(axis=0)
        log_total = top + np.log(np.exp(logp[0] - top) + np.exp(logp[1] - top))
        return np.exp(logp - log_total), float(log_total.mean())

    resp, ll = e_step()
    history = [ll]
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        mass = resp.sum(axis=1)
        weights = mass / x.size
        means = (resp @ x) / mass
        variances = np.maximum(np.array([resp[k] @ (x - means[k]) ** 2 for k in range(2)]) / mass, VARIANCE_FLOOR)
        resp, new_ll = e_step()
        history.append(new_ll)
        gain = new_ll - ll
        ll = new_ll
        if gain < tol:
            break
    order = np.argsort(means, kind="stable")
    fit = GmmFit(tuple(weights[order].tolist()), tuple(means[order].tolist()), tuple(variances[order].tolist()),
                 threshold=float("nan"), log_likelihood=ll, n_iter=n_iter, history=history)
    fit.threshold = compute_threshold(fit)
    return fit


def weighted_density(fit: GmmFit, x: float, k: int) -> float:
    return fit.weights[k] * math.exp(_log_normal(np.float64(x), fit.means[k], fit.variances[k]))


def compute_threshold(fit: GmmFit) -> float:
    """Crossing point of the two weighted densities between the means.

    Falls back to the midpoint when the curves do not cross there.
    """
    (w1, w2), (m1, m2), (v1, v2) = fit.weights, fit.means, fit.variances
    if not m1 < m2:
        raise DegenerateDataError("component means coincide; the errors are not bimodal")
    midpoint = 0.5 * (m1 + m2)
    if w1 <= 0 or w2 <= 0:
        return midpoint
    # log w1 N(x; m1, v1) = log w2 N(x; m2, v2) rearranged to a x^2 + b x + c = 0
    a = 0.5 / v2 - 0.5 / v1
    b = m1 / v1 - m2 / v2
    c = 0.5 * m2 * m2 / v2 - 0.5 * m1 * m1 / v1 + math.log(w1 / w2) + 0.5 * math.log(v2 / v1)
    if abs(a) < 1e-12 * max(abs(b), 1e-300):
        roots = [-c / b] if b != 0 else []
    else:
        disc = b * b - 4 * a * c
        if disc < 0:
            roots = []
        else:
            q = -0.5 * (b + math.copysign(math.sqrt(disc), b))
            roots = [q / a, c / q] if q != 0 else [-b / (2 * a)]
    inside = [r for r in roots if m1 <= r <= m2]
    if not inside:
        return midpoint
    return min(inside, key=lambda r: abs(r - midpoint))


def extract_mask(errors: np.ndarray, threshold: float) -> np.ndarray:
    """Body membership per component: predicted error at or below the threshold."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    return np.asarray(errors) <= threshold


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def apply_mask(prediction: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """RGBA body image: masked channels zeroed, opaque wherever any channel is body."""
    prediction = np.asarray(prediction)
    mask = np.asarray(mask, dtype=bool)
    if prediction.shape != mask.shape or prediction.shape[-1] != 3:
        raise ValueError(f"prediction {prediction.shape} and mask {mask.shape} must both be (H, W, 3)")
    rgba = np.zeros(prediction.shape[:-1] + (4,), dtype=np.uint8)
    rgba[..., :3] = np.where(mask, to_uint8(prediction), 0)
    rgba[..., 3] = np.where(mask.any(axis=-1), 255, 0)
    return rgba
