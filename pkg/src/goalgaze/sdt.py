"""Top-k hit/false-alarm scoring with equal-variance Gaussian d' and criterion."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DomainError, InputError

# Acklam's rational approximation to the normal quantile
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def norm_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def inv_norm_cdf(p: float) -> float:
    """z such that Phi(z) = p, for p strictly inside (0, 1)."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise DomainError(f"inverse normal CDF undefined at p={p}")
    if p < _P_LOW:
        q = math.sqrt(-2 * math.log(p))
        z = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    elif p <= 1 - _P_LOW:
        q = p - 0.5
        r = q * q
        z = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)
    else:
        q = math.sqrt(-2 * math.log1p(-p))
        z = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    # one Newton step on Phi(z) - p; the upper tail is refined through 1-p for accuracy
    if p > 0.5:
        err = (1.0 - p) - 0.5 * math.erfc(z / math.sqrt(2.0))
    else:
        err = norm_cdf(z) - p
    pdf = math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    return z - err / pdf


def corrected_rate(count: int, n: int) -> tuple:
    """count/n, with 0 and 1 moved to 1/(2n) and 1 - 1/(2n)."""
    if count == 0:
        return 1.0 / (2 * n), True
    if count == n:
        return 1.0 - 1.0 / (2 * n), True
    return count / n, False


def dprime_criterion(hits: int, misses: int, fas: int, crs: int) -> tuple:
    """(d', c) from raw counts, with the half-count correction for extreme rates."""
    n_sig, n_noise = hits + misses, fas + crs
    if n_sig <= 0 or n_noise <= 0:
        raise InputError("need at least one target-present and one target-absent trial")
    h, _ = corrected_rate(hits, n_sig)
    f, _ = corrected_rate(fas, n_noise)
    zh, zf = inv_norm_cdf(h), inv_norm_cdf(f)
    return zh - zf, -(zh + zf) / 2


def dprime_from_rates(hit_rate: float, fa_rate: float) -> tuple:
    zh, zf = inv_norm_cdf(hit_rate), inv_norm_cdf(fa_rate)
    return zh - zf, -(zh + zf) / 2


@dataclass
class SdtReport:
    hits: int
    misses: int
    fas: int
    crs: int
    hit_rate: float
    fa_rate: float
    dprime: float
    criterion: float
    k: int
    correction_applied: bool

    @classmethod
    def from_counts(cls, hits: int, misses: int, fas: int, crs: int, k: int) -> "SdtReport":
        d, c = dprime_criterion(hits, misses, fas, crs)
        applied = corrected_rate(hits, hits + misses)[1] or corrected_rate(fas, fas + crs)[1]
        return cls(int(hits), int(misses), int(fas), int(crs),
                   hits / (hits + misses), fas / (fas + crs), d, c, int(k), applied)

    def as_dict(self) -> dict:
        return asdict(self)


def target_present(truth, target: int) -> bool:
    if truth is None:
        raise InputError("image has no ground truth, cannot tell whether the target is present")
    if np.ndim(truth) == 0:
        if int(truth) < 0:
            raise InputError(f"invalid ground truth {truth}")
        return int(truth) == target
    return target in [int(t) for t in np.asarray(truth).ravel()]


def score_topk(predictions, truths, target: int, k: int = None) -> SdtReport:
    """Hit, miss, false alarm and correct rejection counts for one target class.

    ``predictions`` holds each image's top-k class list; ``truths`` holds a
    label or a pair of labels per image (a blend counts as target-present
    when either component is the target).
    """
    predictions = np.asarray(predictions)
    if predictions.ndim == 1:
        predictions = predictions[:, None]
    if len(truths) != predictions.shape[0]:
        raise InputError(f"{predictions.shape[0]} predictions for {len(truths)} images")
    said = (predictions == target).any(axis=1)
    present = np.array([target_present(t, target) for t in truths], dtype=bool)
    hits = int(np.sum(present & said))
    misses = int(np.sum(present & ~said))
    fas = int(np.sum(~present & said))
    crs = int(np.sum(~present & ~said))
    return SdtReport.from_counts(hits, misses, fas, crs, predictions.shape[1] if k is None else k)
