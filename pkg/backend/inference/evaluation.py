"""
Posterior comparison metrics

KDEs of latent samples, Monte-Carlo KL divergence between them, latent and
decoded posterior statistics, and field-accuracy metrics against the ground
truth excitability field.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy.special import logsumexp
from scipy.stats import ttest_rel

from backend.errors import (
    BandwidthFloorWarning,
    DimensionMismatchError,
    TooManyExclusionsError,
    UndefinedCorrelationError,
)
from backend.inference.vae import VaeModel, decode_mean
from backend.simulation.forward_model import GridGeometry, resample_field

logger = logging.getLogger(__name__)

BANDWIDTH_FLOOR = 1e-6
DICE_THRESHOLD = 0.275
MAX_EXCLUSION_FRACTION = 0.05
MODE_GRID = 101


@dataclass(frozen=True)
class KdeModel:
    samples: np.ndarray
    bandwidth: np.ndarray
    floored: bool = False

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def _silverman(samples: np.ndarray) -> np.ndarray:
    n, d = samples.shape
    factor = (4.0 / (d + 2.0)) ** (1.0 / (d + 4.0)) * n ** (-1.0 / (d + 4.0))
    return factor * np.std(samples, axis=0, ddof=1)


def _scott(samples: np.ndarray) -> np.ndarray:
    n, d = samples.shape
    return n ** (-1.0 / (d + 4.0)) * np.std(samples, axis=0, ddof=1)


BANDWIDTH_RULES: Dict[str, Callable[[np.ndarray], np.ndarray]] = {"silverman": _silverman, "scott": _scott}


def kde_fit(samples: np.ndarray, bandwidth_rule: str = "silverman") -> KdeModel:
    """
    Product-Gaussian KDE with a per-dimension bandwidth.

    Args:
        samples: (n, d) array, n >= 10
        bandwidth_rule: "silverman" or "scott"

    Returns:
        KdeModel; bandwidths below 1e-6 are floored and ``floored`` is set
    """
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 10:
        raise ValueError("KDE needs at least 10 samples")
    if bandwidth_rule not in BANDWIDTH_RULES:
        raise ValueError(f"Unknown bandwidth rule '{bandwidth_rule}'")
    bw = BANDWIDTH_RULES[bandwidth_rule](X)
    floored = bool(np.any(~(bw >= BANDWIDTH_FLOOR)))
    if floored:
        message = f"[Evaluate] KDE bandwidth floored at {BANDWIDTH_FLOOR} (samples have no spread)"
        logger.warning(message)
        warnings.warn(message, BandwidthFloorWarning)
        bw = np.where(bw >= BANDWIDTH_FLOOR, bw, BANDWIDTH_FLOOR)
    return KdeModel(X, bw, floored)


def kde_logpdf(kde: KdeModel, points: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Log density of the KDE at each row of ``points``"""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if P.shape[1] != kde.dim:
        raise DimensionMismatchError(f"Points have {P.shape[1]} dims, KDE has {kde.dim}")
    n = kde.samples.shape[0]
    log_norm = np.log(n) + np.sum(np.log(kde.bandwidth)) + 0.5 * kde.dim * np.log(2.0 * np.pi)
    scaled_samples = kde.samples / kde.bandwidth
    out = np.empty(P.shape[0])
    for start in range(0, P.shape[0], chunk):
        block = P[start:start + chunk] / kde.bandwidth
        sq = ((block[:, None, :] - scaled_samples[None, :, :]) ** 2).sum(axis=2)
        out[start:start + chunk] = logsumexp(-0.5 * sq, axis=1) - log_norm
    return out


@dataclass(frozen=True)
class KlEstimate:
    value: float
    std_error: float
    n_used: int
    exclusion_fraction: float

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "std_error": self.std_error,
            "n_used": self.n_used,
            "exclusion_fraction": self.exclusion_fraction,
        }


def kl_divergence_mc(
    p_samples: np.ndarray,
    log_p: Callable[[np.ndarray], np.ndarray],
    log_q: Callable[[np.ndarray], np.ndarray],
    max_exclusion: float = MAX_EXCLUSION_FRACTION,
) -> KlEstimate:
    """
    KL(p || q) as the sample mean of log p - log q over draws from p.

    Both log densities must be normalized and accept a batch of points.
    Samples where either is non-finite are excluded; more than
    ``max_exclusion`` of them is an error.
    """
    X = np.atleast_2d(np.asarray(p_samples, dtype=float))
    if X.shape[0] < 100:
        raise ValueError("Monte-Carlo KL needs at least 100 samples")
    diff = np.asarray(log_p(X), dtype=float) - np.asarray(log_q(X), dtype=float)
    finite = np.isfinite(diff)
    excluded = 1.0 - float(np.mean(finite))
    if excluded > max_exclusion:
        raise TooManyExclusionsError(f"{excluded:.1%} of samples had non-finite log densities")
    if excluded > 0:
        logger.warning(f"[Evaluate] KL estimate excluded {excluded:.2%} of samples")
    used = diff[finite]
    std_error = float(np.std(used, ddof=1) / np.sqrt(used.size)) if used.size > 1 else float("nan")
    return KlEstimate(float(np.mean(used)), std_error, int(used.size), excluded)


@dataclass(frozen=True)
class ZStats:
    mean: np.ndarray
    mode: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "mode": self.mode.tolist(), "std": self.std.tolist()}


def kde_mode(kde: KdeModel, resolution: int = MODE_GRID) -> np.ndarray:
    """Argmax of the KDE over a grid spanning the sample bounding box"""
    lo, hi = kde.samples.min(axis=0), kde.samples.max(axis=0)
    if kde.dim > 3:
        # tensor grid too large; fall back to the best sample
        return kde.samples[int(np.argmax(kde_logpdf(kde, kde.samples)))].copy()
    axes = [np.linspace(a, b, resolution) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    grid = np.column_stack([m.ravel() for m in mesh])
    return grid[int(np.argmax(kde_logpdf(kde, grid)))]


def z_stats(samples: np.ndarray, kde: Optional[KdeModel] = None) -> ZStats:
    """Componentwise mean and std (ddof=0) and the KDE mode of latent samples"""
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if X.shape[0] < 10:
        raise ValueError("z_stats needs at least 10 samples")
    kde = kde if kde is not None else kde_fit(X)
    return ZStats(X.mean(axis=0), kde_mode(kde), X.std(axis=0))


@dataclass(frozen=True)
class FieldStats:
    mean_field: np.ndarray
    mode_field: np.ndarray
    std_field: np.ndarray

    def to_dict(self) -> dict:
        return {
            "mean_field": self.mean_field.tolist(),
            "mode_field": self.mode_field.tolist(),
            "std_field": self.std_field.tolist(),
        }


def decode_field_stats(
    vae: VaeModel,
    samples: np.ndarray,
    z_mode: Optional[np.ndarray] = None,
    source: Optional[GridGeometry] = None,
    target: Optional[GridGeometry] = None,
) -> FieldStats:
    """
    Posterior statistics in field space.

    Mean and std are taken over the decoded samples; the mode field is the
    decoded latent mode. With ``source`` and ``target`` lattices given, the
    decoded fields are resampled from the VAE lattice onto the target one.

    Args:
        vae: Trained model
        samples: Latent samples (n, d_z)
        z_mode: Latent mode; computed from a KDE of the samples when omitted
        source: Lattice the VAE decodes onto
        target: Lattice the statistics are reported on

    Returns:
        FieldStats
    """
    Z = np.atleast_2d(np.asarray(samples, dtype=float))
    z_mode = z_stats(Z).mode if z_mode is None else np.asarray(z_mode, dtype=float)
    fields = decode_mean(vae, Z)
    mode_field = decode_mean(vae, z_mode)
    if source is not None and target is not None:
        fields = resample_field(fields, source, target)
        mode_field = resample_field(mode_field, source, target)
    return FieldStats(fields.mean(axis=0), mode_field, fields.std(axis=0))


def _pair(est: np.ndarray, truth: np.ndarray):
    a = np.asarray(est, dtype=float).ravel()
    b = np.asarray(truth, dtype=float).ravel()
    if a.shape != b.shape:
        raise DimensionMismatchError(f"Fields differ in length: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def dice(est: np.ndarray, truth: np.ndarray, threshold: float = DICE_THRESHOLD) -> float:
    """Dice overlap of the abnormal regions (theta > threshold); 1.0 when both are empty"""
    a, b = _pair(est, truth)
    A, B = a > threshold, b > threshold
    denom = int(A.sum() + B.sum())
    if denom == 0:
        return 1.0
    return 2.0 * float(np.sum(A & B)) / denom


def rmse(est: np.ndarray, truth: np.ndarray) -> float:
    a, b = _pair(est, truth)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def cc(est: np.ndarray, truth: np.ndarray) -> float:
    """Pearson correlation coefficient"""
    a, b = _pair(est, truth)
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(np.sum(da ** 2)), np.sqrt(np.sum(db ** 2))
    if na == 0 or nb == 0:
        raise UndefinedCorrelationError("Correlation is undefined for a constant field")
    return float(np.sum(da * db) / (na * nb))


def field_metrics(est: np.ndarray, truth: np.ndarray, threshold: float = DICE_THRESHOLD) -> Dict[str, float]:
    """Dice, RMSE and CC of one estimate; CC is NaN for a constant estimate"""
    try:
        corr = cc(est, truth)
    except UndefinedCorrelationError:
        corr = float("nan")
    return {"dice": dice(est, truth, threshold), "rmse": rmse(est, truth), "cc": corr}


def stat_difference(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean norm of the difference between two statistic vectors"""
    return float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


def hpd_log_level(kde: KdeModel, mass: float = 0.99) -> float:
    """Log-density level whose superlevel set holds ``mass`` of the KDE's own samples"""
    return float(np.quantile(kde_logpdf(kde, kde.samples), 1.0 - mass))


def coverage_fraction(points: np.ndarray, kde: KdeModel, mass: float = 0.99) -> float:
    """Fraction of ``points`` inside the ``mass`` highest-density region of ``kde``"""
    P = np.asarray(points, dtype=float)
    if P.size == 0:
        return float("nan")
    level = hpd_log_level(kde, mass)
    return float(np.mean(kde_logpdf(kde, np.atleast_2d(P)) >= level))


def aggregate(values: List[float]) -> Dict[str, float]:
    """Mean and population std (ddof=0) over cases, NaNs ignored"""
    arr = np.asarray(values, dtype=float)
    arr = arr[np.isfinite(arr)]
    if arr.size == 0:
        return {"mean": float("nan"), "std": float("nan"), "n": 0}
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


def paired_t_test(a: List[float], b: List[float]) -> Dict[str, float]:
    """Paired t-test over cases where both values are finite"""
    x, y = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    keep = np.isfinite(x) & np.isfinite(y)
    if keep.sum() < 2 or np.all(x[keep] - y[keep] == 0):
        return {"statistic": float("nan"), "pvalue": float("nan"), "n": int(keep.sum())}
    res = ttest_rel(x[keep], y[keep])
    return {"statistic": float(res.statistic), "pvalue": float(res.pvalue), "n": int(keep.sum())}
