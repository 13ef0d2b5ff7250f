"""
Acquisition functions over a GP of the log-posterior

The GP models log pi(z | Y); its exponential is a log-normal process. The
entropy and variance of that log-normal process drive posterior-focused
acquisition, with GP-UCB kept as the regular baseline.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np
from scipy.optimize import minimize

from backend.inference.gp_surrogate import GpPosterior, gp_predict, gp_predict_batch

logger = logging.getLogger(__name__)

LOGNORMAL_ENTROPY = "lognormal_entropy"
LOGNORMAL_VARIANCE = "lognormal_variance"
UCB = "ucb"
_TINY_VAR = np.finfo(float).tiny

GRID_PER_AXIS = 41
N_REFINE = 5


@dataclass(frozen=True)
class AcquisitionKind:
    name: str
    kappa: float = 2.0

    def __post_init__(self):
        if self.name not in (LOGNORMAL_ENTROPY, LOGNORMAL_VARIANCE, UCB):
            raise ValueError(f"Unknown acquisition '{self.name}'")
        if self.name == UCB and not self.kappa > 0:
            raise ValueError("UCB kappa must be positive")

    @classmethod
    def entropy(cls) -> "AcquisitionKind":
        return cls(LOGNORMAL_ENTROPY)

    @classmethod
    def variance(cls) -> "AcquisitionKind":
        return cls(LOGNORMAL_VARIANCE)

    @classmethod
    def ucb(cls, kappa: float = 2.0) -> "AcquisitionKind":
        return cls(UCB, kappa)

    def to_dict(self) -> dict:
        return {"name": self.name, "kappa": self.kappa}


@dataclass(frozen=True)
class SearchBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if lower.shape != upper.shape or not np.all(lower < upper):
            raise ValueError("SearchBox needs lower < upper componentwise")

    @classmethod
    def symmetric(cls, dim: int, half_width: float = 4.0) -> "SearchBox":
        return cls(np.full(dim, -half_width), np.full(dim, half_width))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, z: np.ndarray) -> bool:
        z = np.asarray(z)
        return bool(np.all(z >= self.lower) and np.all(z <= self.upper))

    def clip(self, z: np.ndarray) -> np.ndarray:
        return np.clip(z, self.lower, self.upper)

    def axes(self, resolution: int) -> List[np.ndarray]:
        return [np.linspace(lo, hi, resolution) for lo, hi in zip(self.lower, self.upper)]

    def grid(self, resolution: int) -> Tuple[List[np.ndarray], np.ndarray]:
        """Per-axis coordinates and the (resolution^d, d) tensor grid, first axis slowest"""
        axes = self.axes(resolution)
        mesh = np.meshgrid(*axes, indexing="ij")
        return axes, np.column_stack([m.ravel() for m in mesh])


def lognormal_entropy(mu, var):
    """Differential entropy of exp(X), X ~ N(mu, var): mu + 1/2 + ln(sqrt(2 pi) sigma)"""
    var = np.asarray(var, dtype=float)
    if np.any(var <= 0):
        raise ValueError("Log-normal entropy needs var > 0")
    return mu + 0.5 + np.log(np.sqrt(2.0 * np.pi * var))


def log_lognormal_variance(mu, var):
    """log[(exp(var) - 1) exp(2 mu + var)], computed without overflow"""
    var = np.asarray(var, dtype=float)
    if np.any(var <= 0):
        raise ValueError("Log-normal variance needs var > 0")
    # log(expm1(v)) = v + log1p(-exp(-v)) is the stable form for large v
    log_expm1 = np.where(var > 1.0, var + np.log1p(-np.exp(-np.maximum(var, 1.0))), np.log(np.expm1(np.minimum(var, 1.0))))
    return log_expm1 + 2.0 * np.asarray(mu, dtype=float) + var


def lognormal_variance(mu, var):
    """(exp(var) - 1) exp(2 mu + var); inf where the value overflows a float"""
    with np.errstate(over="ignore"):
        return np.exp(log_lognormal_variance(mu, var))


def ucb(mu, var, kappa: float):
    return mu + kappa * np.sqrt(np.maximum(var, 0.0))


def _score(mu: np.ndarray, var: np.ndarray, kind: AcquisitionKind) -> np.ndarray:
    if kind.name == UCB:
        return ucb(mu, var, kind.kappa)
    var = np.maximum(var, _TINY_VAR)
    if kind.name == LOGNORMAL_ENTROPY:
        return lognormal_entropy(mu, var)
    return log_lognormal_variance(mu, var)


def evaluate_acquisition_batch(gp: GpPosterior, kind: AcquisitionKind, Z: np.ndarray) -> np.ndarray:
    """
    Acquisition values at every row of Z.

    The log-normal variance kind is scored by its logarithm, which has the
    same maximizer and stays finite for large GP means.
    """
    mu, var = gp_predict_batch(gp, Z)
    return _score(mu, var, kind)


def evaluate_acquisition(gp: GpPosterior, kind: AcquisitionKind, z: np.ndarray) -> float:
    mu, var = gp_predict(gp, z)
    return float(_score(np.asarray(mu), np.asarray(var), kind))


def _candidates(box: SearchBox, rng: np.random.Generator) -> np.ndarray:
    if box.dim <= 3:
        return box.grid(GRID_PER_AXIS)[1]
    return box.lower + rng.uniform(size=(GRID_PER_AXIS ** 2, box.dim)) * box.width


def maximize_acquisition(
    gp: GpPosterior, kind: AcquisitionKind, box: SearchBox, rng: np.random.Generator
) -> np.ndarray:
    """
    Grid scan followed by bounded Nelder-Mead from the best grid points.

    Ties go to the first point found (grid order, then refinement order).
    """
    cand = _candidates(box, rng)
    values = evaluate_acquisition_batch(gp, kind, cand)
    order = np.argsort(-values, kind="stable")
    best_z = cand[order[0]].copy()
    best_value = values[order[0]]

    def objective(z: np.ndarray) -> float:
        return -float(evaluate_acquisition_batch(gp, kind, box.clip(z)[None, :])[0])

    bounds = list(zip(box.lower, box.upper))
    for idx in order[:N_REFINE]:
        res = minimize(
            objective,
            cand[idx],
            method="Nelder-Mead",
            bounds=bounds,
            options={"xatol": 1e-5, "fatol": 1e-9, "maxiter": 400},
        )
        value = -res.fun
        if np.isfinite(value) and value > best_value:
            best_z, best_value = box.clip(res.x), value

    logger.debug(f"[Acquisition] {kind.name} max {best_value:.5g} at {np.round(best_z, 4).tolist()}")
    return box.clip(best_z)


def acquisition_surface(
    gp: GpPosterior, kind: AcquisitionKind, box: SearchBox, resolution: int = 101
) -> Tuple[List[np.ndarray], np.ndarray]:
    """Acquisition values on a tensor grid, shaped (resolution,) * d"""
    axes, points = box.grid(resolution)
    values = evaluate_acquisition_batch(gp, kind, points)
    return axes, values.reshape((resolution,) * box.dim)


def save_grid_csv(path: Path, axes: List[np.ndarray], values: np.ndarray, value_name: str = "value"):
    """Long-format grid export: one row per grid point with its coordinates"""
    mesh = np.meshgrid(*axes, indexing="ij")
    columns = [m.ravel() for m in mesh] + [np.asarray(values).ravel()]
    header = ",".join([f"z{i + 1}" for i in range(len(axes))] + [value_name])
    np.savetxt(path, np.column_stack(columns), delimiter=",", header=header, comments="", fmt="%.17g")
