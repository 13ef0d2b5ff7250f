"""
Bayesian active learning of the latent-space log-posterior

A GP is fitted to exact log-posterior evaluations at a handful of latent
codes and grown one acquisition point at a time. Convergence is judged on the
normalized surrogate density exp(GP mean) evaluated on a quadrature grid.
"""

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Callable, Deque, Dict, List, Optional

import numpy as np
from scipy.stats import qmc
from tqdm import tqdm

from backend.errors import DegenerateDensityError, DimensionMismatchError, NumericalInstabilityError
from backend.inference.acquisition import AcquisitionKind, SearchBox, maximize_acquisition, save_grid_csv
from backend.inference.gp_surrogate import (
    GpPosterior,
    GpTrainingSet,
    KernelHyperparams,
    default_hyperparams,
    gp_fit,
    gp_predict_batch,
    optimize_hyperparams,
)
from backend.inference.vae import VaeModel, decode_mean
from backend.simulation.forward_model import (
    ForwardModelConfig,
    GridGeometry,
    LikelihoodConfig,
    MeasurementSeries,
    resample_field,
)

logger = logging.getLogger(__name__)

KL_FLOOR = 1e-12
MIN_GRID_RESOLUTION = 16
DEDUPE_TOL = 1e-8


@dataclass
class TargetPosterior:
    """
    Exact latent-space log-posterior: decoder, simulator and Gaussian likelihood.

    ``field_geometry`` is the lattice the VAE was trained on. When it differs
    from the forward model's lattice, decoded fields are resampled onto it.
    """

    vae: VaeModel
    forward: ForwardModelConfig
    y_obs: MeasurementSeries
    likelihood: LikelihoodConfig
    field_geometry: Optional[GridGeometry] = None
    eval_count: int = 0

    @property
    def dim(self) -> int:
        return self.vae.d_z

    def decode_field(self, z: np.ndarray) -> np.ndarray:
        theta = decode_mean(self.vae, z)
        if self.field_geometry is not None and self.field_geometry != self.forward.geometry:
            theta = resample_field(theta, self.field_geometry, self.forward.geometry)
        return theta

    def log_density(self, z: np.ndarray) -> float:
        return log_post_z(self, z)


@dataclass
class AnalyticTarget:
    """Closed-form log density with the same evaluation accounting as TargetPosterior"""

    logpdf: Callable[[np.ndarray], float]
    dim: int = 2
    eval_count: int = 0

    def log_density(self, z: np.ndarray) -> float:
        self.eval_count += 1
        return float(self.logpdf(np.asarray(z, dtype=float)))


def log_post_z(target: TargetPosterior, z: np.ndarray) -> float:
    """
    Unnormalized log-posterior of a latent code.

    -1/2 (||Y_obs - M(decode(z))||^2 / sigma_e^2 + ||z||^2)

    Args:
        target: Decoder, forward model, data and likelihood
        z: Latent code

    Returns:
        Log-posterior value; the target's eval_count is incremented by one
    """
    z = np.asarray(z, dtype=float).ravel()
    if not np.all(np.isfinite(z)):
        raise ValueError("Latent code must be finite")
    theta = target.decode_field(z)
    target.eval_count += 1
    try:
        y_sim = target.forward.measure(theta)
    except NumericalInstabilityError as err:
        raise NumericalInstabilityError(f"{err} (z={z.tolist()})", step=err.step, z=z) from err
    if y_sim.values.shape != target.y_obs.values.shape:
        raise DimensionMismatchError(
            f"Simulated measurements {y_sim.values.shape} do not match observations {target.y_obs.values.shape}"
        )
    residual = target.y_obs.values - y_sim.values
    misfit = float(np.sum(residual ** 2)) / target.likelihood.sigma_e ** 2
    return -0.5 * (misfit + float(z @ z))


def initial_design(box: SearchBox, n: int, rng: np.random.Generator) -> np.ndarray:
    """Latin hypercube of ``n`` points in the box, one per stratum on every axis"""
    if n < 1:
        raise ValueError("Initial design needs n >= 1")
    unit = qmc.LatinHypercube(d=box.dim, seed=rng).random(n)
    return box.lower + unit * box.width


def trapezoid_weights(axes: List[np.ndarray]) -> np.ndarray:
    """Tensor-product trapezoid weights; they sum to the box volume"""
    per_axis = []
    for ax in axes:
        step = np.diff(ax)
        w = np.zeros_like(ax)
        w[:-1] += 0.5 * step
        w[1:] += 0.5 * step
        per_axis.append(w)
    return reduce(np.multiply.outer, per_axis)


@dataclass(frozen=True)
class DensityGrid:
    axes: List[np.ndarray]
    weights: np.ndarray
    density: np.ndarray

    @property
    def mass(self) -> float:
        return float(np.sum(self.density * self.weights))


def density_from_log_values(axes: List[np.ndarray], log_values: np.ndarray) -> DensityGrid:
    """Normalize exp(log_values) on the grid by the trapezoid rule"""
    log_values = np.asarray(log_values, dtype=float)
    finite = np.isfinite(log_values)
    if not finite.any():
        raise DegenerateDensityError("No finite log-density values on the grid")
    shifted = np.where(finite, log_values - log_values[finite].max(), -np.inf)
    unnorm = np.exp(shifted)
    weights = trapezoid_weights(axes)
    total = float(np.sum(unnorm * weights))
    if not np.isfinite(total) or total <= 0.0:
        raise DegenerateDensityError("Density grid has no mass")
    return DensityGrid(axes, weights, unnorm / total)


def surrogate_pdf_on_grid(gp: GpPosterior, box: SearchBox, resolution: int) -> DensityGrid:
    if resolution < MIN_GRID_RESOLUTION:
        raise ValueError(f"Quadrature grid needs at least {MIN_GRID_RESOLUTION} points per axis")
    axes, points = box.grid(resolution)
    mu, _ = gp_predict_batch(gp, points)
    return density_from_log_values(axes, mu.reshape((resolution,) * box.dim))


def kl_between_grids(p: DensityGrid, q: DensityGrid) -> float:
    """KL(p || q) by quadrature on a shared grid; q is floored at 1e-12"""
    if p.density.shape != q.density.shape:
        raise DimensionMismatchError("Density grids must share a shape")
    mask = p.density > 0
    ratio = p.density[mask] / np.maximum(q.density[mask], KL_FLOOR)
    kl = float(np.sum(p.weights[mask] * p.density[mask] * np.log(ratio)))
    return max(kl, 0.0)


def average_grid(grids: List[DensityGrid]) -> DensityGrid:
    first = grids[0]
    return DensityGrid(first.axes, first.weights, np.mean([g.density for g in grids], axis=0))


@dataclass(frozen=True)
class BalConfig:
    kind: AcquisitionKind
    initial_design_size: int = 10
    max_iterations: int = 290
    kl_threshold: float = 0.02
    kl_window: int = 5
    quadrature_grid: int = 81
    seed: int = 0
    search_half_width: float = 4.0
    stop_on_convergence: bool = True
    n_restarts: int = 5

    def __post_init__(self):
        if self.initial_design_size < 3:
            raise ValueError("initial_design_size must be >= 3")
        if self.kl_window < 1:
            raise ValueError("kl_window must be >= 1")
        if not self.kl_threshold > 0:
            raise ValueError("kl_threshold must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.quadrature_grid < MIN_GRID_RESOLUTION:
            raise ValueError(f"quadrature_grid must be >= {MIN_GRID_RESOLUTION}")


@dataclass(frozen=True)
class BalIteration:
    iteration: int
    z: List[float]
    value: float
    hyperparams: Dict
    kl: float

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "z": self.z,
            "value": self.value,
            "hyperparams": self.hyperparams,
            "kl": self.kl,
        }


@dataclass
class BalResult:
    gp: GpPosterior
    history: List[BalIteration]
    converged: bool
    n_evaluations: int
    kind: AcquisitionKind
    box: SearchBox
    n_initial: int
    density: Optional[DensityGrid] = field(default=None, repr=False)

    @property
    def acquired_points(self) -> np.ndarray:
        """Inputs chosen by the acquisition function, initial design excluded"""
        return self.gp.training_set.inputs[self.n_initial:]

    @property
    def kl_trace(self) -> List[float]:
        return [it.kl for it in self.history]


def _dedupe(z: np.ndarray, ts: GpTrainingSet, box: SearchBox, rng: np.random.Generator) -> np.ndarray:
    scale = 1e-3 * box.width
    while ts.contains(z, DEDUPE_TOL):
        logger.debug(f"[BAL] Acquisition point {z.tolist()} already evaluated; jittering")
        z = box.clip(z + scale * rng.standard_normal(z.shape))
    return z


def run_bal(target, cfg: BalConfig, box: Optional[SearchBox] = None, progress: bool = False) -> BalResult:
    """
    Grow a GP surrogate of the log-posterior by sequential acquisition.

    Each iteration re-optimizes the kernel hyperparameters (warm-started),
    maximizes the acquisition, evaluates the exact log-posterior there and
    refits. The loop stops once the KL divergence between the newest
    surrogate density and the average of the previous ``kl_window`` ones
    drops to ``kl_threshold``, or after ``max_iterations``.

    Args:
        target: Anything with ``log_density(z)`` and an ``eval_count``
        cfg: Loop settings
        box: Latent search box; defaults to the symmetric box of the configured half-width
        progress: Show a progress bar

    Returns:
        BalResult with the final GP, per-iteration history and evaluation count
    """
    box = box if box is not None else SearchBox.symmetric(target.dim, cfg.search_half_width)
    dim = box.dim
    rng = np.random.default_rng(cfg.seed)
    start_count = target.eval_count

    ts = GpTrainingSet.empty(dim)
    for z in initial_design(box, cfg.initial_design_size, rng):
        ts = ts.append(z, target.log_density(z))

    hp: KernelHyperparams = default_hyperparams(ts, box.width)
    hp = optimize_hyperparams(ts, hp, rng, n_restarts=cfg.n_restarts)
    gp = gp_fit(ts, hp)
    density = surrogate_pdf_on_grid(gp, box, cfg.quadrature_grid)
    previous: Deque[DensityGrid] = deque([density], maxlen=cfg.kl_window)
    logger.info(
        f"[BAL] {cfg.kind.name}: initial design of {cfg.initial_design_size} evaluated, "
        f"max {cfg.max_iterations} iterations"
    )

    history: List[BalIteration] = []
    converged = False
    for iteration in tqdm(range(1, cfg.max_iterations + 1), desc=f"BAL {cfg.kind.name}", disable=not progress):
        hp = optimize_hyperparams(ts, hp, rng, n_restarts=cfg.n_restarts)
        gp = gp_fit(ts, hp)
        z = _dedupe(maximize_acquisition(gp, cfg.kind, box, rng), ts, box, rng)
        value = target.log_density(z)
        ts = ts.append(z, value)
        gp = gp_fit(ts, hp)

        density = surrogate_pdf_on_grid(gp, box, cfg.quadrature_grid)
        full_window = len(previous) == cfg.kl_window
        kl = kl_between_grids(density, average_grid(list(previous)))
        previous.append(density)
        history.append(BalIteration(iteration, z.tolist(), float(value), hp.to_dict(), kl))
        logger.debug(f"[BAL] it {iteration}: z={np.round(z, 4).tolist()} logpost={value:.4g} KL={kl:.3g}")

        if full_window and kl <= cfg.kl_threshold:
            converged = True
            if cfg.stop_on_convergence:
                break

    n_evaluations = target.eval_count - start_count
    status = "converged" if converged else "stopped without convergence"
    logger.info(f"[BAL] {cfg.kind.name} {status} after {len(history)} iterations, {n_evaluations} evaluations")
    return BalResult(gp, history, converged, n_evaluations, cfg.kind, box, cfg.initial_design_size, density)


def save_bal_result(directory: Path, result: BalResult):
    """History and training data as JSON, surrogate density as a CSV grid"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {
        "kind": result.kind.to_dict(),
        "converged": result.converged,
        "n_evaluations": result.n_evaluations,
        "n_initial": result.n_initial,
        "box": {"lower": result.box.lower.tolist(), "upper": result.box.upper.tolist()},
        "hyperparams": result.gp.hyperparams.to_dict(),
        "training_set": result.gp.training_set.to_dict(),
        "history": [it.to_dict() for it in result.history],
    }
    (directory / "bal_result.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    if result.density is not None:
        save_grid_csv(directory / "surrogate_pdf.csv", result.density.axes, result.density.density, "density")


def load_bal_result(directory: Path) -> BalResult:
    """Rebuild a BalResult from its JSON; the GP is refitted from the stored data"""
    payload = json.loads((Path(directory) / "bal_result.json").read_text())
    kind = AcquisitionKind(payload["kind"]["name"], payload["kind"]["kappa"])
    box = SearchBox(np.asarray(payload["box"]["lower"]), np.asarray(payload["box"]["upper"]))
    gp = gp_fit(GpTrainingSet.from_dict(payload["training_set"]), KernelHyperparams.from_dict(payload["hyperparams"]))
    history = [
        BalIteration(h["iteration"], h["z"], h["value"], h["hyperparams"], h["kl"]) for h in payload["history"]
    ]
    return BalResult(gp, history, payload["converged"], payload["n_evaluations"], kind, box, payload["n_initial"])
