"""
Gaussian-process regression over latent space

Zero-mean GP with an anisotropic Matern 5/2 kernel, exact inference through a
jittered Cholesky factor, and marginal-likelihood hyperparameter search in
log space with restarted Nelder-Mead.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

from backend.errors import HyperparamSearchWarning, IllConditionedError

logger = logging.getLogger(__name__)

SQRT5 = np.sqrt(5.0)
NOISE_FLOOR = 1e-10
DUPLICATE_TOL = 1e-10
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)

# log-space search bounds: amplitude2, inverse squared length scales, noise variance
LOG_AMPLITUDE_BOUNDS = (np.log(1e-6), np.log(1e14))
LOG_INV_LS_BOUNDS = (np.log(1e-4), np.log(1e4))
LOG_NOISE_BOUNDS = (np.log(NOISE_FLOOR), np.log(1e10))


@dataclass(frozen=True)
class KernelHyperparams:
    amplitude2: float
    inv_lengthscale2: np.ndarray
    noise_var: float = 1e-6

    def __post_init__(self):
        inv = np.atleast_1d(np.asarray(self.inv_lengthscale2, dtype=float))
        object.__setattr__(self, "inv_lengthscale2", inv)
        if not self.amplitude2 > 0:
            raise ValueError("amplitude2 must be positive")
        if not np.all(inv > 0):
            raise ValueError("inverse squared length scales must be positive")
        if not self.noise_var >= NOISE_FLOOR:
            raise ValueError(f"noise_var must be >= {NOISE_FLOOR}")

    @property
    def dim(self) -> int:
        return self.inv_lengthscale2.shape[0]

    def to_log_vector(self) -> np.ndarray:
        return np.concatenate([[np.log(self.amplitude2)], np.log(self.inv_lengthscale2), [np.log(self.noise_var)]])

    @classmethod
    def from_log_vector(cls, vec: np.ndarray) -> "KernelHyperparams":
        vec = np.asarray(vec, dtype=float)
        return cls(
            amplitude2=float(np.exp(vec[0])),
            inv_lengthscale2=np.exp(vec[1:-1]),
            noise_var=float(max(np.exp(vec[-1]), NOISE_FLOOR)),
        )

    def to_dict(self) -> dict:
        return {
            "amplitude2": float(self.amplitude2),
            "inv_lengthscale2": [float(v) for v in self.inv_lengthscale2],
            "noise_var": float(self.noise_var),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KernelHyperparams":
        return cls(data["amplitude2"], np.asarray(data["inv_lengthscale2"], dtype=float), data["noise_var"])


@dataclass(frozen=True)
class GpTrainingSet:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        y = np.atleast_1d(np.asarray(self.targets, dtype=float))
        if X.size == 0:
            X = X.reshape(0, X.shape[-1] if X.ndim == 2 else 0)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", y)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} inputs but {y.shape[0]} targets")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("GP training data must be finite")
        if X.shape[0] > 1:
            d = cdist(X, X)
            np.fill_diagonal(d, np.inf)
            if d.min() <= DUPLICATE_TOL:
                raise ValueError("GP training inputs contain duplicates")

    @classmethod
    def empty(cls, dim: int) -> "GpTrainingSet":
        return cls(np.zeros((0, dim)), np.zeros(0))

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def append(self, z: np.ndarray, target: float) -> "GpTrainingSet":
        return GpTrainingSet(np.vstack([self.inputs, np.atleast_2d(z)]), np.append(self.targets, target))

    def contains(self, z: np.ndarray, tol: float = DUPLICATE_TOL) -> bool:
        if len(self) == 0:
            return False
        return bool(cdist(np.atleast_2d(z), self.inputs).min() <= tol)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "inputs": self.inputs.tolist(), "targets": self.targets.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "GpTrainingSet":
        inputs = np.asarray(data["inputs"], dtype=float)
        dim = int(data.get("dim", inputs.shape[1] if inputs.ndim == 2 else 0))
        return cls(inputs.reshape(-1, dim), np.asarray(data["targets"], dtype=float))


@dataclass(frozen=True)
class GpPosterior:
    training_set: GpTrainingSet
    hyperparams: KernelHyperparams
    chol: np.ndarray
    weights: np.ndarray
    jitter: float = 0.0


def _scaled_distance(A: np.ndarray, B: np.ndarray, hp: KernelHyperparams) -> np.ndarray:
    scale = np.sqrt(hp.inv_lengthscale2)
    return cdist(np.atleast_2d(A) * scale, np.atleast_2d(B) * scale)


def _matern_from_distance(d: np.ndarray, amplitude2: float) -> np.ndarray:
    return amplitude2 * np.exp(-SQRT5 * d) * (1.0 + SQRT5 * d + (5.0 / 3.0) * d ** 2)


def matern52(z_i: np.ndarray, z_j: np.ndarray, hp: KernelHyperparams) -> float:
    """k = a^2 exp(-sqrt5 d)(1 + sqrt5 d + 5/3 d^2), d^2 = (zi - zj)^T Lambda (zi - zj)"""
    z_i = np.asarray(z_i, dtype=float)
    z_j = np.asarray(z_j, dtype=float)
    if z_i.shape != z_j.shape:
        raise ValueError("Latent codes must have equal dimensions")
    diff = z_i - z_j
    d = float(np.sqrt(np.sum(hp.inv_lengthscale2 * diff * diff)))
    return float(_matern_from_distance(np.asarray(d), hp.amplitude2))


def kernel_matrix(A: np.ndarray, B: np.ndarray, hp: KernelHyperparams) -> np.ndarray:
    return _matern_from_distance(_scaled_distance(A, B, hp), hp.amplitude2)


def _jittered_cholesky(K: np.ndarray) -> Tuple[np.ndarray, float]:
    n = K.shape[0]
    for jitter in JITTER_LADDER:
        try:
            L = linalg.cholesky(K + jitter * np.eye(n), lower=True)
            return L, jitter
        except linalg.LinAlgError:
            continue
    raise IllConditionedError(f"Kernel matrix of size {n} not positive definite after jitter {JITTER_LADDER[-1]}")


def gp_fit(ts: GpTrainingSet, hp: KernelHyperparams) -> GpPosterior:
    """Factorize K + noise_var I and precompute the weight vector (K + noise I)^-1 L"""
    n = len(ts)
    if n == 0:
        return GpPosterior(ts, hp, np.zeros((0, 0)), np.zeros(0))
    if ts.dim != hp.dim:
        raise ValueError(f"Hyperparameters are {hp.dim}-dimensional, inputs are {ts.dim}-dimensional")
    K = kernel_matrix(ts.inputs, ts.inputs, hp)
    K[np.diag_indices(n)] += hp.noise_var
    L, jitter = _jittered_cholesky(K)
    weights = linalg.cho_solve((L, True), ts.targets)
    return GpPosterior(ts, hp, L, weights, jitter)


def gp_predict_batch(gp: GpPosterior, Z: np.ndarray, clamp: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance at every row of Z"""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    prior_var = np.full(Z.shape[0], gp.hyperparams.amplitude2)
    if len(gp.training_set) == 0:
        return np.zeros(Z.shape[0]), prior_var
    k = kernel_matrix(gp.training_set.inputs, Z, gp.hyperparams)
    mu = k.T @ gp.weights
    v = linalg.solve_triangular(gp.chol, k, lower=True)
    var = prior_var - np.sum(v * v, axis=0)
    if clamp:
        var = np.maximum(var, 0.0)
    return mu, var


def gp_predict(gp: GpPosterior, z_star: np.ndarray) -> Tuple[float, float]:
    mu, var = gp_predict_batch(gp, np.atleast_2d(z_star))
    return float(mu[0]), float(var[0])


def log_marginal_likelihood(ts: GpTrainingSet, hp: KernelHyperparams) -> float:
    """-1/2 y^T (K + s I)^-1 y - 1/2 log det(K + s I) - n/2 log 2 pi"""
    gp = gp_fit(ts, hp)
    n = len(ts)
    return float(
        -0.5 * ts.targets @ gp.weights
        - np.sum(np.log(np.diag(gp.chol)))
        - 0.5 * n * np.log(2.0 * np.pi)
    )


def default_hyperparams(ts: GpTrainingSet, box_width: Optional[np.ndarray] = None) -> KernelHyperparams:
    """Data-scaled starting point: amplitude from the target spread, length scale a quarter of the box"""
    dim = ts.dim
    width = np.full(dim, 8.0) if box_width is None else np.asarray(box_width, dtype=float)
    spread = float(np.var(ts.targets)) if len(ts) > 1 else 1.0
    amplitude2 = max(spread, float(np.mean(ts.targets ** 2)) if len(ts) else 1.0, 1e-6)
    return KernelHyperparams(amplitude2, 1.0 / (width / 4.0) ** 2, max(1e-6 * amplitude2, NOISE_FLOOR))


def _search_bounds(dim: int):
    return [LOG_AMPLITUDE_BOUNDS] + [LOG_INV_LS_BOUNDS] * dim + [LOG_NOISE_BOUNDS]


def optimize_hyperparams(
    ts: GpTrainingSet,
    init: KernelHyperparams,
    rng: Optional[np.random.Generator] = None,
    n_restarts: int = 5,
    perturbation: float = 1.0,
    max_evals: int = 400,
) -> KernelHyperparams:
    """
    Maximize the log marginal likelihood over log-parameterized hyperparameters.

    Nelder-Mead is started from ``init`` and from ``n_restarts - 1`` Gaussian
    perturbations of it in log space. The result is never worse than ``init``.
    If every start fails, ``init`` is returned and a HyperparamSearchWarning is
    issued.
    """
    if len(ts) < 3:
        raise ValueError("Hyperparameter search needs at least 3 training points")
    rng = rng if rng is not None else np.random.default_rng(0)
    bounds = _search_bounds(init.dim)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    def objective(vec: np.ndarray) -> float:
        try:
            value = log_marginal_likelihood(ts, KernelHyperparams.from_log_vector(np.clip(vec, lo, hi)))
        except (IllConditionedError, ValueError, FloatingPointError):
            return np.inf
        return -value if np.isfinite(value) else np.inf

    start0 = np.clip(init.to_log_vector(), lo, hi)
    starts = [start0] + [
        np.clip(start0 + perturbation * rng.standard_normal(start0.shape), lo, hi) for _ in range(n_restarts - 1)
    ]

    init_value = objective(init.to_log_vector())
    best_vec, best_value = None, init_value
    n_failed = 0
    for start in starts:
        with np.errstate(all="ignore"):
            res = minimize(
                objective,
                start,
                method="Nelder-Mead",
                bounds=bounds,
                options={"maxfev": max_evals, "xatol": 1e-4, "fatol": 1e-6},
            )
        if not np.isfinite(res.fun):
            n_failed += 1
            continue
        if res.fun < best_value:
            best_vec, best_value = np.clip(res.x, lo, hi), res.fun

    if n_failed == len(starts):
        message = "[GP] Every hyperparameter restart failed; keeping the initial hyperparameters"
        logger.warning(message)
        warnings.warn(message, HyperparamSearchWarning)
        return init
    if best_vec is None:
        return init
    logger.debug(f"[GP] Hyperparameter search: LML {-init_value:.4g} -> {-best_value:.4g}")
    return KernelHyperparams.from_log_vector(best_vec)
