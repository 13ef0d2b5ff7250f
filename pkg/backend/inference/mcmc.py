"""
Random-walk Metropolis-Hastings samplers and convergence diagnostics

Plain MH drives the reference posterior and the sampling of BAL surrogates;
two-stage (delayed-acceptance) MH screens proposals with a cheap surrogate
before spending an exact evaluation on them.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cholesky

from backend.errors import DimensionMismatchError

logger = logging.getLogger(__name__)

LogPdf = Callable[[np.ndarray], float]

TARGET_ACCEPTANCE = 0.22
GEWEKE_FIRST = 0.1
GEWEKE_LAST = 0.5


@dataclass(frozen=True)
class ProposalSpec:
    covariance: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
            raise ValueError("Proposal covariance must be square and symmetric")
        try:
            chol = cholesky(cov, lower=True)
        except np.linalg.LinAlgError as err:
            raise ValueError("Proposal covariance must be positive definite") from err
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "chol", chol)

    @classmethod
    def isotropic(cls, dim: int, scale: float) -> "ProposalSpec":
        if not scale > 0:
            raise ValueError("Proposal scale must be positive")
        return cls(scale ** 2 * np.eye(dim))

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    @property
    def scale(self) -> float:
        """Geometric-mean standard deviation of the proposal"""
        return float(np.exp(np.mean(np.log(np.diag(self.chol)))))

    def draw(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return x + self.chol @ rng.standard_normal(self.dim)


@dataclass
class ChainResult:
    """
    One Markov chain.

    ``n_evaluations`` counts evaluations of the chain's primary log density at
    proposals (exact evaluations for two-stage chains). The evaluation of the
    initial state is counted separately in ``n_init_evaluations``.
    """

    samples: np.ndarray
    log_density: np.ndarray
    accepted: np.ndarray
    n_evaluations: int
    n_init_evaluations: int = 1
    n_surrogate_evaluations: int = 0

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if len(self.accepted) else 0.0

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass
class Diagnostics:
    gelman_rubin: np.ndarray
    gelman_rubin_degenerate: bool
    geweke: List[np.ndarray]
    geweke_degenerate: List[bool]

    def to_dict(self) -> dict:
        return {
            "gelman_rubin": self.gelman_rubin.tolist(),
            "gelman_rubin_degenerate": self.gelman_rubin_degenerate,
            "geweke": [z.tolist() for z in self.geweke],
            "geweke_degenerate": self.geweke_degenerate,
        }


@dataclass
class SampleSet:
    samples: np.ndarray
    diagnostics: Optional[Diagnostics]
    acceptance_rates: List[float]
    n_evaluations: int
    n_init_evaluations: int
    n_surrogate_evaluations: int = 0
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.samples.shape[0]

    def to_dict(self) -> dict:
        return {
            "n_samples": len(self),
            "acceptance_rates": self.acceptance_rates,
            "n_evaluations": self.n_evaluations,
            "n_init_evaluations": self.n_init_evaluations,
            "n_surrogate_evaluations": self.n_surrogate_evaluations,
            "diagnostics": None if self.diagnostics is None else self.diagnostics.to_dict(),
            "metadata": self.metadata,
        }


def _finite_or_neg_inf(value: float) -> float:
    value = float(value)
    return value if np.isfinite(value) else -np.inf


def _accept(log_ratio: float, rng: np.random.Generator) -> bool:
    # uniforms are drawn only for downhill moves so that MH and a two-stage
    # chain with an exact surrogate consume the same random stream
    if log_ratio >= 0.0:
        return True
    if log_ratio == -np.inf:
        return False
    return bool(np.log(rng.uniform()) < log_ratio)


def _check_init(logpdf: LogPdf, init: np.ndarray, prop: ProposalSpec) -> Tuple[np.ndarray, float]:
    x = np.asarray(init, dtype=float).ravel().copy()
    if x.shape[0] != prop.dim:
        raise DimensionMismatchError(f"Initial state has {x.shape[0]} dims, proposal has {prop.dim}")
    lx = float(logpdf(x))
    if not np.isfinite(lx):
        raise ValueError(f"Log density at the initial state is not finite: {lx}")
    return x, lx


def mh_chain(logpdf: LogPdf, init: np.ndarray, prop: ProposalSpec, n: int, rng: np.random.Generator) -> ChainResult:
    """
    Random-walk Metropolis with Gaussian proposals.

    Args:
        logpdf: Unnormalized log density
        init: Starting state; its log density must be finite
        prop: Proposal covariance
        n: Number of steps
        rng: Random stream; the chain is a pure function of its state

    Returns:
        ChainResult with the state after each step
    """
    if n < 1:
        raise ValueError("Chain length must be >= 1")
    x, lx = _check_init(logpdf, init, prop)
    samples = np.empty((n, prop.dim))
    trace = np.empty(n)
    accepted = np.zeros(n, dtype=bool)
    for i in range(n):
        y = prop.draw(x, rng)
        ly = _finite_or_neg_inf(logpdf(y))
        if _accept(ly - lx, rng):
            x, lx = y, ly
            accepted[i] = True
        samples[i] = x
        trace[i] = lx
    return ChainResult(samples, trace, accepted, n_evaluations=n)


def two_stage_mh(
    logpdf_exact: LogPdf,
    logpdf_surrogate: LogPdf,
    init: np.ndarray,
    prop: ProposalSpec,
    n: int,
    rng: np.random.Generator,
) -> ChainResult:
    """
    Delayed-acceptance MH.

    Stage one screens a proposal with the surrogate ratio; only survivors
    are evaluated exactly and accepted with the correction ratio
    [pi(y) pi_s(x)] / [pi(x) pi_s(y)]. ``n_evaluations`` is the exact
    evaluation count.
    """
    if n < 1:
        raise ValueError("Chain length must be >= 1")
    x, ex = _check_init(logpdf_exact, init, prop)
    _, sx = _check_init(logpdf_surrogate, x, prop)
    samples = np.empty((n, prop.dim))
    trace = np.empty(n)
    accepted = np.zeros(n, dtype=bool)
    n_exact = 0
    for i in range(n):
        y = prop.draw(x, rng)
        sy = _finite_or_neg_inf(logpdf_surrogate(y))
        if _accept(sy - sx, rng):
            ey = _finite_or_neg_inf(logpdf_exact(y))
            n_exact += 1
            correction = (ey - ex) - (sy - sx) if np.isfinite(ey) else -np.inf
            if _accept(correction, rng):
                x, ex, sx = y, ey, sy
                accepted[i] = True
        samples[i] = x
        trace[i] = ex
    return ChainResult(samples, trace, accepted, n_evaluations=n_exact, n_surrogate_evaluations=n + 1)


def tune_proposal(
    logpdf_cheap: LogPdf,
    init: np.ndarray,
    rng: np.random.Generator,
    target_rate: float = TARGET_ACCEPTANCE,
    pilot_length: int = 500,
    max_pilots: int = 20,
    tolerance: float = 0.05,
    initial_scale: float = 1.0,
) -> ProposalSpec:
    """
    Bisect an isotropic proposal scale until pilot acceptance is near target.

    Pilots continue from the last state of the previous pilot. The scale is
    bracketed by doubling or halving, then bisected in log space. The best
    scale seen is returned if no pilot lands within ``tolerance``.
    """
    if not 0.0 < target_rate < 1.0:
        raise ValueError("target_rate must lie in (0, 1)")
    x = np.asarray(init, dtype=float).ravel()
    dim = x.shape[0]
    scale = initial_scale
    lo: Optional[float] = None
    hi: Optional[float] = None
    best_scale, best_gap, best_rate = scale, np.inf, float("nan")

    for pilot in range(max_pilots):
        chain = mh_chain(logpdf_cheap, x, ProposalSpec.isotropic(dim, scale), pilot_length, rng)
        x = chain.samples[-1]
        rate = chain.acceptance_rate
        gap = abs(rate - target_rate)
        if gap < best_gap:
            best_scale, best_gap, best_rate = scale, gap, rate
        logger.debug(f"[MCMC] pilot {pilot + 1}: scale {scale:.4g} acceptance {rate:.3f}")
        if gap <= tolerance:
            break
        if rate > target_rate:
            lo = scale
        else:
            hi = scale
        if lo is not None and hi is not None:
            scale = float(np.sqrt(lo * hi))
        elif lo is not None:
            scale = lo * 2.0
        else:
            scale = hi / 2.0

    logger.info(f"[MCMC] Tuned proposal scale {best_scale:.4g} (pilot acceptance {best_rate:.3f})")
    return ProposalSpec.isotropic(dim, best_scale)


def gelman_rubin(chains: Sequence[np.ndarray]) -> Tuple[np.ndarray, bool]:
    """
    Potential scale reduction factor per dimension.

    Args:
        chains: Equal-length sample arrays, each (n, d) with n >= 10

    Returns:
        (R-hat floored at 1, degenerate flag). The flag is set when the
        between-chain or within-chain variance vanishes in some dimension.
    """
    if len(chains) < 2:
        raise ValueError("Gelman-Rubin needs at least 2 chains")
    stacked = np.stack([np.atleast_2d(np.asarray(c, dtype=float).reshape(len(c), -1)) for c in chains])
    m, n, _ = stacked.shape
    if n < 10:
        raise ValueError("Gelman-Rubin needs chains of length >= 10")

    W = np.mean(np.var(stacked, axis=1, ddof=1), axis=0)
    means = np.mean(stacked, axis=1)
    B = n * np.var(means, axis=0, ddof=1)
    V = W * (n - 1.0) / n + B * (m + 1.0) / (m * n)
    degenerate = bool(np.any(W == 0) or np.any(B == 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.where(W > 0, np.sqrt(V / W), np.where(B > 0, np.inf, 1.0))
    return np.maximum(rhat, 1.0), degenerate


def _batch_means_variance(segment: np.ndarray) -> np.ndarray:
    """Variance of the segment mean from non-overlapping batch means"""
    n_batches = max(2, int(np.floor(np.sqrt(segment.shape[0]))))
    size = segment.shape[0] // n_batches
    batches = segment[: n_batches * size].reshape(n_batches, size, -1).mean(axis=1)
    return np.var(batches, axis=0, ddof=1) / n_batches


def geweke(chain: np.ndarray, first: float = GEWEKE_FIRST, last: float = GEWEKE_LAST) -> Tuple[np.ndarray, bool]:
    """
    Geweke z-scores comparing the first 10% with the last 50% of a chain.

    Returns:
        (z per dimension, degenerate flag). Dimensions with zero variance in
        both segments get z = 0 and set the flag.
    """
    x = np.asarray(chain, dtype=float)
    x = x.reshape(x.shape[0], -1)
    n = x.shape[0]
    if n < 100:
        raise ValueError("Geweke needs a chain of length >= 100")
    a = x[: int(first * n)]
    b = x[n - int(last * n):]
    var = _batch_means_variance(a) + _batch_means_variance(b)
    diff = a.mean(axis=0) - b.mean(axis=0)
    degenerate_dims = var <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(degenerate_dims, 0.0, diff / np.sqrt(np.where(degenerate_dims, 1.0, var)))
    return z, bool(np.any(degenerate_dims))


def diagnose(chains: Sequence[np.ndarray]) -> Diagnostics:
    rhat, rhat_degenerate = gelman_rubin(chains)
    gew = [geweke(c) for c in chains]
    return Diagnostics(rhat, rhat_degenerate, [g[0] for g in gew], [g[1] for g in gew])


def _default_inits(rng: np.random.Generator, n_chains: int, dim: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(n_chains, dim))


def _collect(
    chains: List[ChainResult], burn_in_fraction: float, thin: int, metadata: dict
) -> SampleSet:
    burn = int(round(burn_in_fraction * len(chains[0])))
    kept = [c.samples[burn:] for c in chains]
    diagnostics = diagnose(kept) if kept[0].shape[0] >= 100 else None
    samples = np.vstack([k[::thin] for k in kept])
    return SampleSet(
        samples=samples,
        diagnostics=diagnostics,
        acceptance_rates=[c.acceptance_rate for c in chains],
        n_evaluations=sum(c.n_evaluations for c in chains),
        n_init_evaluations=sum(c.n_init_evaluations for c in chains),
        n_surrogate_evaluations=sum(c.n_surrogate_evaluations for c in chains),
        metadata={**metadata, "burn_in_fraction": burn_in_fraction, "thin": thin, "n_chains": len(chains)},
    )


def _chain_rngs(rng: np.random.Generator, n_chains: int) -> List[np.random.Generator]:
    return [np.random.default_rng(int(s)) for s in rng.integers(0, 2 ** 63 - 1, size=n_chains)]


def run_reference_mcmc(
    logpdf: LogPdf,
    prop: ProposalSpec,
    rng: np.random.Generator,
    n_chains: int = 2,
    chain_length: int = 10000,
    burn_in_fraction: float = 0.2,
    thin: int = 2,
    inits: Optional[np.ndarray] = None,
) -> SampleSet:
    """
    Independent MH chains; drop burn-in, keep every ``thin``-th sample and pool.

    With the defaults the pooled set has 2 * (10000 * 0.8 / 2) = 8000 samples.
    """
    inits = _default_inits(rng, n_chains, prop.dim) if inits is None else np.asarray(inits, dtype=float)
    chains = [
        mh_chain(logpdf, init, prop, chain_length, chain_rng)
        for init, chain_rng in zip(inits, _chain_rngs(rng, n_chains))
    ]
    result = _collect(chains, burn_in_fraction, thin, {"sampler": "mh", "proposal_scale": prop.scale})
    logger.info(
        f"[MCMC] {n_chains} chains x {chain_length}: acceptance "
        f"{', '.join(f'{r:.3f}' for r in result.acceptance_rates)}, {len(result)} samples kept"
    )
    return result


def run_two_stage_mcmc(
    logpdf_exact: LogPdf,
    logpdf_surrogate: LogPdf,
    prop: ProposalSpec,
    rng: np.random.Generator,
    n_chains: int = 2,
    chain_length: int = 10000,
    burn_in_fraction: float = 0.2,
    thin: int = 2,
    inits: Optional[np.ndarray] = None,
) -> SampleSet:
    """Same protocol as run_reference_mcmc with delayed-acceptance chains"""
    inits = _default_inits(rng, n_chains, prop.dim) if inits is None else np.asarray(inits, dtype=float)
    chains = [
        two_stage_mh(logpdf_exact, logpdf_surrogate, init, prop, chain_length, chain_rng)
        for init, chain_rng in zip(inits, _chain_rngs(rng, n_chains))
    ]
    result = _collect(chains, burn_in_fraction, thin, {"sampler": "two-stage", "proposal_scale": prop.scale})
    logger.info(
        f"[MCMC] two-stage {n_chains} chains x {chain_length}: {result.n_evaluations} exact evaluations, "
        f"acceptance {', '.join(f'{r:.3f}' for r in result.acceptance_rates)}"
    )
    return result


def save_sample_set(directory: Path, name: str, sample_set: SampleSet):
    """Samples as CSV (one per row) and metadata as JSON"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = ",".join(f"z{i + 1}" for i in range(sample_set.samples.shape[1]))
    np.savetxt(directory / f"{name}.csv", sample_set.samples, delimiter=",", header=header, comments="", fmt="%.17g")
    (directory / f"{name}.json").write_text(json.dumps(sample_set.to_dict(), indent=2, sort_keys=True))


def load_sample_set(directory: Path, name: str) -> SampleSet:
    directory = Path(directory)
    samples = np.loadtxt(directory / f"{name}.csv", delimiter=",", skiprows=1, ndmin=2)
    meta = json.loads((directory / f"{name}.json").read_text())
    diag = meta.get("diagnostics")
    diagnostics = None
    if diag is not None:
        diagnostics = Diagnostics(
            np.asarray(diag["gelman_rubin"]),
            diag["gelman_rubin_degenerate"],
            [np.asarray(z) for z in diag["geweke"]],
            diag["geweke_degenerate"],
        )
    return SampleSet(
        samples=samples,
        diagnostics=diagnostics,
        acceptance_rates=meta["acceptance_rates"],
        n_evaluations=meta["n_evaluations"],
        n_init_evaluations=meta["n_init_evaluations"],
        n_surrogate_evaluations=meta.get("n_surrogate_evaluations", 0),
        metadata=meta.get("metadata", {}),
    )
