"""
Aliev-Panfilov forward model on a 2D lattice

Simulates transmembrane potential on an nx-by-ny lattice with isotropic
diffusion, projects it to lead measurements through a linear lead field, and
scores simulated measurements against observations with a Gaussian likelihood.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import List, Optional

import numpy as np

from backend.errors import DimensionMismatchError, NumericalInstabilityError

logger = logging.getLogger(__name__)

THETA_MIN = 0.0
THETA_MAX = 0.5


@dataclass(frozen=True)
class GridGeometry:
    """Regular 4-neighbour lattice. Node index = iy * nx + ix."""

    nx: int = 24
    ny: int = 24
    h: float = 0.25

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"Lattice must be at least 4x4, got {self.nx}x{self.ny}")
        if self.h <= 0:
            raise ValueError(f"Node spacing must be positive, got {self.h}")

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def center_node(self) -> int:
        return (self.ny // 2) * self.nx + self.nx // 2

    def node_index(self, ix: int, iy: int) -> int:
        return iy * self.nx + ix

    @cached_property
    def coordinates(self) -> np.ndarray:
        """(N, 2) physical node positions"""
        iy, ix = np.divmod(np.arange(self.n_nodes), self.nx)
        return np.column_stack([ix, iy]).astype(float) * self.h

    @cached_property
    def adjacency(self) -> List[np.ndarray]:
        """Neighbour index arrays per node (no wrap-around)"""
        neighbours = []
        for node in range(self.n_nodes):
            iy, ix = divmod(node, self.nx)
            nbrs = []
            if ix > 0:
                nbrs.append(node - 1)
            if ix < self.nx - 1:
                nbrs.append(node + 1)
            if iy > 0:
                nbrs.append(node - self.nx)
            if iy < self.ny - 1:
                nbrs.append(node + self.nx)
            neighbours.append(np.array(nbrs, dtype=int))
        return neighbours

    def bfs_distances(self, site: int) -> np.ndarray:
        """Lattice (hop) distance from ``site`` to every node"""
        if not 0 <= site < self.n_nodes:
            raise ValueError(f"Node {site} outside lattice of {self.n_nodes} nodes")
        dist = np.full(self.n_nodes, -1, dtype=int)
        dist[site] = 0
        queue = deque([site])
        while queue:
            node = queue.popleft()
            for nbr in self.adjacency[node]:
                if dist[nbr] < 0:
                    dist[nbr] = dist[node] + 1
                    queue.append(nbr)
        return dist

    def normalized_coordinates(self) -> np.ndarray:
        """Node positions scaled to the unit square"""
        iy, ix = np.divmod(np.arange(self.n_nodes), self.nx)
        return np.column_stack([ix / (self.nx - 1), iy / (self.ny - 1)])

    def to_dict(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "h": self.h}


@dataclass(frozen=True)
class ApParams:
    """Aliev-Panfilov coefficients and integration settings"""

    c: float = 8.0
    e0: float = 0.002
    mu1: float = 0.2
    mu2: float = 0.3
    d_iso: float = 0.1
    dt: float = 0.05
    t_end: float = 60.0
    record_stride: int = 4

    def __post_init__(self):
        for name in ("c", "e0", "mu1", "mu2", "d_iso", "dt", "t_end"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ApParams.{name} must be positive")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def max_stable_dt(self, geom: GridGeometry) -> float:
        return geom.h ** 2 / (4.0 * self.d_iso)

    def check_stability(self, geom: GridGeometry):
        """Raise if explicit Euler would be unstable on this lattice"""
        limit = self.max_stable_dt(geom)
        if self.dt > limit:
            raise ValueError(
                f"dt={self.dt} violates the explicit stability bound h^2/(4 d_iso)={limit:.4g}"
            )


@dataclass(frozen=True)
class StimulusProtocol:
    """Instantaneous patch stimulus: u := value within ``radius`` hops of ``site`` at ``t_on``"""

    site: int
    radius: int = 2
    value: float = 1.0
    t_on: float = 0.0

    def __post_init__(self):
        if self.site < 0:
            raise ValueError("Stimulus site must be a node index")
        if self.radius < 0:
            raise ValueError("Stimulus radius must be >= 0")
        if not 0.0 < self.value <= 1.0:
            raise ValueError(f"Stimulus value must lie in (0, 1], got {self.value}")
        if self.t_on < 0:
            raise ValueError("Stimulus onset must be >= 0")

    def patch(self, geom: GridGeometry) -> np.ndarray:
        if self.site >= geom.n_nodes:
            raise ValueError(f"Stimulus site {self.site} outside lattice of {geom.n_nodes} nodes")
        return np.flatnonzero(geom.bfs_distances(self.site) <= self.radius)


@dataclass
class SimState:
    u: np.ndarray
    v: np.ndarray

    @classmethod
    def at_rest(cls, n_nodes: int) -> "SimState":
        return cls(np.zeros(n_nodes), np.zeros(n_nodes))


@dataclass(frozen=True)
class LeadField:
    matrix: np.ndarray

    @property
    def n_leads(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class MeasurementSeries:
    """L leads by T_rec recorded frames"""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DimensionMismatchError("MeasurementSeries must be a 2D (leads x frames) array")
        if not np.all(np.isfinite(self.values)):
            raise NumericalInstabilityError("MeasurementSeries contains non-finite entries")

    @property
    def n_leads(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class LikelihoodConfig:
    sigma_e: float

    def __post_init__(self):
        if not self.sigma_e > 0:
            raise ValueError(f"sigma_e must be positive, got {self.sigma_e}")


@dataclass(frozen=True)
class ForwardModelConfig:
    """Everything needed to turn an excitability field into measurements.

    The explicit-Euler stability bound is checked here, where the lattice
    spacing and the diffusion coefficient first meet.
    """

    geometry: GridGeometry
    params: ApParams
    stimulus: Optional[StimulusProtocol]
    lead_field: LeadField = field(repr=False)

    def __post_init__(self):
        self.params.check_stability(self.geometry)
        if self.lead_field.matrix.shape[1] != self.geometry.n_nodes:
            raise DimensionMismatchError(
                f"Lead field has {self.lead_field.matrix.shape[1]} columns, lattice has {self.geometry.n_nodes} nodes"
            )

    def measure(self, theta: np.ndarray) -> MeasurementSeries:
        frames = simulate_ap(self.geometry, theta, self.params, self.stimulus)
        return apply_lead_field(self.lead_field, frames)


def check_field(theta: np.ndarray, n_nodes: Optional[int] = None, upper: float = THETA_MAX) -> np.ndarray:
    """Validate an excitability field and return it as a float array"""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1:
        raise DimensionMismatchError("Excitability field must be a vector")
    if n_nodes is not None and theta.shape[0] != n_nodes:
        raise DimensionMismatchError(f"Field has {theta.shape[0]} nodes, lattice has {n_nodes}")
    if not np.all(np.isfinite(theta)) or theta.min() < THETA_MIN or theta.max() > upper:
        raise ValueError(f"Excitability values must lie in [{THETA_MIN}, {upper}]")
    return theta


def simulate_ap(
    geom: GridGeometry,
    theta: np.ndarray,
    params: ApParams,
    stim: Optional[StimulusProtocol] = None,
    initial: Optional[SimState] = None,
) -> np.ndarray:
    """
    Integrate the two-variable Aliev-Panfilov model with explicit Euler.

    Args:
        geom: Lattice geometry
        theta: Excitability per node, each in [0, 0.5] (plus generation noise)
        params: Model coefficients and integration settings
        stim: Patch stimulus, or None for an unstimulated run
        initial: Starting state (defaults to rest)

    Returns:
        (T_rec, N) array of u, one row every ``record_stride`` steps from t=0 to t_end
    """
    # generated fields carry up to 0.001 of uniform noise above the prior bound
    theta = check_field(theta, geom.n_nodes, upper=THETA_MAX + 1e-3)
    params.check_stability(geom)

    state = initial or SimState.at_rest(geom.n_nodes)
    u = state.u.astype(float).reshape(geom.ny, geom.nx).copy()
    v = state.v.astype(float).reshape(geom.ny, geom.nx).copy()
    th = theta.reshape(geom.ny, geom.nx)

    patch = stim.patch(geom) if stim is not None else None
    stim_step = int(round(stim.t_on / params.dt)) if stim is not None else -1

    # ghost layer mirrors the edge nodes: zero-flux boundary
    padded = np.empty((geom.ny + 2, geom.nx + 2))
    inv_h2 = 1.0 / geom.h ** 2
    c, dt = params.c, params.dt

    frames = []
    for step in range(params.n_steps + 1):
        if step == stim_step:
            u.reshape(-1)[patch] = stim.value
        if step % params.record_stride == 0:
            frames.append(u.ravel().copy())
        if step == params.n_steps:
            break

        padded[1:-1, 1:-1] = u
        padded[0, 1:-1] = u[0]
        padded[-1, 1:-1] = u[-1]
        padded[1:-1, 0] = u[:, 0]
        padded[1:-1, -1] = u[:, -1]
        lap = (
            padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:] - 4.0 * u
        ) * inv_h2

        du = params.d_iso * lap - c * u * (u - th) * (u - 1.0) - u * v
        eps = params.e0 + params.mu1 * v / (u + params.mu2)
        dv = eps * (-v - c * u * (u - th - 1.0))
        u = u + dt * du
        v = v + dt * dv

        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise NumericalInstabilityError(f"Non-finite state at step {step + 1}", step=step + 1)

    return np.asarray(frames)


def apply_lead_field(H: LeadField, u_frames: np.ndarray) -> MeasurementSeries:
    """Project each recorded frame through the lead field: Y[:, k] = H u_k"""
    u_frames = np.atleast_2d(np.asarray(u_frames, dtype=float))
    if H.matrix.shape[1] != u_frames.shape[1]:
        raise DimensionMismatchError(
            f"Lead field expects {H.matrix.shape[1]} nodes, frames have {u_frames.shape[1]}"
        )
    return MeasurementSeries(H.matrix @ u_frames.T)


def noise_std_for_snr(Y: MeasurementSeries, snr_db: float) -> float:
    """Noise standard deviation giving ``snr_db`` against the mean-square signal power"""
    if np.isnan(snr_db):
        raise ValueError("snr_db must be a number")
    if np.isposinf(snr_db):
        return 0.0
    power = float(np.mean(Y.values ** 2))
    return float(np.sqrt(power / 10.0 ** (snr_db / 10.0)))


def add_measurement_noise(Y: MeasurementSeries, snr_db: float, rng: np.random.Generator) -> MeasurementSeries:
    std = noise_std_for_snr(Y, snr_db)
    if std == 0.0:
        return MeasurementSeries(Y.values.copy())
    return MeasurementSeries(Y.values + rng.normal(0.0, std, size=Y.values.shape))


def log_likelihood(y_obs: MeasurementSeries, y_sim: MeasurementSeries, cfg: LikelihoodConfig) -> float:
    """Unnormalized Gaussian log-likelihood -||y_obs - y_sim||^2 / (2 sigma_e^2)"""
    if y_obs.values.shape != y_sim.values.shape:
        raise DimensionMismatchError(
            f"Observed shape {y_obs.values.shape} differs from simulated {y_sim.values.shape}"
        )
    resid = y_obs.values - y_sim.values
    return float(-np.sum(resid * resid) / (2.0 * cfg.sigma_e ** 2))


def build_lead_field(geom: GridGeometry, n_leads: int, seed: int) -> LeadField:
    """
    Inverse-distance lead field from virtual electrodes on a circle around the lattice.

    Electrodes sit on a circle 1.25x the lattice half-diagonal from its centre,
    evenly spaced with a seeded rotation and angular jitter. Rows are scaled to
    unit Euclidean norm.
    """
    if n_leads < 1:
        raise ValueError("n_leads must be >= 1")
    rng = np.random.default_rng(seed)

    coords = geom.coordinates
    centre = coords.mean(axis=0)
    half_diag = 0.5 * np.hypot(*(coords.max(axis=0) - coords.min(axis=0)))
    radius = 1.25 * half_diag

    spacing = 2.0 * np.pi / n_leads
    angles = rng.uniform(0.0, spacing) + spacing * np.arange(n_leads)
    angles = angles + rng.uniform(-0.25, 0.25, size=n_leads) * spacing
    electrodes = centre + radius * np.column_stack([np.cos(angles), np.sin(angles)])

    dist = np.linalg.norm(electrodes[:, None, :] - coords[None, :, :], axis=2)
    H = 1.0 / dist
    H /= np.linalg.norm(H, axis=1, keepdims=True)
    return LeadField(H)


def activation_times(u_frames: np.ndarray, record_dt: float, threshold: float = 0.5) -> np.ndarray:
    """First recorded time each node's potential exceeds ``threshold``; inf if never"""
    above = u_frames > threshold
    first = np.argmax(above, axis=0).astype(float)
    first[~above.any(axis=0)] = np.inf
    return first * record_dt


def resample_field(theta: np.ndarray, source: GridGeometry, target: GridGeometry) -> np.ndarray:
    """Nearest-node transfer of a field (or a batch of fields) between lattices in normalized coordinates"""
    if source == target:
        return np.asarray(theta, dtype=float)
    src = source.normalized_coordinates()
    dst = target.normalized_coordinates()
    d2 = ((dst[:, None, :] - src[None, :, :]) ** 2).sum(axis=2)
    return np.asarray(theta, dtype=float)[..., np.argmin(d2, axis=1)]


def save_frames_csv(path: Path, u_frames: np.ndarray, record_dt: float):
    """One row per frame; the header records dimensions and frame spacing"""
    u_frames = np.atleast_2d(u_frames)
    header = f"n_frames={u_frames.shape[0]},n_nodes={u_frames.shape[1]},record_dt={record_dt!r}"
    np.savetxt(path, u_frames, delimiter=",", header=header, fmt="%.17g")


def save_measurements_csv(path: Path, Y: MeasurementSeries):
    """One row per frame (leads as columns)"""
    header = f"n_frames={Y.n_frames},n_leads={Y.n_leads}"
    np.savetxt(path, Y.values.T, delimiter=",", header=header, fmt="%.17g")


def load_measurements_csv(path: Path) -> MeasurementSeries:
    values = np.loadtxt(path, delimiter=",", ndmin=2)
    return MeasurementSeries(values.T.copy())


def save_lead_field_csv(path: Path, H: LeadField):
    header = f"n_leads={H.n_leads},n_nodes={H.matrix.shape[1]}"
    np.savetxt(path, H.matrix, delimiter=",", header=header, fmt="%.17g")


def load_lead_field_csv(path: Path) -> LeadField:
    return LeadField(np.loadtxt(path, delimiter=",", ndmin=2))
