"""
Synthetic excitability fields

Training fields come from random region growing on the lattice; test fields
mark angular sectors of the lattice as abnormal, the lattice counterpart of
combinations of anatomical segments.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import FrozenSet, Iterator, List, Tuple

import numpy as np

from backend.errors import RegionGrowthError
from backend.simulation.forward_model import GridGeometry

logger = logging.getLogger(__name__)

HEALTHY_THETA = 0.15
INJURED_THETA = 0.5
FIELD_NOISE = 0.001
N_SECTORS = 8
SEVERITIES = (0.40, 0.45, 0.50)


@dataclass(frozen=True)
class RegionMask:
    mask: np.ndarray

    @property
    def size(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class SectorSpec:
    sector_ids: FrozenSet[int]
    severity: float

    def __post_init__(self):
        ids = frozenset(int(s) for s in self.sector_ids)
        object.__setattr__(self, "sector_ids", ids)
        if not ids:
            raise ValueError("SectorSpec needs at least one sector")
        if min(ids) < 0 or max(ids) >= N_SECTORS:
            raise ValueError(f"Sector ids must lie in [0, {N_SECTORS - 1}]")
        if not any(abs(self.severity - s) < 1e-9 for s in SEVERITIES):
            raise ValueError(f"Severity must be one of {SEVERITIES}, got {self.severity}")

    def to_dict(self) -> dict:
        return {"sector_ids": sorted(self.sector_ids), "severity": self.severity}


@dataclass
class TrainingSet:
    """Generated training fields with the generation metadata of each field"""

    fields: np.ndarray
    lesion_sizes: np.ndarray
    seed_nodes: np.ndarray

    def __len__(self) -> int:
        return self.fields.shape[0]

    def __getitem__(self, idx) -> np.ndarray:
        return self.fields[idx]

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.fields)


def grow_region(geom: GridGeometry, seed_node: int, target_size: int, rng: np.random.Generator) -> RegionMask:
    """
    Grow a connected region from ``seed_node`` one lattice neighbour at a time.

    At each step one node is drawn uniformly from the unmasked neighbours of
    the current region (the frontier).
    """
    n = geom.n_nodes
    if not 1 <= target_size <= n:
        raise ValueError(f"target_size must lie in [1, {n}], got {target_size}")
    if not 0 <= seed_node < n:
        raise ValueError(f"seed_node {seed_node} outside lattice")

    mask = np.zeros(n, dtype=bool)
    mask[seed_node] = True
    frontier: List[int] = []
    in_frontier = np.zeros(n, dtype=bool)

    def push_neighbours(node: int):
        for nbr in geom.adjacency[node]:
            if not mask[nbr] and not in_frontier[nbr]:
                in_frontier[nbr] = True
                frontier.append(int(nbr))

    push_neighbours(seed_node)
    size = 1
    while size < target_size:
        if not frontier:
            raise RegionGrowthError(f"Region trapped at {size} nodes, target was {target_size}")
        pick = int(rng.integers(len(frontier)))
        frontier[pick], frontier[-1] = frontier[-1], frontier[pick]
        node = frontier.pop()
        in_frontier[node] = False
        mask[node] = True
        size += 1
        push_neighbours(node)

    return RegionMask(mask)


def make_training_field(mask: RegionMask, rng: np.random.Generator) -> np.ndarray:
    """0.5 on the region, 0.15 elsewhere, plus U[0, 0.001] noise per node"""
    base = np.where(mask.mask, INJURED_THETA, HEALTHY_THETA)
    return base + rng.uniform(0.0, FIELD_NOISE, size=base.shape)


def sector_of_nodes(geom: GridGeometry) -> np.ndarray:
    """Angular sector (0..7) of every node about the lattice centre"""
    coords = geom.coordinates
    centre = 0.5 * (coords.min(axis=0) + coords.max(axis=0))
    dx, dy = (coords - centre).T
    angle = np.mod(np.arctan2(dy, dx), 2.0 * np.pi)
    return np.minimum((angle / (2.0 * np.pi / N_SECTORS)).astype(int), N_SECTORS - 1)


def make_test_field(geom: GridGeometry, spec: SectorSpec, rng: np.random.Generator) -> np.ndarray:
    abnormal = np.isin(sector_of_nodes(geom), sorted(spec.sector_ids))
    base = np.where(abnormal, spec.severity, HEALTHY_THETA)
    return base + rng.uniform(0.0, FIELD_NOISE, size=base.shape)


def default_size_range(geom: GridGeometry, fractions: Tuple[float, float] = (0.05, 0.40)) -> Tuple[int, int]:
    lo = max(1, int(round(fractions[0] * geom.n_nodes)))
    hi = max(lo, int(round(fractions[1] * geom.n_nodes)))
    return lo, hi


def generate_training_set(
    geom: GridGeometry,
    count: int,
    size_range: Tuple[int, int],
    rng: np.random.Generator,
) -> TrainingSet:
    """
    Draw ``count`` region-grown fields.

    Args:
        geom: Lattice
        count: Number of fields
        size_range: Inclusive (min, max) lesion size in nodes
        rng: Source of randomness; the set is a pure function of its state

    Returns:
        TrainingSet with fields, lesion sizes and seed nodes
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = size_range
    if not 1 <= lo <= hi <= geom.n_nodes:
        raise ValueError(f"Invalid size range {size_range} for {geom.n_nodes} nodes")

    fields = np.empty((count, geom.n_nodes))
    sizes = np.empty(count, dtype=int)
    seeds = np.empty(count, dtype=int)
    for i in range(count):
        seeds[i] = rng.integers(geom.n_nodes)
        sizes[i] = rng.integers(lo, hi + 1)
        region = grow_region(geom, int(seeds[i]), int(sizes[i]), rng)
        fields[i] = make_training_field(region, rng)

    logger.info(f"[DataGen] Generated {count} training fields, lesion sizes {lo}-{hi} nodes")
    return TrainingSet(fields, sizes, seeds)


def save_training_set(csv_path: Path, training_set: TrainingSet, metadata: dict):
    """One field per CSV row, with a JSON sidecar recording how the set was made"""
    csv_path = Path(csv_path)
    np.savetxt(csv_path, training_set.fields, delimiter=",", fmt="%.17g")
    sidecar = {
        **metadata,
        "count": len(training_set),
        "n_nodes": int(training_set.fields.shape[1]),
        "lesion_sizes": training_set.lesion_sizes.tolist(),
        "seed_nodes": training_set.seed_nodes.tolist(),
    }
    csv_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_training_set(csv_path: Path) -> Tuple[TrainingSet, dict]:
    csv_path = Path(csv_path)
    fields = np.loadtxt(csv_path, delimiter=",", ndmin=2)
    sidecar = json.loads(csv_path.with_suffix(".json").read_text())
    ts = TrainingSet(
        fields,
        np.asarray(sidecar["lesion_sizes"], dtype=int),
        np.asarray(sidecar["seed_nodes"], dtype=int),
    )
    return ts, sidecar
