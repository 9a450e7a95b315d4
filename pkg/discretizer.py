"""
Discretizer
Builds the canonical numeric output space of a target law: fixed-point
strings at d decimals over the [0.001, 0.999] quantile interval, with
CDF-difference masses and edge bins absorbing the tails.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

import dist_engine
from dist_engine import DistributionSpec

logger = logging.getLogger(__name__)

QUANTILE_LOW = 0.001
QUANTILE_HIGH = 0.999
MAX_DECIMALS = 6
# grid snapping slack, in units of 10^-d
GRID_SLACK = 1.0e-6


class DegenerateTargetError(ValueError):
    """Raised when the quantile interval holds no canonical value."""

    def __init__(self, message: str = "Target distribution has an empty output interval"):
        super().__init__(message)


def format_canonical(units: int, decimals: int) -> str:
    """Render an integer count of 10^-decimals as a fixed-point string."""
    units = int(units)
    if decimals == 0:
        return str(units)
    sign = '-' if units < 0 else ''
    whole, frac = divmod(abs(units), 10 ** decimals)
    return f"{sign}{whole}.{frac:0{decimals}d}"


@dataclass(frozen=True, eq=False)
class OutputSpace:
    canonicals: Tuple[str, ...]
    masses: np.ndarray
    centers: np.ndarray
    decimals: int
    max_bins: int
    bounds: Tuple[float, float]
    is_discrete: bool
    spec: Optional[DistributionSpec] = None
    cumulative: np.ndarray = field(init=False, repr=False)
    last_positive: int = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, 'cumulative', np.cumsum(self.masses))
        positive = np.flatnonzero(self.masses > 0)
        object.__setattr__(self, 'last_positive', int(positive[-1]) if len(positive) else len(self.masses) - 1)

    def __len__(self) -> int:
        return len(self.canonicals)

    @property
    def entries(self) -> List[Tuple[str, float, float]]:
        return [(c, float(m), float(x)) for c, m, x in zip(self.canonicals, self.masses, self.centers)]

    def mass_of(self, canonical: str) -> float:
        try:
            return float(self.masses[self.canonicals.index(canonical)])
        except ValueError:
            return 0.0

    def as_mapping(self) -> Dict[str, float]:
        return {c: float(m) for c, m in zip(self.canonicals, self.masses)}

    def positive_entries(self) -> List[Tuple[str, float]]:
        return [(c, float(m)) for c, m in zip(self.canonicals, self.masses) if m > 0]

    def to_record(self) -> Dict:
        return {
            'family': self.spec.family if self.spec else None,
            'params': self.spec.as_dict() if self.spec else None,
            'decimals': self.decimals,
            'max_bins': self.max_bins,
            'bounds': [float(self.bounds[0]), float(self.bounds[1])],
            'is_discrete': self.is_discrete,
            'entries': [{'canonical': c, 'mass': float(m), 'center': float(x)}
                        for c, m, x in zip(self.canonicals, self.masses, self.centers)],
        }

    @classmethod
    def from_record(cls, record: Mapping) -> 'OutputSpace':
        spec = None
        if record.get('family'):
            spec = DistributionSpec(record['family'], record.get('params') or {})
        entries = record['entries']
        return cls(
            canonicals=tuple(e['canonical'] for e in entries),
            masses=np.array([e['mass'] for e in entries], dtype=float),
            centers=np.array([e['center'] for e in entries], dtype=float),
            decimals=int(record['decimals']),
            max_bins=int(record['max_bins']),
            bounds=(float(record['bounds'][0]), float(record['bounds'][1])),
            is_discrete=bool(record['is_discrete']),
            spec=spec,
        )

    @classmethod
    def from_masses(cls, masses: Mapping[str, float], decimals: int = 0) -> 'OutputSpace':
        """Hand-built space, mostly for tests and tabular targets."""
        items = sorted(masses.items(), key=lambda kv: float(kv[0]))
        centers = np.array([float(c) for c, _ in items])
        return cls(
            canonicals=tuple(c for c, _ in items),
            masses=np.array([m for _, m in items], dtype=float),
            centers=centers,
            decimals=decimals,
            max_bins=max(len(items), 2),
            bounds=(float(centers[0]), float(centers[-1])),
            is_discrete=decimals == 0,
        )


def capped_indices(grid_size: int, max_bins: int) -> np.ndarray:
    """round(j * (G - 1) / (B - 1)) for j = 0..B-1, rounding halves up."""
    if grid_size <= max_bins:
        return np.arange(grid_size, dtype=np.int64)
    j = np.arange(max_bins, dtype=np.int64)
    return (2 * j * (grid_size - 1) + (max_bins - 1)) // (2 * (max_bins - 1))


def _check_args(decimals: int, max_bins: int):
    if not 0 <= int(decimals) <= MAX_DECIMALS:
        raise ValueError(f"decimals must lie in [0, {MAX_DECIMALS}], got {decimals}")
    if int(max_bins) < 2:
        raise ValueError(f"max_bins must be >= 2, got {max_bins}")


def build_output_space(spec: DistributionSpec, decimals: int, max_bins: int) -> OutputSpace:
    _check_args(decimals, max_bins)
    info = dist_engine.support(spec)
    if info.is_discrete:
        space = _discrete_space(spec, info, int(decimals), int(max_bins))
    else:
        space = _continuous_space(spec, info, int(decimals), int(max_bins))
    logger.debug(f"[SPACE] {spec!r} d={decimals} max_bins={max_bins}: {len(space)} entries")
    return space


def _discrete_space(spec, info, decimals: int, max_bins: int) -> OutputSpace:
    if math.isfinite(info.lower) and math.isfinite(info.upper):
        values = np.arange(int(info.lower), int(info.upper) + 1, dtype=float)
        if len(values) > max_bins:
            values = values[:max_bins]
            masses = np.asarray(dist_engine.density(spec, values[:-1]), dtype=float)
            masses = np.append(masses, max(0.0, 1.0 - float(masses.sum())))
        else:
            masses = np.asarray(dist_engine.density(spec, values), dtype=float)
    else:
        lo = float(dist_engine.ppf(spec, QUANTILE_LOW))
        hi = float(dist_engine.ppf(spec, QUANTILE_HIGH))
        if hi < lo:
            raise DegenerateTargetError(f"{spec!r}: empty quantile interval [{lo}, {hi}]")
        hi = min(hi, lo + max_bins - 1)
        values = np.arange(int(lo), int(hi) + 1, dtype=float)
        # lower tail joins the first value, upper tail the last
        inner = np.asarray(dist_engine.cdf(spec, values[:-1]), dtype=float)
        inner = np.maximum.accumulate(inner) if len(inner) else inner
        masses = np.diff(np.concatenate(([0.0], inner, [1.0])))
        masses = np.maximum(masses, 0.0)
    canonicals = tuple(format_canonical(int(v), 0) for v in values)
    return OutputSpace(
        canonicals=canonicals,
        masses=masses,
        centers=values,
        decimals=decimals,
        max_bins=max_bins,
        bounds=(float(values[0]), float(values[-1])),
        is_discrete=True,
        spec=spec,
    )


def _continuous_space(spec, info, decimals: int, max_bins: int) -> OutputSpace:
    lo = max(float(dist_engine.ppf(spec, QUANTILE_LOW)), info.lower)
    hi = min(float(dist_engine.ppf(spec, QUANTILE_HIGH)), info.upper)
    if not lo < hi:
        raise DegenerateTargetError(f"{spec!r}: empty quantile interval [{lo}, {hi}]")
    scale = 10 ** decimals
    k_lo = math.ceil(lo * scale - GRID_SLACK)
    k_hi = math.floor(hi * scale + GRID_SLACK)
    if k_hi < k_lo:
        raise DegenerateTargetError(f"{spec!r}: no {decimals}-decimal grid point inside [{lo}, {hi}]")
    grid_size = k_hi - k_lo + 1
    units = k_lo + capped_indices(grid_size, max_bins)
    centers = units / scale
    if len(units) == 1:
        masses = np.ones(1)
    else:
        edges = 0.5 * (centers[:-1] + centers[1:])
        inner = np.maximum.accumulate(np.asarray(dist_engine.cdf(spec, edges), dtype=float))
        masses = np.maximum(np.diff(np.concatenate(([0.0], inner, [1.0]))), 0.0)
    if grid_size > max_bins:
        logger.debug(f"[SPACE] {spec!r}: capped {grid_size} grid points to {max_bins}")
    return OutputSpace(
        canonicals=tuple(format_canonical(u, decimals) for u in units),
        masses=masses,
        centers=centers,
        decimals=decimals,
        max_bins=max_bins,
        bounds=(lo, hi),
        is_discrete=False,
        spec=spec,
    )


def sample_canonical(space: OutputSpace, rng: np.random.Generator) -> str:
    """Inverse-CDF draw of one canonical string."""
    idx = int(np.searchsorted(space.cumulative, rng.random(), side='right'))
    return space.canonicals[min(idx, space.last_positive)]


def sample_stratified(space: OutputSpace, rng: np.random.Generator, n: int) -> List[str]:
    """n inverse-CDF draws, one uniform per stratum [k/n, (k+1)/n), in random order.

    Each draw on its own is distributed as the space; together they cover the
    CDF evenly, so the empirical law of the n draws is within 1/n of the target.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    u = (rng.permutation(n) + rng.random(n)) / n
    idx = np.minimum(np.searchsorted(space.cumulative, u, side='right'), space.last_positive)
    return [space.canonicals[int(i)] for i in idx]
