"""
Benchmark Grid
Enumerates the prompt configurations of the calibration benchmark from the
family table in benchmark_families.json: train grids, unseen-parameter
test rows and the held-out OOD families, plus the natural-language prompt
stored with each configuration.
"""

import itertools
import json
import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import dist_engine
from dist_engine import DistributionSpec, ParameterDomainError

logger = logging.getLogger(__name__)

FAMILY_TABLE_PATH = Path(__file__).resolve().with_name('benchmark_families.json')

TRAIN = 'train'
UNSEEN = 'unseen-param-test'
OOD = 'ood-test'
SPLITS = (TRAIN, UNSEEN, OOD)
SPLIT_CODES = {TRAIN: 'tr', UNSEEN: 'up', OOD: 'ood'}

DEFAULT_RESOLUTION = 9
GRID_DECIMALS = 6

PROMPT_TEMPLATE = ("Generate exactly ONE random number from a {display} distribution "
                   "with parameters {params}. Output ONLY the number.")


class ConfigError(ValueError):
    """Raised for unknown families, bad grids, bad run configs or split leaks."""

    def __init__(self, message: str = "Invalid benchmark or run configuration"):
        super().__init__(message)


@lru_cache(maxsize=4)
def _read_table(path: str) -> Dict:
    with open(path, 'r', encoding='utf-8') as f:
        table = json.load(f)
    if table.get('version') != 1:
        raise ConfigError(f"Unsupported family table version {table.get('version')} in {path}")
    unknown = [f for f in table['families'] if f not in dist_engine.FAMILIES]
    if unknown:
        raise ConfigError(f"Family table lists unknown families {unknown}")
    return table


def load_family_table(path: Optional[Path] = None) -> Dict:
    return _read_table(str(path or FAMILY_TABLE_PATH))


def ood_families(table: Optional[Dict] = None) -> List[str]:
    return list((table or load_family_table())['ood_families'])


def display_name(family: str, table: Optional[Dict] = None) -> str:
    entry = (table or load_family_table())['families'].get(family, {})
    return entry.get('display', family)


def format_param_value(value: float) -> str:
    value = float(value)
    if value.is_integer():
        return str(int(value))
    return format(value, '.10g')


def render_prompt(config) -> str:
    """Natural-language prompt for a PromptConfig or DistributionSpec."""
    spec: DistributionSpec = getattr(config, 'spec', config)
    params = ', '.join(f"{k}={format_param_value(v)}" for k, v in spec.params)
    return PROMPT_TEMPLATE.format(display=display_name(spec.family), params=params)


@dataclass(frozen=True)
class PromptConfig:
    config_id: str
    spec: DistributionSpec
    split: str
    prompt: str
    tier: str = ''

    @property
    def family(self) -> str:
        return self.spec.family

    @property
    def params(self) -> Dict[str, float]:
        return self.spec.as_dict()

    def to_dict(self) -> Dict:
        return {
            'config_id': self.config_id,
            'family': self.family,
            'params': self.params,
            'split': self.split,
            'tier': self.tier,
            'prompt': self.prompt,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> 'PromptConfig':
        spec = DistributionSpec(data['family'], data.get('params', {}))
        return cls(data['config_id'], spec, data['split'], data.get('prompt') or render_prompt(spec),
                   data.get('tier', ''))


@dataclass
class BenchmarkGrid:
    """Which families and resolutions to enumerate.

    ``table_train`` limits which families contribute their table train grid
    (None means every selected family). ``custom_train`` / ``custom_test``
    entries are either ``{family, params}`` or ``{family, grid: {name: [values]}}``.
    """
    families: Optional[List[str]] = None
    resolution: int = DEFAULT_RESOLUTION
    resolutions: Dict[str, int] = field(default_factory=dict)
    table_train: Optional[List[str]] = None
    custom_train: List[Dict] = field(default_factory=list)
    custom_test: List[Dict] = field(default_factory=list)
    include_table_tests: bool = True

    @classmethod
    def from_dict(cls, data: Optional[Mapping]) -> 'BenchmarkGrid':
        data = data or {}
        grid = cls(
            families=list(data['families']) if data.get('families') else None,
            resolution=int(data.get('resolution', DEFAULT_RESOLUTION)),
            resolutions={k: int(v) for k, v in (data.get('resolutions') or {}).items()},
            table_train=list(data['table_train']) if data.get('table_train') is not None else None,
            custom_train=list(data.get('custom_train') or []),
            custom_test=list(data.get('custom_test') or []),
            include_table_tests=bool(data.get('include_table_tests', True)),
        )
        grid.validate()
        return grid

    def to_dict(self) -> Dict:
        return {
            'families': self.families,
            'resolution': self.resolution,
            'resolutions': dict(self.resolutions),
            'table_train': self.table_train,
            'custom_train': list(self.custom_train),
            'custom_test': list(self.custom_test),
            'include_table_tests': self.include_table_tests,
        }

    def validate(self):
        table = load_family_table()
        for fam in list(self.families or []) + list(self.table_train or []) + list(self.resolutions):
            if fam not in table['families']:
                raise ConfigError(f"Unknown family '{fam}' in benchmark grid")
        if self.resolution < 1 or any(r < 1 for r in self.resolutions.values()):
            raise ConfigError("Grid resolutions must be >= 1")

    def resolution_for(self, family: str) -> int:
        return self.resolutions.get(family, self.resolution)


def _round_half_up(value: float) -> int:
    return int(Decimal(str(value)).to_integral_value(rounding=ROUND_HALF_UP))


def _axis_values(axis: Mapping, resolution: int) -> List[float]:
    if 'values' in axis:
        return [float(v) for v in axis['values']]
    lo, hi = axis['range']
    return [float(v) for v in np.round(np.linspace(float(lo), float(hi), resolution), GRID_DECIMALS)]


def table_train_params(family: str, resolution: int, table: Optional[Dict] = None) -> List[Dict[str, float]]:
    """Cartesian product of a family's train axes, in axis order."""
    axes = (table or load_family_table())['families'][family].get('train') or {}
    names = list(axes)
    values = [_axis_values(axes[n], resolution) for n in names]
    out = []
    for combo in itertools.product(*values):
        params = dict(zip(names, combo))
        for name in names:
            ref = axes[name].get('fraction_of')
            if ref:
                # K/M fractions become integer counts
                params[name] = float(_round_half_up(Decimal(str(params[ref])) * Decimal(str(params[name]))))
        out.append(params)
    return out


def _expand_custom(entries: Sequence[Mapping]) -> List[Tuple[str, Dict[str, float]]]:
    out = []
    for entry in entries:
        family = entry.get('family')
        if family not in dist_engine.FAMILIES:
            raise ConfigError(f"Unknown family '{family}' in custom configs")
        if 'grid' in entry:
            names = list(entry['grid'])
            for combo in itertools.product(*[[float(v) for v in entry['grid'][n]] for n in names]):
                out.append((family, dict(zip(names, combo))))
        else:
            out.append((family, {k: float(v) for k, v in (entry.get('params') or {}).items()}))
    return out


def _make_spec(family: str, params: Mapping[str, float]) -> DistributionSpec:
    try:
        return DistributionSpec(family, params)
    except ParameterDomainError as e:
        raise ConfigError(f"Invalid benchmark parameters: {e}")


def generate_benchmark(run) -> List[PromptConfig]:
    """Deterministic list of PromptConfigs: train first, then unseen, then OOD.

    Accepts a BenchmarkGrid or anything carrying one as ``.benchmark``.
    """
    grid: BenchmarkGrid = getattr(run, 'benchmark', run)
    grid.validate()
    table = load_family_table()
    fam_table = table['families']
    ood = set(table['ood_families'])
    selected = list(grid.families) if grid.families else list(fam_table)
    table_train = set(selected if grid.table_train is None else grid.table_train)

    rows: Dict[str, List[Tuple[str, DistributionSpec]]] = {s: [] for s in SPLITS}
    for family in selected:
        if family in table_train and fam_table[family].get('train'):
            for params in table_train_params(family, grid.resolution_for(family), table):
                rows[TRAIN].append((family, _make_spec(family, params)))
    for family, params in _expand_custom(grid.custom_train):
        rows[TRAIN].append((family, _make_spec(family, params)))

    seen = {family for family, _ in rows[TRAIN]}
    train_specs = {spec for _, spec in rows[TRAIN]}

    candidates: List[Tuple[str, DistributionSpec]] = []
    if grid.include_table_tests:
        for family in selected:
            entry = fam_table[family]
            for params in entry.get('test', []):
                if family in seen:
                    candidates.append((family, _make_spec(family, params)))
                else:
                    logger.warning(f"[BENCH] skipping test row of untrained family {family}")
            for params in entry.get('ood', []):
                spec = _make_spec(family, params)
                if family in seen:
                    candidates.append((family, spec))
                else:
                    rows[OOD].append((family, spec))
    for family, params in _expand_custom(grid.custom_test):
        candidates.append((family, _make_spec(family, params)))

    for family, spec in candidates:
        if spec in train_specs:
            logger.info(f"[BENCH] dropping test config {spec!r}: duplicates a train config")
            continue
        if family not in seen:
            if family in ood:
                rows[OOD].append((family, spec))
            else:
                logger.warning(f"[BENCH] skipping custom test {spec!r}: family never trained")
            continue
        rows[UNSEEN].append((family, spec))

    configs: List[PromptConfig] = []
    for split in SPLITS:
        counters: Dict[str, int] = {}
        emitted = set()
        for family, spec in rows[split]:
            if spec in emitted:
                continue
            emitted.add(spec)
            k = counters.get(family, 0)
            counters[family] = k + 1
            configs.append(PromptConfig(
                config_id=f"{family}-{SPLIT_CODES[split]}-{k:03d}",
                spec=spec,
                split=split,
                prompt=render_prompt(spec),
                tier=fam_table.get(family, {}).get('tier', ''),
            ))
    check_split_hygiene(configs, table)
    logger.info(f"[BENCH] generated {len(configs)} configs: " + ', '.join(
        f"{s}={sum(1 for c in configs if c.split == s)}" for s in SPLITS))
    return configs


def check_split_hygiene(configs: Sequence[PromptConfig], table: Optional[Dict] = None):
    table = table or load_family_table()
    train_specs = {c.spec for c in configs if c.split == TRAIN}
    seen = {c.family for c in configs if c.split == TRAIN}
    ood = set(table['ood_families'])
    for c in configs:
        if c.split == OOD and (c.family in seen or c.family not in ood):
            raise ConfigError(f"{c.config_id}: ood-test config from a trained or non-OOD family")
        if c.split == UNSEEN and (c.spec in train_specs or c.family not in seen):
            raise ConfigError(f"{c.config_id}: unseen-param-test config leaks into train")
    ids = [c.config_id for c in configs]
    if len(set(ids)) != len(ids):
        raise ConfigError("Duplicate config ids in benchmark")


def expected_train_count(resolution: int, table: Optional[Dict] = None) -> int:
    """Number of table train configs when every family uses one resolution."""
    table = table or load_family_table()
    return sum(len(table_train_params(f, resolution, table))
               for f, entry in table['families'].items() if entry.get('train'))


def split_configs(configs: Sequence[PromptConfig], split: str) -> List[PromptConfig]:
    return [c for c in configs if c.split == split]
