"""
Calibration Evaluator
Structured-sampling metrics (valid rate, order-statistic W1 and its
normalized form, logit KL against the evaluation trie), the stochastic
behaviour metrics (TV to uniform, top-90% support size, unique fraction),
ancestral sampling from a model, and per-family aggregation into reports.
"""

import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

import dist_engine
from dist_engine import DistributionSpec, SupportInfo
from discretizer import build_output_space
from token_trie import TokenTrie, Vocabulary, build_trie, detokenize, encode_prompt
from toy_model import path_kl, softmax

logger = logging.getLogger(__name__)

UNDEFINED = '---'
NUMERIC_LITERAL = re.compile(r'^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$')
MASS_TOLERANCE = 1.0e-9


class EvaluationError(RuntimeError):
    """Raised when a condition cannot be evaluated."""

    def __init__(self, message: str = "Evaluation failed"):
        super().__init__(message)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def parse_numeric(text: str) -> Optional[float]:
    """Value of a bare finite decimal or scientific literal, else None."""
    if text is None:
        return None
    stripped = str(text).strip()
    if not NUMERIC_LITERAL.match(stripped):
        return None
    value = float(stripped)
    return value if math.isfinite(value) else None


def wasserstein_w1(samples: Sequence[float], spec: DistributionSpec) -> Optional[float]:
    """(1/N) sum |x_(i) - ppf((i - 0.5) / N)|; None for an empty sample."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = len(x)
    if n == 0:
        return None
    quantiles = np.asarray(dist_engine.ppf(spec, (np.arange(1, n + 1) - 0.5) / n), dtype=float)
    return float(np.mean(np.abs(x - quantiles)))


def target_width(spec: DistributionSpec) -> float:
    return float(dist_engine.ppf(spec, 0.95)) - float(dist_engine.ppf(spec, 0.05))


def normalized_w1(w1: Optional[float], spec: DistributionSpec) -> Optional[float]:
    if w1 is None:
        return None
    width = target_width(spec)
    if not width > 0:
        return None
    return float(w1) / width


def logit_kl(model, config, trie: TokenTrie, n_paths: int = 4,
             rng: Optional[np.random.Generator] = None, prompt_tokens: Optional[Sequence[int]] = None) -> float:
    """Mean over sampled paths of the per-path prefix-mean KL(q || pi)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    prompt = list(prompt_tokens) if prompt_tokens is not None else encode_prompt(model.vocab, config)
    values = [path_kl(model, prompt, trie, trie.sample_path(rng)) for _ in range(n_paths)]
    return float(np.mean(values))


def valid_rate(generations: Sequence[str], target: Union[DistributionSpec, SupportInfo]) -> float:
    """Fraction of generations that parse and fall inside the raw support."""
    if not generations:
        return 0.0
    info = dist_engine.support(target) if isinstance(target, DistributionSpec) else target
    ok = 0
    for text in generations:
        value = parse_numeric(text)
        if value is not None and info.lower <= value <= info.upper:
            ok += 1
    return ok / len(generations)


def valid_values(generations: Sequence[str], info: SupportInfo) -> List[float]:
    out = []
    for text in generations:
        value = parse_numeric(text)
        if value is not None and info.lower <= value <= info.upper:
            out.append(value)
    return out


def tv_uniform(counts: Sequence[int]) -> Optional[float]:
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if len(counts) == 0 or total <= 0:
        return None
    return float(0.5 * np.abs(counts / total - 1.0 / len(counts)).sum())


def top_mass_tokens(first_token_probs: Union[Sequence[float], Mapping], threshold: float = 0.9) -> List:
    """Fewest highest-probability token ids covering ``threshold``, ordered by (-mass, id)."""
    if isinstance(first_token_probs, Mapping):
        ids = sorted(first_token_probs)
        probs = np.asarray([first_token_probs[k] for k in ids], dtype=float)
    else:
        probs = np.asarray(first_token_probs, dtype=float)
        ids = list(range(len(probs)))
    order = np.argsort(-probs, kind='stable')
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, threshold - MASS_TOLERANCE, side='left') + 1)
    return [ids[i] for i in order[:k]]


def support_size_top_mass(first_token_probs: Union[Sequence[float], Mapping], threshold: float = 0.9) -> int:
    """Fewest highest-probability tokens covering ``threshold``; ties go to the lower id."""
    return len(top_mass_tokens(first_token_probs, threshold))


def unique_fraction(samples: Sequence[str]) -> float:
    if not samples:
        raise ValueError("unique_fraction needs at least one sample")
    normalized = {str(s).strip().casefold() for s in samples}
    return len(normalized) / len(samples)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_from_model(model, config, n: int, rng: np.random.Generator, max_tokens: Optional[int] = None,
                      greedy: bool = False, chunk: int = 256,
                      prompt_tokens: Optional[Sequence[int]] = None) -> List[str]:
    """n ancestral generations at temperature tau with the full softmax.

    Generations that hit ``max_tokens`` without EOS come back as "".
    """
    vocab: Vocabulary = model.vocab
    prompt = list(prompt_tokens) if prompt_tokens is not None else encode_prompt(vocab, config)
    room = model.config.context_length - len(prompt)
    max_tokens = room if max_tokens is None else min(max_tokens, room)
    out: List[str] = []
    for start in range(0, n, chunk):
        rows = min(chunk, n - start)
        seqs = np.tile(np.asarray(prompt, dtype=np.int64), (rows, 1))
        done = np.zeros(rows, dtype=bool)
        for _ in range(max_tokens):
            probs = softmax(model.next_logits(seqs), model.temperature)
            if greedy:
                nxt = probs.argmax(axis=-1)
            else:
                cum = np.cumsum(probs, axis=-1)
                u = rng.random(rows) * cum[:, -1]
                nxt = np.minimum((cum < u[:, None]).sum(axis=-1), probs.shape[-1] - 1)
            nxt = np.where(done, vocab.eos_id, nxt)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == vocab.eos_id
            if done.all():
                break
        for r in range(rows):
            completion = seqs[r, len(prompt):].tolist()
            if vocab.eos_id not in completion:
                out.append('')
                continue
            cut = completion[:completion.index(vocab.eos_id)]
            out.append(detokenize(vocab, cut))
    return out


def first_token_probs(model, prompt_tokens: Sequence[int]) -> np.ndarray:
    logits = model.next_logits(np.asarray([list(prompt_tokens)], dtype=np.int64))[0]
    return softmax(logits, model.temperature)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class PromptRecord:
    config_id: str
    family: str
    split: str
    n_samples: int
    valid_rate: float
    w1: Optional[float]
    normalized_w1: Optional[float]
    logit_kl: float
    support_size_90: int
    unique_fraction: float

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> 'PromptRecord':
        return cls(**{f.name: data.get(f.name) for f in fields(cls)})


def _finite(values) -> List[float]:
    return [float(v) for v in values if v is not None and math.isfinite(v)]


def _round(value: Optional[float], digits: int = 10) -> Optional[float]:
    return None if value is None else round(float(value), digits)


@dataclass
class EvalReport:
    condition: str
    records: List[PromptRecord]
    family_w1: Dict[str, Optional[float]] = field(default_factory=dict)
    family_kl: Dict[str, Optional[float]] = field(default_factory=dict)
    median_w1: Optional[float] = None
    mean_kl: Optional[float] = None
    mean_valid_rate: Optional[float] = None
    split: str = ''

    def to_dict(self) -> Dict:
        return {
            'condition': self.condition,
            'split': self.split,
            'median_normalized_w1': _round(self.median_w1),
            'mean_logit_kl': _round(self.mean_kl),
            'mean_valid_rate': _round(self.mean_valid_rate),
            'family_normalized_w1': {k: _round(v) for k, v in self.family_w1.items()},
            'family_logit_kl': {k: _round(v) for k, v in self.family_kl.items()},
            'records': [{k: (_round(v) if isinstance(v, float) else v) for k, v in r.to_dict().items()}
                        for r in self.records],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> 'EvalReport':
        return cls(
            condition=data.get('condition', ''),
            records=[PromptRecord.from_dict(r) for r in data.get('records', [])],
            family_w1=dict(data.get('family_normalized_w1', {})),
            family_kl=dict(data.get('family_logit_kl', {})),
            median_w1=data.get('median_normalized_w1'),
            mean_kl=data.get('mean_logit_kl'),
            mean_valid_rate=data.get('mean_valid_rate'),
            split=data.get('split', ''),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + '\n'

    def family_frame(self) -> pd.DataFrame:
        rows = [{'family': fam, 'normalized_w1': _fmt(self.family_w1.get(fam)),
                 'logit_kl': _fmt(self.family_kl.get(fam))} for fam in sorted(self.family_w1)]
        return pd.DataFrame(rows, columns=['family', 'normalized_w1', 'logit_kl'])

    def to_text(self) -> str:
        head = (f"condition: {self.condition}  split: {self.split or 'all'}\n"
                f"median normalized W1: {_fmt(self.median_w1)}  mean logit KL: {_fmt(self.mean_kl)}  "
                f"mean valid rate: {_fmt(self.mean_valid_rate)}\n")
        frame = self.family_frame()
        body = frame.to_string(index=False) if not frame.empty else '(no prompts)'
        return head + body + '\n'


def _fmt(value: Optional[float]) -> str:
    return UNDEFINED if value is None else f"{value:.4f}"


def aggregate(records: Sequence[PromptRecord], condition: str = '', split: str = '') -> EvalReport:
    """Family means of finite estimates; the cross-family median needs every family defined."""
    families: Dict[str, List[PromptRecord]] = {}
    for r in records:
        families.setdefault(r.family, []).append(r)
    family_w1: Dict[str, Optional[float]] = {}
    family_kl: Dict[str, Optional[float]] = {}
    for fam in sorted(families):
        w1s = _finite(r.normalized_w1 for r in families[fam])
        kls = _finite(r.logit_kl for r in families[fam])
        family_w1[fam] = float(np.mean(w1s)) if w1s else None
        family_kl[fam] = float(np.mean(kls)) if kls else None
    if family_w1 and all(v is not None for v in family_w1.values()):
        median = float(np.median(list(family_w1.values())))
    else:
        median = None
    kls = _finite(r.logit_kl for r in records)
    rates = [r.valid_rate for r in records]
    return EvalReport(
        condition=condition,
        records=list(records),
        family_w1=family_w1,
        family_kl=family_kl,
        median_w1=median,
        mean_kl=float(np.mean(kls)) if kls else None,
        mean_valid_rate=float(np.mean(rates)) if rates else None,
        split=split,
    )


# ---------------------------------------------------------------------------
# Condition evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalSettings:
    samples_per_prompt: int = 1000
    n_paths: int = 4
    seed: int = 0
    decimals: int = 5
    max_bins: int = 16384
    workers: int = 1

    def __post_init__(self):
        if self.samples_per_prompt < 1 or self.n_paths < 1:
            raise ValueError("samples_per_prompt and n_paths must be >= 1")

    @classmethod
    def from_dict(cls, data: Optional[Mapping]) -> 'EvalSettings':
        data = data or {}
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    def to_dict(self) -> Dict:
        return asdict(self)


def evaluate_prompt(model, config, settings: EvalSettings, index: int,
                    trie: Optional[TokenTrie] = None) -> PromptRecord:
    rng = np.random.default_rng([settings.seed, index])
    spec: DistributionSpec = config.spec
    prompt = encode_prompt(model.vocab, config)
    if trie is None:
        trie = build_trie(build_output_space(spec, settings.decimals, settings.max_bins), model.vocab)
    generations = sample_from_model(model, config, settings.samples_per_prompt, rng, prompt_tokens=prompt)
    info = dist_engine.support(spec)
    values = valid_values(generations, info)
    w1 = wasserstein_w1(values, spec)
    kl = logit_kl(model, config, trie, settings.n_paths, rng, prompt_tokens=prompt)
    return PromptRecord(
        config_id=config.config_id,
        family=config.family,
        split=getattr(config, 'split', ''),
        n_samples=len(generations),
        valid_rate=len(values) / len(generations),
        w1=w1,
        normalized_w1=normalized_w1(w1, spec),
        logit_kl=kl,
        support_size_90=support_size_top_mass(first_token_probs(model, prompt)),
        unique_fraction=unique_fraction(generations),
    )


def evaluate_condition(model, configs: Sequence, settings: EvalSettings, condition: str = '',
                       split: str = '', tries: Optional[Mapping[str, TokenTrie]] = None) -> EvalReport:
    """Per-prompt metrics with per-prompt seeded streams, reduced into one report."""
    tries = tries or {}

    def run(item):
        index, config = item
        try:
            return evaluate_prompt(model, config, settings, index, tries.get(config.config_id))
        except Exception as e:
            raise EvaluationError(f"[EVAL] {condition} {config.config_id}: {e}") from e

    items = list(enumerate(configs))
    if settings.workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=settings.workers) as pool:
            records = list(pool.map(run, items))
    else:
        records = [run(item) for item in items]
    report = aggregate(records, condition=condition, split=split)
    logger.info(f"[EVAL] {condition} {split or 'all'}: {len(records)} prompts, "
                f"median nW1 {_fmt(report.median_w1)}, mean KL {_fmt(report.mean_kl)}")
    return report


def summary_table(reports: Mapping[str, Mapping[str, EvalReport]]) -> pd.DataFrame:
    """Rows per split and metric, one column per condition (Base / Soft / Hard ...)."""
    conditions = list(reports)
    splits: List[str] = []
    for by_split in reports.values():
        for s in by_split:
            if s not in splits:
                splits.append(s)
    rows = []
    for s in splits:
        for metric, attr in (('median nW1', 'median_w1'), ('mean logit KL', 'mean_kl'),
                             ('mean valid rate', 'mean_valid_rate')):
            row = {'split': s, 'metric': metric}
            for cond in conditions:
                rep = reports[cond].get(s)
                row[cond] = _fmt(getattr(rep, attr)) if rep is not None else UNDEFINED
            rows.append(row)
    return pd.DataFrame(rows, columns=['split', 'metric'] + conditions)
