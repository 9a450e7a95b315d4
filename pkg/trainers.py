"""
Calibration Trainers
Soft-target (trie KL along one sampled path per prompt) and hard-target
(sampled completions, masked cross-entropy) training loops with
family-balanced ordering, per-epoch loss traces and checkpoints.
"""

import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from benchmark import ConfigError, PromptConfig
from discretizer import OutputSpace, build_output_space, sample_canonical, sample_stratified
from reports import reporting
from token_trie import TokenTrie, Vocabulary, build_trie, encode_prompt, tokenize_output
from toy_model import (
    OptimizerState, TrainingDivergedError, adamw_step, hard_loss, save_checkpoint, soft_loss,
)

logger = logging.getLogger(__name__)

SOFT = 'soft'
HARD = 'hard'
METHODS = (SOFT, HARD)

METHOD_DEFAULTS = {
    SOFT: {'decimals': 5, 'max_bins': 1001, 'epochs': 3, 'samples_per_prompt': 1},
    HARD: {'decimals': 5, 'max_bins': 16384, 'epochs': 2, 'samples_per_prompt': 16},
}

TRACE_COLUMNS = ['method', 'epoch', 'step', 'loss', 'learning_rate', 'sequences', 'config_hash', 'seed']


@dataclass
class TrainingConfig:
    method: str = SOFT
    decimals: int = 5
    max_bins: int = 1001
    epochs: int = 3
    samples_per_prompt: int = 1
    batch_size: int = 8
    seed: int = 0
    learning_rate: float = 2.0e-4
    weight_decay: float = 0.01
    warmup_fraction: float = 0.03
    stratified: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"Unknown training method '{self.method}'")
        if self.samples_per_prompt < 1:
            raise ConfigError("samples_per_prompt must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0 or not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("learning_rate must be >= 0 and warmup_fraction in [0, 1]")

    @classmethod
    def defaults(cls, method: str, **overrides) -> 'TrainingConfig':
        if method not in METHODS:
            raise ConfigError(f"Unknown training method '{method}'")
        return cls(method=method, **{**METHOD_DEFAULTS[method], **overrides})

    @classmethod
    def from_dict(cls, method: str, data: Optional[Mapping] = None) -> 'TrainingConfig':
        known = {f.name for f in fields(cls)} - {'method'}
        return cls.defaults(method, **{k: v for k, v in (data or {}).items() if k in known})

    def to_dict(self) -> Dict:
        return asdict(self)

    def optimizer(self, model, total_steps: int) -> OptimizerState:
        return OptimizerState.for_model(
            model,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            warmup_fraction=self.warmup_fraction,
            total_steps=total_steps,
        )


@dataclass
class TrainingTarget:
    config: PromptConfig
    prompt_tokens: List[int]
    space: OutputSpace
    trie: Optional[TokenTrie] = None

    @property
    def family(self) -> str:
        return self.config.family


@dataclass
class Completion:
    """One sampled hard-target completion of a training prompt."""
    target: TrainingTarget
    tokens: List[int]

    @property
    def family(self) -> str:
        return self.target.family


def family_balanced_order(items: Sequence, rng: np.random.Generator,
                          key: Callable = lambda item: item.family) -> List:
    """Spread every family evenly over the epoch.

    Each family queue is shuffled independently; item r of a family with n
    items is placed at (r + phase) / n, with one uniform phase per family per
    call, and the epoch is the sort on that position. Equal-sized families
    cycle in a fixed order; a family of n items out of N recurs about every
    N / n positions, so no family runs out before the end of the epoch.
    """
    queues: Dict[str, List] = {}
    for item in items:
        queues.setdefault(key(item), []).append(item)
    slots = []
    for fam, queue in queues.items():
        n = len(queue)
        phase = rng.random()
        for r, i in enumerate(rng.permutation(n)):
            slots.append(((r + phase) / n, queue[i]))
    slots.sort(key=lambda slot: slot[0])
    return [item for _, item in slots]


def prepare_targets(configs: Sequence[PromptConfig], vocab: Vocabulary, decimals: int, max_bins: int,
                    with_tries: bool = True) -> List[TrainingTarget]:
    """Output space, prompt tokens and (for soft targets) the trie of every config."""
    targets = []
    for config in configs:
        space = build_output_space(config.spec, decimals, max_bins)
        trie = build_trie(space, vocab) if with_tries else None
        targets.append(TrainingTarget(config, encode_prompt(vocab, config), space, trie))
    logger.info(f"[TRAIN] prepared {len(targets)} targets at d={decimals} max_bins={max_bins}")
    return targets


def draw_completions(targets: Sequence[TrainingTarget], vocab: Vocabulary, n: int, rng: np.random.Generator,
                     stratified: bool = True) -> List[Completion]:
    """n completions per target; stratified draws cover each target's CDF evenly."""
    out = []
    for t in targets:
        if stratified:
            canonicals = sample_stratified(t.space, rng, n)
        else:
            canonicals = [sample_canonical(t.space, rng) for _ in range(n)]
        out.extend(Completion(t, tokenize_output(vocab, c)) for c in canonicals)
    return out


def planned_steps(n_configs: int, tconfig: TrainingConfig) -> int:
    """Optimizer steps of a full run: ceil(items per epoch / batch) * epochs."""
    per_epoch = n_configs * (tconfig.samples_per_prompt if tconfig.method == HARD else 1)
    return math.ceil(per_epoch / tconfig.batch_size) * tconfig.epochs


def _check_context(targets: Sequence[TrainingTarget], model):
    """Longest prompt plus completion (without its final EOS input) must fit the context."""
    limit = model.config.context_length
    for t in targets:
        longest = max(len(c) for c in t.space.canonicals) + 1
        if len(t.prompt_tokens) + longest - 1 > limit:
            raise ConfigError(
                f"{t.config.config_id}: prompt plus completion ({len(t.prompt_tokens) + longest - 1}) "
                f"exceeds context length {limit}")


def _accumulate(total: Optional[Dict[str, np.ndarray]], grads: Mapping[str, np.ndarray],
                weight: float) -> Dict[str, np.ndarray]:
    """Add weight * grads into total in place (a fresh dict on the first call)."""
    if total is None:
        return {k: g * weight for k, g in grads.items()}
    for k, g in grads.items():
        total[k] += g * weight
    return total


def _optimize(method: str, targets: Sequence[TrainingTarget], model, opt: Optional[OptimizerState],
              tconfig: TrainingConfig, epoch_items: Callable, batch_step: Callable, trace_path: Optional[Path],
              checkpoint_dir: Optional[Path], config_hash: str):
    """Shared epoch loop: order, batch, step, trace and checkpoint."""
    if tconfig.method != method:
        raise ConfigError(f"train_{method} called with a '{tconfig.method}' training config")
    _check_context(targets, model)
    if opt is None:
        opt = tconfig.optimizer(model, planned_steps(len(targets), tconfig))
    rng = np.random.default_rng(tconfig.seed)
    trace: List[Dict] = []
    for epoch in range(1, tconfig.epochs + 1):
        order = family_balanced_order(epoch_items(rng), rng)
        rows = []
        for start in range(0, len(order), tconfig.batch_size):
            batch = order[start:start + tconfig.batch_size]
            loss, grads = batch_step(batch, rng)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"[TRAIN] {method}: non-finite loss at step {opt.step}", trace)
            try:
                lr = adamw_step(opt, model, grads)
            except TrainingDivergedError as e:
                raise TrainingDivergedError(str(e), trace)
            record = {
                'method': method, 'epoch': epoch, 'step': opt.step, 'loss': loss,
                'learning_rate': lr, 'sequences': len(batch),
                'config_hash': config_hash, 'seed': tconfig.seed,
            }
            trace.append(record)
            rows.append(record)
            logger.debug(f"[TRAIN] {method} epoch {epoch} step {opt.step}: loss={loss:.6f} lr={lr:.3e}")
        if trace_path is not None:
            reporting.append_csv_rows(trace_path, rows, TRACE_COLUMNS)
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / f'epoch_{epoch:02d}.npz', model, opt,
                            extra={'method': method, 'epoch': epoch,
                                   'config_hash': config_hash, 'seed': tconfig.seed})
        mean = float(np.mean([r['loss'] for r in rows])) if rows else float('nan')
        logger.info(f"[TRAIN] {method} epoch {epoch}/{tconfig.epochs}: {len(rows)} steps, mean loss {mean:.6f}")
    return model, trace


def train_soft(configs: Sequence[PromptConfig], model, opt: Optional[OptimizerState], tconfig: TrainingConfig,
               vocab: Optional[Vocabulary] = None, targets: Optional[Sequence[TrainingTarget]] = None,
               trace_path: Optional[Path] = None, checkpoint_dir: Optional[Path] = None,
               config_hash: str = '') -> Tuple[object, List[Dict]]:
    """One sampled path per prompt per epoch; batch loss is the mean of per-prompt losses."""
    vocab = vocab or model.vocab
    if targets is None:
        targets = prepare_targets(configs, vocab, tconfig.decimals, tconfig.max_bins, with_tries=True)

    def batch_step(batch, rng):
        total, loss_sum = None, 0.0
        weight = 1.0 / len(batch)
        for t in batch:
            path = t.trie.sample_path(rng)
            loss, grads = soft_loss(model, t.prompt_tokens, t.trie, path)
            loss_sum += loss
            total = _accumulate(total, grads, weight)
        return loss_sum * weight, total

    return _optimize(SOFT, targets, model, opt, tconfig, lambda rng: list(targets), batch_step,
                     trace_path, checkpoint_dir, config_hash)


def train_hard(configs: Sequence[PromptConfig], model, opt: Optional[OptimizerState], tconfig: TrainingConfig,
               vocab: Optional[Vocabulary] = None, targets: Optional[Sequence[TrainingTarget]] = None,
               trace_path: Optional[Path] = None, checkpoint_dir: Optional[Path] = None,
               config_hash: str = '') -> Tuple[object, List[Dict]]:
    """R fresh completions per prompt per epoch; batch loss is the token-weighted mean.

    With ``tconfig.stratified`` the R completions of a prompt are drawn one per
    CDF stratum; otherwise they are independent draws.
    """
    vocab = vocab or model.vocab
    if targets is None:
        targets = prepare_targets(configs, vocab, tconfig.decimals, tconfig.max_bins, with_tries=False)

    def epoch_items(rng):
        return draw_completions(targets, vocab, tconfig.samples_per_prompt, rng, tconfig.stratified)

    def batch_step(batch, rng):
        n_tokens = sum(len(c.tokens) for c in batch)
        total, loss_sum = None, 0.0
        for c in batch:
            weight = len(c.tokens) / n_tokens
            loss, grads = hard_loss(model, c.target.prompt_tokens, c.tokens)
            loss_sum += loss * weight
            total = _accumulate(total, grads, weight)
        return loss_sum, total

    return _optimize(HARD, targets, model, opt, tconfig, epoch_items, batch_step,
                     trace_path, checkpoint_dir, config_hash)


def train(method: str, configs: Sequence[PromptConfig], model, opt: Optional[OptimizerState],
          tconfig: TrainingConfig, **kwargs):
    fn = train_soft if method == SOFT else train_hard
    return fn(configs, model, opt, tconfig, **kwargs)
