#!/usr/bin/env python3
"""
Calibration Benchmark CLI
Runs generate -> train -> eval -> report (and the ablation sweep) from one
YAML run config. Artifacts land under $CALIB_OUTPUT_ROOT/<output_dir>/.

Exit codes: 0 success, 2 config error, 3 training diverged,
4 evaluation failure, 1 anything else.
"""

import argparse
import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import pandas as pd
import yaml
from dotenv import load_dotenv

from benchmark import (
    OOD, SPLITS, TRAIN, UNSEEN, BenchmarkGrid, ConfigError, PromptConfig, generate_benchmark, split_configs,
)
from discretizer import build_output_space
from evaluator import EvalReport, EvalSettings, EvaluationError, evaluate_condition, summary_table
from reports import reporting
from token_trie import Vocabulary, build_trie, encode_prompt
from toy_model import (
    ModelConfig, ToyTransformer, TrainingDivergedError, TriePolicy, load_checkpoint, save_checkpoint,
)
from trainers import HARD, METHODS, SOFT, TrainingConfig, planned_steps, train

logger = logging.getLogger(__name__)

ROOT = Path(__file__).resolve().parent
DEFAULT_CONFIG = ROOT / 'configs' / 'smoke.yaml'
CONFIG_VERSION = 1
VERBS = ('generate', 'train', 'eval', 'report', 'all', 'ablate')
BASE = 'base'
ORACLE = 'oracle'

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_EVAL = 4

# (decimals, max_bins) for soft; (decimals, max_bins, R, epochs) for hard
SOFT_ABLATION = [
    {'decimals': d, 'max_bins': b} for d in (2, 3, 5) for b in (1001, 4096, 16384)
]
HARD_ABLATION = [
    {'decimals': 3, 'max_bins': 1001, 'samples_per_prompt': 16, 'epochs': 2},
    {'decimals': 2, 'max_bins': 1001, 'samples_per_prompt': 16, 'epochs': 2},
    {'decimals': 5, 'max_bins': 1001, 'samples_per_prompt': 16, 'epochs': 2},
    {'decimals': 3, 'max_bins': 4096, 'samples_per_prompt': 16, 'epochs': 2},
    {'decimals': 3, 'max_bins': 16384, 'samples_per_prompt': 16, 'epochs': 2},
    {'decimals': 3, 'max_bins': 1001, 'samples_per_prompt': 8, 'epochs': 4},
    {'decimals': 3, 'max_bins': 1001, 'samples_per_prompt': 32, 'epochs': 1},
    {'decimals': 5, 'max_bins': 16384, 'samples_per_prompt': 8, 'epochs': 4},
    {'decimals': 5, 'max_bins': 16384, 'samples_per_prompt': 16, 'epochs': 2},
    {'decimals': 5, 'max_bins': 16384, 'samples_per_prompt': 32, 'epochs': 1},
]


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = 'default'
    benchmark: BenchmarkGrid = field(default_factory=BenchmarkGrid)
    model: ModelConfig = field(default_factory=ModelConfig)
    methods: List[str] = field(default_factory=lambda: [SOFT, HARD])
    training: Dict[str, TrainingConfig] = field(default_factory=dict)
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    eval_splits: List[str] = field(default_factory=lambda: [OOD, UNSEEN])
    include_oracle: bool = False
    ablation_method: str = SOFT
    ablation_settings: List[Dict] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: Optional[Mapping]) -> 'RunConfig':
        data = dict(data or {})
        version = data.get('version', CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"Unsupported run config version {version}")
        seed = int(data.get('seed', 0))
        training_cfg = data.get('training', {}) or {}
        methods = list(training_cfg.get('methods', [SOFT, HARD]))
        for m in methods:
            if m not in METHODS:
                raise ConfigError(f"Unknown training method '{m}'")
        training = {}
        for m in METHODS:
            section = dict(training_cfg.get(m, {}) or {})
            section.setdefault('seed', seed)
            training[m] = TrainingConfig.from_dict(m, section)
        model_cfg = dict(data.get('model', {}) or {})
        model_cfg.setdefault('seed', seed)
        eval_cfg = dict(data.get('evaluation', {}) or {})
        eval_cfg.setdefault('seed', seed)
        splits = list(eval_cfg.pop('splits', [OOD, UNSEEN]))
        unknown = [s for s in splits if s not in SPLITS]
        if unknown:
            raise ConfigError(f"Unknown evaluation splits {unknown}")
        ablation = data.get('ablation', {}) or {}
        try:
            model = ModelConfig.from_dict(model_cfg)
            evaluation = EvalSettings.from_dict(eval_cfg)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid run config: {e}")
        run = cls(
            seed=seed,
            output_dir=str(data.get('output_dir', 'default')),
            benchmark=BenchmarkGrid.from_dict(data.get('benchmark')),
            model=model,
            methods=methods,
            training=training,
            evaluation=evaluation,
            eval_splits=splits,
            include_oracle=bool(eval_cfg.get('include_oracle', data.get('include_oracle', False))),
            ablation_method=str(ablation.get('method', SOFT)),
            ablation_settings=list(ablation.get('settings') or []),
        )
        if run.ablation_method not in METHODS:
            raise ConfigError(f"Unknown ablation method '{run.ablation_method}'")
        return run

    @classmethod
    def from_yaml(cls, path: Path) -> 'RunConfig':
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Run config not found: {path}")
        try:
            data = yaml.safe_load(path.read_text(encoding='utf-8')) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse {path}: {e}")
        logger.info(f"[CONFIG] loaded {path}")
        return cls.from_dict(data)

    def to_dict(self) -> Dict:
        return {
            'version': CONFIG_VERSION,
            'seed': self.seed,
            'output_dir': self.output_dir,
            'benchmark': self.benchmark.to_dict(),
            'model': self.model.to_dict(),
            'training': {'methods': list(self.methods), **{m: t.to_dict() for m, t in self.training.items()}},
            'evaluation': {**self.evaluation.to_dict(), 'splits': list(self.eval_splits),
                           'include_oracle': self.include_oracle},
            'ablation': {'method': self.ablation_method, 'settings': list(self.ablation_settings)},
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:12]

    def run_dir(self) -> Path:
        return reporting.output_root() / self.output_dir


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _provenance(run: RunConfig) -> Dict:
    return {'config_hash': run.config_hash(), 'seed': run.seed}


def stage_generate(run: RunConfig, run_dir: Path) -> List[PromptConfig]:
    configs = generate_benchmark(run)
    payload = {**_provenance(run), 'configs': [c.to_dict() for c in configs]}
    bench_path = reporting.write_json(run_dir / 'benchmark.json', payload)
    frame = pd.DataFrame([{**c.to_dict(), 'params': json.dumps(c.params, sort_keys=True),
                           'config_hash': run.config_hash(), 'seed': run.seed} for c in configs],
                         columns=['config_id', 'family', 'split', 'tier', 'params', 'prompt', 'config_hash', 'seed'])
    prompts_path = reporting.write_frame(run_dir / 'prompts.csv', frame)
    reporting.upsert_run_manifest(run_dir, {
        **_provenance(run),
        'stages': {'generate': {'configs': len(configs)}},
        'artifacts': reporting.relative_artifacts(run_dir, [bench_path, prompts_path]),
    })
    return configs


def load_configs(run: RunConfig, run_dir: Path) -> List[PromptConfig]:
    payload = reporting.read_json(run_dir / 'benchmark.json')
    if payload is None or payload.get('config_hash') != run.config_hash():
        logger.info("[BENCH] no benchmark for this config hash, generating")
        return stage_generate(run, run_dir)
    return [PromptConfig.from_dict(c) for c in payload['configs']]


def train_method(run: RunConfig, method: str, configs: Sequence[PromptConfig], vocab: Vocabulary,
                 run_dir: Optional[Path], tconfig: Optional[TrainingConfig] = None, label: Optional[str] = None):
    tconfig = tconfig or run.training[method]
    label = label or method
    model = ToyTransformer(run.model, vocab)
    opt = tconfig.optimizer(model, planned_steps(len(configs), tconfig))
    trace_path = ckpt_dir = None
    if run_dir is not None:
        trace_path = run_dir / 'traces' / f'{label}_loss.csv'
        ckpt_dir = run_dir / 'checkpoints' / label
        if trace_path.exists():
            trace_path.unlink()
        if ckpt_dir.exists():
            shutil.rmtree(ckpt_dir)
    logger.info(f"[TRAIN] {label}: {len(configs)} configs, {opt.total_steps} planned steps")
    model, trace = train(method, configs, model, opt, tconfig, vocab=vocab, trace_path=trace_path,
                         checkpoint_dir=ckpt_dir, config_hash=run.config_hash())
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / 'final.npz', model, opt,
                        extra={'method': method, 'config_hash': run.config_hash(), 'seed': run.seed})
    return model, trace, opt


def stage_train(run: RunConfig, run_dir: Path, configs: Sequence[PromptConfig]) -> Dict[str, ToyTransformer]:
    vocab = Vocabulary.default()
    train_configs = split_configs(configs, TRAIN)
    if not train_configs:
        raise ConfigError("Benchmark has no train configs")
    models = {}
    for method in run.methods:
        model, trace, opt = train_method(run, method, train_configs, vocab, run_dir)
        models[method] = model
        reporting.upsert_run_manifest(run_dir, {
            **_provenance(run),
            'stages': {f'train_{method}': {'steps': opt.step,
                                           'final_loss': trace[-1]['loss'] if trace else None}},
            'artifacts': reporting.relative_artifacts(run_dir, [
                run_dir / 'traces' / f'{method}_loss.csv', run_dir / 'checkpoints' / method / 'final.npz']),
        })
    return models


def _eval_tries(configs: Sequence[PromptConfig], vocab: Vocabulary, settings: EvalSettings):
    return {c.config_id: build_trie(build_output_space(c.spec, settings.decimals, settings.max_bins), vocab)
            for c in configs}


def evaluate_models(run: RunConfig, models: Mapping[str, object], configs: Sequence[PromptConfig],
                    vocab: Vocabulary) -> Dict[str, Dict[str, EvalReport]]:
    tries = _eval_tries(configs, vocab, run.evaluation)
    out: Dict[str, Dict[str, EvalReport]] = {}
    for condition, model in models.items():
        out[condition] = {}
        for split in run.eval_splits:
            subset = split_configs(configs, split)
            if subset:
                out[condition][split] = evaluate_condition(model, subset, run.evaluation, condition, split, tries)
    return out


def stage_eval(run: RunConfig, run_dir: Path, configs: Sequence[PromptConfig],
               trained: Optional[Mapping[str, ToyTransformer]] = None) -> Dict[str, Dict[str, EvalReport]]:
    vocab = Vocabulary.default()
    models: Dict[str, object] = {BASE: ToyTransformer(run.model, vocab)}
    for method in run.methods:
        if trained and method in trained:
            models[method] = trained[method]
            continue
        path = run_dir / 'checkpoints' / method / 'final.npz'
        if not path.exists():
            raise EvaluationError(f"no checkpoint for '{method}' at {path}; run the train stage first")
        models[method], _, _ = load_checkpoint(path)
    if run.include_oracle:
        eval_configs = [c for c in configs if c.split in run.eval_splits]
        tries = _eval_tries(eval_configs, vocab, run.evaluation)
        models[ORACLE] = TriePolicy.from_targets(
            vocab, [(encode_prompt(vocab, c), tries[c.config_id]) for c in eval_configs],
            context_length=run.model.context_length, temperature=run.model.temperature)
    reports = evaluate_models(run, models, configs, vocab)
    written = []
    for condition, by_split in reports.items():
        payload = {**_provenance(run), 'condition': condition,
                   'splits': {s: r.to_dict() for s, r in by_split.items()}}
        written.append(reporting.write_json(run_dir / 'reports' / f'eval_{condition}.json', payload))
    reporting.upsert_run_manifest(run_dir, {
        **_provenance(run),
        'stages': {'eval': {'conditions': list(reports)}},
        'artifacts': reporting.relative_artifacts(run_dir, written),
    })
    return reports


def _load_reports(run: RunConfig, run_dir: Path) -> Dict[str, Dict[str, EvalReport]]:
    conditions = [BASE] + list(run.methods) + ([ORACLE] if run.include_oracle else [])
    out = {}
    for condition in conditions:
        payload = reporting.read_json(run_dir / 'reports' / f'eval_{condition}.json')
        if payload is None:
            raise EvaluationError(f"missing eval report for '{condition}'; run the eval stage first")
        out[condition] = {s: EvalReport.from_dict(r) for s, r in payload['splits'].items()}
    return out


def stage_report(run: RunConfig, run_dir: Path,
                 reports: Optional[Mapping[str, Mapping[str, EvalReport]]] = None) -> Dict:
    reports = reports or _load_reports(run, run_dir)
    table = summary_table(reports)
    payload = {
        **_provenance(run),
        'conditions': list(reports),
        'summary': table.to_dict(orient='records'),
        'families': {cond: {s: r.to_dict()['family_normalized_w1'] for s, r in by_split.items()}
                     for cond, by_split in reports.items()},
    }
    json_path = reporting.write_json(run_dir / 'report.json', payload)
    lines = [f"config_hash: {run.config_hash()}  seed: {run.seed}", '', table.to_string(index=False), '']
    for cond, by_split in reports.items():
        for rep in by_split.values():
            lines.append(rep.to_text())
    text_path = reporting.write_text(run_dir / 'report.txt', '\n'.join(lines))
    reporting.upsert_run_manifest(run_dir, {
        **_provenance(run),
        'stages': {'report': {'rows': len(table)}},
        'artifacts': reporting.relative_artifacts(run_dir, [json_path, text_path]),
    })
    return payload


def stage_ablate(run: RunConfig, run_dir: Path, configs: Sequence[PromptConfig]) -> pd.DataFrame:
    """Retrain one method per knob setting and score it against the fixed evaluation trie."""
    method = run.ablation_method
    settings = run.ablation_settings or (SOFT_ABLATION if method == SOFT else HARD_ABLATION)
    vocab = Vocabulary.default()
    train_configs = split_configs(configs, TRAIN)
    eval_configs = [c for c in configs if c.split in (OOD, UNSEEN)]
    tries = _eval_tries(eval_configs, vocab, run.evaluation)
    rows = []
    for i, overrides in enumerate(settings):
        tconfig = TrainingConfig.from_dict(method, {**run.training[method].to_dict(), **overrides})
        label = f"ablate_{method}_{i:02d}"
        model, _, opt = train_method(run, method, train_configs, vocab, run_dir, tconfig, label)
        row = {'setting': i, 'decimals': tconfig.decimals, 'max_bins': tconfig.max_bins,
               'samples_per_prompt': tconfig.samples_per_prompt, 'epochs': tconfig.epochs, 'steps': opt.step}
        for split in (OOD, UNSEEN):
            subset = split_configs(eval_configs, split)
            rep = evaluate_condition(model, subset, run.evaluation, label, split, tries) if subset else None
            row[f'{split} nW1'] = rep.median_w1 if rep is not None else None
        rows.append(row)
        logger.info(f"[ABLATE] {label}: {row}")
    frame = pd.DataFrame(rows)
    payload = {**_provenance(run), 'method': method,
               'rows': json.loads(frame.to_json(orient='records', double_precision=10))}
    json_path = reporting.write_json(run_dir / 'ablation.json', payload)
    text_path = reporting.write_text(run_dir / 'ablation.txt', frame.fillna('---').to_string(index=False))
    reporting.upsert_run_manifest(run_dir, {
        **_provenance(run),
        'stages': {'ablate': {'method': method, 'settings': len(rows)}},
        'artifacts': reporting.relative_artifacts(run_dir, [json_path, text_path]),
    })
    return frame


def run_pipeline(run: RunConfig, stages: Sequence[str] = ('all',)) -> Path:
    """Run the requested verbs in order; each failure is logged with its stage tag and re-raised."""
    run_dir = reporting.ensure_dirs(run.run_dir())
    if 'all' in stages:
        stages = ('generate', 'train', 'eval', 'report')
    configs: Optional[List[PromptConfig]] = None
    models: Optional[Dict[str, ToyTransformer]] = None
    reports = None
    for stage in stages:
        tag = stage.upper()
        logger.info(f"[{tag}] starting ({run.output_dir}, hash {run.config_hash()})")
        try:
            if stage == 'generate':
                configs = stage_generate(run, run_dir)
            elif stage == 'train':
                configs = configs or load_configs(run, run_dir)
                models = stage_train(run, run_dir, configs)
            elif stage == 'eval':
                configs = configs or load_configs(run, run_dir)
                reports = stage_eval(run, run_dir, configs, models)
            elif stage == 'report':
                stage_report(run, run_dir, reports)
            elif stage == 'ablate':
                configs = configs or load_configs(run, run_dir)
                stage_ablate(run, run_dir, configs)
            else:
                raise ConfigError(f"Unknown stage '{stage}'")
        except Exception as e:
            logger.error(f"[{tag}] failed: {e}")
            raise
        logger.info(f"[{tag}] done")
    return run_dir


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def apply_overrides(run: RunConfig, args: argparse.Namespace) -> RunConfig:
    data = run.to_dict()
    if args.output_dir:
        data['output_dir'] = args.output_dir
    if args.seed is not None:
        data['seed'] = args.seed
        for section in ('model', 'evaluation'):
            data[section]['seed'] = args.seed
        for m in METHODS:
            data['training'][m]['seed'] = args.seed
    if args.methods:
        data['training']['methods'] = [m.strip() for m in args.methods.split(',') if m.strip()]
    method_flags = {'decimals': args.decimals, 'max_bins': args.max_bins,
                    'samples_per_prompt': args.completions, 'epochs': args.epochs}
    for key, value in method_flags.items():
        if value is not None:
            for m in (args.method_filter or METHODS):
                data['training'][m][key] = value
    if args.eval_samples is not None:
        data['evaluation']['samples_per_prompt'] = args.eval_samples
    if args.n_paths is not None:
        data['evaluation']['n_paths'] = args.n_paths
    if args.workers is not None:
        data['evaluation']['workers'] = args.workers
    if args.resolution is not None:
        data['benchmark']['resolution'] = args.resolution
    if args.oracle:
        data['evaluation']['include_oracle'] = True
    if args.ablate_method:
        data['ablation']['method'] = args.ablate_method
    return RunConfig.from_dict(data)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Calibration fine-tuning benchmark')
    parser.add_argument('verb', choices=VERBS, help='Pipeline stage to run')
    parser.add_argument('--config', default=str(DEFAULT_CONFIG), help='YAML run config (default: configs/smoke.yaml)')
    parser.add_argument('--output-dir', help='Run directory name under the output root')
    parser.add_argument('--seed', type=int, help='Seed for model init, training and evaluation')
    parser.add_argument('--methods', help='Comma-separated training methods (soft,hard)')
    parser.add_argument('--method-filter', action='append', choices=METHODS,
                        help='Apply --decimals/--max-bins/--completions/--epochs to this method only')
    parser.add_argument('--decimals', type=int, help='Output decimals d')
    parser.add_argument('--max-bins', type=int, help='Output-space bin cap')
    parser.add_argument('--completions', type=int, help='Sampled completions per prompt per epoch (R)')
    parser.add_argument('--epochs', type=int, help='Training epochs')
    parser.add_argument('--eval-samples', type=int, help='Generations per prompt at evaluation')
    parser.add_argument('--n-paths', type=int, help='Sampled paths for logit KL')
    parser.add_argument('--workers', type=int, help='Evaluation worker threads')
    parser.add_argument('--resolution', type=int, help='Grid resolution for continuous parameter ranges')
    parser.add_argument('--oracle', action='store_true', help='Also evaluate the exact trie policy')
    parser.add_argument('--ablate-method', choices=METHODS, help='Method swept by the ablate verb')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    log_level = os.getenv('LOG_LEVEL', 'INFO').upper()
    logging.basicConfig(
        level=getattr(logging, log_level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    args = build_parser().parse_args(argv)
    try:
        run = apply_overrides(RunConfig.from_yaml(Path(args.config)), args)
        run_dir = run_pipeline(run, (args.verb,))
    except ConfigError as e:
        logger.error(f"[CONFIG] {e}")
        return EXIT_CONFIG
    except TrainingDivergedError as e:
        logger.error(f"[TRAIN] diverged after {len(e.trace)} steps: {e}")
        return EXIT_DIVERGED
    except EvaluationError as e:
        logger.error(f"[EVAL] {e}")
        return EXIT_EVAL
    except Exception as e:
        logger.exception(f"[ERROR] unexpected failure: {e}")
        return EXIT_FAILURE
    logger.info(f"[DONE] artifacts in {run_dir}")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
