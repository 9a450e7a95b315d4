#!/usr/bin/env python3
import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional

import pandas as pd

ROOT = Path(__file__).resolve().parent.parent
DEFAULT_OUTPUT_ROOT = ROOT / 'runs'
SUBDIRS = ('checkpoints', 'traces', 'reports')
MANIFEST_NAME = 'run_manifest.json'


def output_root() -> Path:
    return Path(os.getenv('CALIB_OUTPUT_ROOT') or DEFAULT_OUTPUT_ROOT)


def ensure_dirs(run_dir: Path) -> Path:
    run_dir = Path(run_dir)
    for sub in SUBDIRS:
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    return run_dir


def _atomic_write(path: Path, data: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + '.tmp')
    with tmp.open('w', encoding='utf-8', newline='\n') as f:
        f.write(data)
    os.replace(tmp, path)


def dumps(payload: Any) -> str:
    """Canonical JSON: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True, allow_nan=False) + '\n'


def write_json(path: Path, payload: Any) -> Path:
    _atomic_write(path, dumps(payload))
    return Path(path)


def write_text(path: Path, text: str) -> Path:
    _atomic_write(path, text if text.endswith('\n') else text + '\n')
    return Path(path)


def read_json(path: Path, default: Any = None) -> Any:
    path = Path(path)
    if not path.exists():
        return default
    try:
        return json.loads(path.read_text(encoding='utf-8'))
    except Exception:
        return default


def write_frame(path: Path, frame: pd.DataFrame) -> Path:
    _atomic_write(path, frame.to_csv(index=False, lineterminator='\n'))
    return Path(path)


def append_csv_rows(path: Path, rows: Iterable[Mapping[str, Any]], columns: List[str]) -> Path:
    """Append rows to a CSV, writing the header only when the file is new."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=columns)
    if frame.empty:
        return path
    new_file = not path.exists() or path.stat().st_size == 0
    frame.to_csv(path, mode='a', header=new_file, index=False, lineterminator='\n')
    return path


def _merge_manifest(existing: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    out = {**existing}
    # Provenance - last wins
    for k in ['config_hash', 'seed', 'run_config']:
        if k in update:
            out[k] = update[k]

    # Stages - merged by name, last wins per stage
    stages = dict(existing.get('stages', {}))
    for name, info in (update.get('stages') or {}).items():
        stages[name] = {**stages.get(name, {}), **info}
    out['stages'] = stages

    # Artifacts - append and de-duplicate
    seen = set()
    artifacts = []
    for item in existing.get('artifacts', []) + update.get('artifacts', []):
        if item not in seen:
            seen.add(item)
            artifacts.append(item)
    out['artifacts'] = sorted(artifacts)
    return out


def upsert_run_manifest(run_dir: Path, update: Dict[str, Any]) -> Path:
    """Merge update into the run manifest and write atomically."""
    path = Path(run_dir) / MANIFEST_NAME
    existing = read_json(path, default={}) or {}
    merged = _merge_manifest(existing, update)
    write_json(path, merged)
    return path


def relative_artifacts(run_dir: Path, paths: Iterable[Optional[Path]]) -> List[str]:
    run_dir = Path(run_dir)
    out = []
    for p in paths:
        if p is None:
            continue
        try:
            out.append(Path(p).relative_to(run_dir).as_posix())
        except ValueError:
            out.append(Path(p).as_posix())
    return out
