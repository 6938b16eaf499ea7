"""Run directories with the files needed to reproduce a run."""

import hashlib
from pathlib import Path
from typing import Iterable, List, Optional

from .config import RUNS_DIR, RunConfig, save_config


class RunDirError(Exception):
    """Error creating or populating a run directory."""

    pass


def create_run_dir(name: str, base: Optional[Path] = None) -> Path:
    """Create <base>/<name>, adding a numeric suffix if it already holds files."""
    base = base or RUNS_DIR
    candidate = base / name
    suffix = 1
    try:
        while candidate.exists() and any(candidate.iterdir()):
            candidate = base / f"{name}-{suffix}"
            suffix += 1
        candidate.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise RunDirError(f"Cannot create run directory under {base}: {e}")
    return candidate


def _input_files(inputs: Iterable[Path]) -> List[Path]:
    files: List[Path] = []
    for path in inputs:
        if path.is_dir():
            files.extend(sorted(p for p in path.rglob("*") if p.is_file()))
        elif path.is_file():
            files.append(path)
    return files


def hash_inputs(inputs: Iterable[Path]) -> List[str]:
    """``<sha256>  <path>`` lines for every input file, in sorted path order."""
    lines = []
    for path in _input_files(inputs):
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        lines.append(f"{digest}  {path}")
    return lines


def write_run_manifest(run_dir: Path, cfg: RunConfig, inputs: Iterable[Path] = ()) -> None:
    """Write config.yaml, seed and inputs.sha256 into the run directory."""
    try:
        save_config(cfg, run_dir / "config.yaml")
        (run_dir / "seed").write_text(f"{cfg.train.seed}\n")
        lines = hash_inputs(inputs)
        (run_dir / "inputs.sha256").write_text("".join(line + "\n" for line in lines))
    except OSError as e:
        raise RunDirError(f"Cannot write run manifest in {run_dir}: {e}")
