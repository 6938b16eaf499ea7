"""Query versus random slot initialization on RGB-only and correlation-only features.

Each of the four cells trains a semantic-only model (no instance stage, no
L_obj) and reports merged-foreground IoU on held-out videos, averaged over
seeds.
"""

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from rich.console import Console
from rich.table import Table

from .config import RunConfig
from .evaluation import evaluate_dataset
from .synthetic import VideoSample
from .trainer import train

FEATURES = ("rgb", "correlation")
INITS = ("query", "random")

Cell = Tuple[str, str]


@dataclass
class PreliminaryResult:
    """Foreground IoU per (feature, init) cell and seed."""

    seeds: List[int]
    scores: Dict[Cell, List[float]] = field(default_factory=dict)

    def mean(self, feature: str, init: str) -> float:
        return float(np.mean(self.scores[(feature, init)]))

    def ordering_holds(self) -> bool:
        """Query beats random on RGB features and random beats query on correlation features."""
        return self.mean("rgb", "query") > self.mean("rgb", "random") and self.mean(
            "correlation", "random"
        ) > self.mean("correlation", "query")

    def to_dict(self) -> Dict[str, object]:
        return {
            "seeds": self.seeds,
            "iou": {f"{feature}/{init}": self.mean(feature, init) for feature, init in self.scores},
            "ordering_holds": self.ordering_holds(),
        }


def cell_config(base: RunConfig, feature: str, init: str, seed: int) -> RunConfig:
    cfg = copy.deepcopy(base)
    cfg.model.feature_mode = feature
    cfg.model.slot_init = init
    cfg.model.use_instance = False
    cfg.loss.enable_obj = False
    cfg.train.seed = seed
    return cfg


def run_preliminary(
    base: RunConfig,
    train_set: Sequence[VideoSample],
    eval_set: Sequence[VideoSample],
    seeds: Sequence[int],
    run_dir: Path,
    console: Optional[Console] = None,
) -> PreliminaryResult:
    result = PreliminaryResult(seeds=list(seeds))
    for feature in FEATURES:
        for init in INITS:
            scores = []
            for seed in seeds:
                cfg = cell_config(base, feature, init, seed)
                state = train(cfg, train_set, [], run_dir / f"{feature}-{init}-seed{seed}", console)
                model = state.teacher if cfg.eval.use_teacher else state.student
                scores.append(evaluate_dataset(model, eval_set, cfg).aggregate["iou"])
            result.scores[(feature, init)] = scores
    return result


def preliminary_table(result: PreliminaryResult) -> Table:
    table = Table(title=f"Foreground IoU, mean over {len(result.seeds)} seed(s)")
    table.add_column("Features")
    for init in INITS:
        table.add_column(f"{init} init", justify="right")
    for feature in FEATURES:
        table.add_row(feature, *(f"{result.mean(feature, init):.3f}" for init in INITS))
    return table
