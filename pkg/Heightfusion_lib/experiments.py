# Heightfusion_lib/experiments.py
"""
Variant comparison: train each requested fusion variant (and optimizer) under
one configuration and tabulate its height metrics on the training scenes.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

from .config import OPTIMIZERS, TrainConfig
from .errors import ConfigError, MetricError
from .synth_data import SceneSample
from .training import evaluate_model, train
from .utils import atomic_write_text

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ("variant", "optimizer", "steps", "final_loss", "delta1", "rmse", "mae", "r2")


@dataclass
class SweepRow:
    variant: str
    optimizer: str
    steps: int
    final_loss: float
    delta1: float
    rmse: float
    mae: float
    r2: Optional[float]

    def as_tuple(self):
        return tuple(getattr(self, c) for c in SWEEP_COLUMNS)


def run_variant_sweep(config: TrainConfig, dataset: Sequence[SceneSample], variants: Sequence[str],
                      optimizers: Optional[Sequence[str]] = None) -> List[SweepRow]:
    """
    One row per (variant, optimizer). A '+skip' suffix turns skip connections
    on; a bare variant name trains without them, whatever the config says.
    """
    optimizers = list(optimizers or [config.optimizer])
    for name in optimizers:
        if name not in OPTIMIZERS:
            raise ConfigError(f"Unknown optimizer '{name}'. Available: {', '.join(OPTIMIZERS)}")
    if not variants:
        raise ConfigError("run_variant_sweep needs at least one variant")

    rows = []
    for label in variants:
        mode, _, suffix = label.partition('+')
        if suffix not in ('', 'skip'):
            raise ConfigError(f"Unknown variant suffix '+{suffix}' in '{label}'")
        skip = bool(suffix)
        for opt in optimizers:
            run_config = config.replace(variant=mode, skip_connections=skip, optimizer=opt)
            logger.info("sweep: %s with %s", run_config.fusion_variant, opt)
            state = train(run_config, dataset)
            report = evaluate_model(state.model, dataset)
            rows.append(SweepRow(variant=str(run_config.fusion_variant), optimizer=opt, steps=state.step,
                                 final_loss=state.loss_history[-1][1], delta1=report.delta1,
                                 rmse=report.rmse, mae=report.mae, r2=report.r2))
    return rows


def best_row(rows: Sequence[SweepRow]) -> SweepRow:
    """Highest delta1; ties go to the lower RMSE, then to the earlier row."""
    if not rows:
        raise MetricError("no sweep rows to rank")
    return min(rows, key=lambda r: (-r.delta1, r.rmse))


def write_sweep_csv(rows: Sequence[SweepRow], path):
    lines = [",".join(SWEEP_COLUMNS)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else "nan" if v is None else repr(v) for v in row.as_tuple()))
    atomic_write_text(path, "\n".join(lines) + "\n")
