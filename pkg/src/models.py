import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List

from pydantic import BaseModel, Field


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_score: float


class TrainingRecord(BaseModel):
    """Outcome of one early-stopped training run."""
    name: str
    lr: float
    best_epoch: int
    best_score: float
    epochs_run: int
    stopped_early: bool
    history: List[EpochRecord] = []


class MetricReport(BaseModel):
    metric: str
    point: float
    lo: float
    hi: float
    n_replicates: int
    seed: int


class SignificanceRow(BaseModel):
    comparator: str
    metric: str
    t: float
    p: float
    log10_p: float
    p_bonferroni: float


class StageRecord(BaseModel):
    stage: str
    checksums: Dict[str, str] = {}  # artifact file name -> sha256
    inputs: Dict[str, str] = {}  # prerequisite artifact -> sha256 it was built from
    wall_time_s: float = 0.0
    completed_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())


class ExperimentManifest(BaseModel):
    schema_version: int = 1
    config: dict = {}
    stages: Dict[str, StageRecord] = {}
    learning_rates: Dict[str, float] = {}
    parameter_counts: Dict[str, int] = {}
    metrics: List[MetricReport] = []

    def to_json_file(self, filepath) -> None:
        """Save the manifest atomically."""
        from src.config import _atomic_write_json
        _atomic_write_json(Path(filepath), self.model_dump(mode="json"))

    @classmethod
    def from_json_file(cls, filepath) -> 'ExperimentManifest':
        """Load a manifest; a missing file gives an empty manifest."""
        path = Path(filepath)
        if not path.exists():
            return cls()
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        return cls(**data)

    def deterministic_view(self) -> dict:
        """Manifest contents minus wall-clock fields."""
        data = self.model_dump(mode="json")
        for rec in data["stages"].values():
            rec.pop("wall_time_s", None)
            rec.pop("completed_at", None)
        return data
