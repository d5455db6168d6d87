from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Final, Iterable, List, Mapping, Optional, Tuple

from divlab.config import LossMode
from divlab.divergence import DivergenceReport
from divlab.errors import ConfigurationError
from divlab.synthdata import PartitionName, Scheme
from divlab.writer import RecordWriter, read_table

report_keys: Final = tuple(map(lambda f: f.name, fields(DivergenceReport)))


@dataclass(frozen=True)
class RunRecord:
    """Metrics of one alignment: a (seed, partition) pair under one loss mode."""

    seed: int

    scheme: Scheme

    loss_mode: LossMode

    cl_eps: float

    partition: PartitionName

    mlp_accuracy: float

    trained_iia: float

    heldout_iia: float

    # Row EMD on the causal coordinates over the training split.
    training_emd: float

    report: DivergenceReport

    selected_epoch: Optional[int]

    alignment_epochs: int

    mlp_checksum: str

    alignment_checksum: str

    @property
    def key(self) -> Tuple[int, str]:
        return self.seed, self.partition.value

    def to_row(self) -> Dict[str, Any]:
        row: Dict[str, Any] = {
            "seed": self.seed,
            "scheme": self.scheme,
            "loss_mode": self.loss_mode,
            "cl_eps": self.cl_eps,
            "partition": self.partition,
            "mlp_accuracy": self.mlp_accuracy,
            "trained_iia": self.trained_iia,
            "heldout_iia": self.heldout_iia,
            "training_emd": self.training_emd,
            "selected_epoch": self.selected_epoch,
            "alignment_epochs": self.alignment_epochs,
            "mlp_checksum": self.mlp_checksum,
            "alignment_checksum": self.alignment_checksum
        }

        row.update(self.report.to_dict())

        return row

    @classmethod
    def from_row(cls, row: Mapping[str, str]) -> RunRecord:
        try:
            return cls(
                seed=int(row["seed"]),
                scheme=Scheme(row["scheme"]),
                loss_mode=LossMode(row["loss_mode"]),
                cl_eps=float(row["cl_eps"]),
                partition=PartitionName(row["partition"]),
                mlp_accuracy=float(row["mlp_accuracy"]),
                trained_iia=float(row["trained_iia"]),
                heldout_iia=float(row["heldout_iia"]),
                training_emd=float(row["training_emd"]),
                report=DivergenceReport.from_dict({k: float(row[k]) for k in report_keys}),
                selected_epoch=int(row["selected_epoch"]) if row["selected_epoch"] else None,
                alignment_epochs=int(row["alignment_epochs"]),
                mlp_checksum=row["mlp_checksum"],
                alignment_checksum=row["alignment_checksum"])
        except (KeyError, ValueError) as e:
            raise ConfigurationError(f"Malformed metrics row: {e}") from e


def sort_records(records: Iterable[RunRecord]) -> List[RunRecord]:
    return sorted(records, key=lambda r: (r.seed, r.scheme.value, r.loss_mode.value, r.cl_eps, r.partition.value))


def write_records(records: Iterable[RunRecord], writer: RecordWriter, name: str = "metrics.csv") -> Path:
    return writer.write_table(name, "metrics", map(lambda r: r.to_row(), sort_records(records)))


def read_records(path: Path) -> List[RunRecord]:
    return list(map(RunRecord.from_row, read_table(path, "metrics")))
