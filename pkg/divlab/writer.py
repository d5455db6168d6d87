import csv
import json
import math
from enum import Enum
from logging import Logger, getLogger
from pathlib import Path
from typing import Any, Dict, Final, Iterable, List, Mapping, Sequence

import numpy as np

from divlab import schemas
from divlab.errors import ConfigurationError

significant_digits: Final = 9


def format_value(value: Any) -> str:
    """Renders one CSV cell; floats keep nine significant digits."""

    if value is None:
        return ""

    if isinstance(value, Enum):
        return str(value.value)

    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"

    if isinstance(value, (int, np.integer)):
        return str(int(value))

    if isinstance(value, (float, np.floating)):
        return format(float(value), f".{significant_digits}g")

    return str(value)


def plain(value: Any) -> Any:
    """Converts a value to JSON-compatible types, rounding floats to nine significant digits."""

    if isinstance(value, Enum):
        return value.value

    if isinstance(value, Path):
        return str(value)

    if isinstance(value, (bool, np.bool_)):
        return bool(value)

    if isinstance(value, (int, np.integer)):
        return int(value)

    if isinstance(value, (float, np.floating)):
        number = float(value)

        # JSON has no literal for these.
        if not math.isfinite(number):
            return None

        return float(format(number, f".{significant_digits}g"))

    if isinstance(value, np.ndarray):
        return list(map(plain, value.tolist()))

    if isinstance(value, Mapping):
        return {str(k): plain(v) for (k, v) in value.items()}

    if isinstance(value, (list, tuple, set, frozenset)):
        items = sorted(value) if isinstance(value, (set, frozenset)) else value
        return list(map(plain, items))

    return value


class RecordWriter:
    logger: Logger = getLogger("RecordWriter")

    def __init__(self, dest_dir: Path) -> None:
        self._dest_dir = dest_dir

    @property
    def dest_dir(self) -> Path:
        return self._dest_dir

    def path_of(self, name: str) -> Path:
        path = self._dest_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)

        return path

    def write_table(self, name: str, table: str, rows: Iterable[Mapping[str, Any]]) -> Path:
        header = schemas.columns(table)
        path = self.path_of(name)

        count = 0

        with open(path, "w", encoding="utf-8", newline="") as fout:
            writer = csv.writer(fout, lineterminator="\n")
            writer.writerow(header)

            for row in rows:
                missing = set(header) - set(row)

                if missing:
                    raise ConfigurationError(f"Row for table {table} lacks columns {sorted(missing)}.")

                writer.writerow(list(map(lambda c: format_value(row[c]), header)))
                count += 1

        self.logger.debug("Wrote %d rows to %s.", count, path)

        return path

    def write_rows(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        path = self.path_of(name)

        with open(path, "w", encoding="utf-8", newline="") as fout:
            writer = csv.writer(fout, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(map(lambda r: list(map(format_value, r)), rows))

        return path

    def write_json(self, name: str, value: Any) -> Path:
        path = self.path_of(name)

        with open(path, "w", encoding="utf-8") as fout:
            json.dump(plain(value), fout, indent=2, sort_keys=True)
            fout.write("\n")

        self.logger.debug("Wrote %s.", path)

        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.path_of(name)
        path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")

        return path


def read_table(path: Path, table: str) -> List[Dict[str, str]]:
    header = schemas.columns(table)

    try:
        with open(path, "r", encoding="utf-8", newline="") as fin:
            reader = csv.DictReader(fin)

            if tuple(reader.fieldnames or ()) != header:
                raise ConfigurationError(f"Unexpected columns in {path}: {reader.fieldnames}")

            return list(reader)
    except OSError as e:
        raise ConfigurationError(f"Cannot read {path}: {e}") from e
