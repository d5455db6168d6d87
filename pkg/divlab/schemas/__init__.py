import json
from importlib.resources import files
from typing import Final, Mapping, Tuple

tables: Final[Mapping[str, Tuple[str, ...]]] = dict(map(
    lambda kv: (kv[0], tuple(kv[1])),
    json.loads(files(__name__).joinpath("outputs.json").read_text(encoding="utf-8")).items()))


def columns(table: str) -> Tuple[str, ...]:
    if table not in tables:
        raise KeyError(f"No output table named {table!r}; available: {sorted(tables)}")

    return tables[table]
