from importlib.resources import files
from typing import Final

names: Final = frozenset(map(lambda f: f.name[:-4],
                             filter(lambda f: f.name.endswith(".txt"), files(__name__).iterdir())))


def source(name: str) -> str:
    if name not in names:
        raise KeyError(f"No builtin circuit named {name!r}; available: {sorted(names)}")

    return files(__name__).joinpath(name + ".txt").read_text(encoding="utf-8")
