import json
import re
from typing import Any, Callable, Final, List, Optional, Sequence, Tuple

from divlab.errors import ConfigurationError

_assignment_pattern: Final = re.compile(
    "^(?:(?P<section>[a-z_]+)\\.)?(?P<key>[a-z_][a-z_0-9]*)\\s*=\\s*(?P<value>.*)$")

_int_pattern: Final = re.compile("^[-+]?[0-9]+$")

_float_pattern: Final = re.compile("^[-+]?(?:[0-9]+\\.?[0-9]*|\\.[0-9]+)(?:[eE][-+]?[0-9]+)?$|^[-+]?(?:inf|nan)$")

_bool_pattern: Final = re.compile("^(?P<value>true|false)$", re.IGNORECASE)

_null_pattern: Final = re.compile("^(?:null|none)$", re.IGNORECASE)

_list_pattern: Final = re.compile("^\\[(?P<items>.*)]$")

_range_pattern: Final = re.compile("^(?P<start>[0-9]+)\\s*(?:-|\\.\\.)\\s*(?P<end>[0-9]+)$")

_loss_pattern: Final = re.compile("^(?P<mode>das|cl|das\\+cl)(?::(?P<eps>[-+0-9.eE]+))?$")


def parse_int(text: str) -> Optional[int]:
    return int(text) if _int_pattern.match(text) else None


def parse_float(text: str) -> Optional[float]:
    return float(text) if _float_pattern.match(text) else None


def parse_bool(text: str) -> Optional[bool]:
    match = _bool_pattern.match(text)

    if not match:
        return None

    return match.group("value").lower() == "true"


def parse_list(text: str) -> Optional[List[Any]]:
    match = _list_pattern.match(text)

    if not match:
        return None

    items = match.group("items").strip()

    if not items:
        return []

    return list(map(lambda i: parse_value(i.strip()), items.split(",")))


_value_parsers: Final[Sequence[Callable[[str], Any]]] = (
    parse_list,
    parse_bool,
    parse_int,
    parse_float
)


def parse_value(text: str) -> Any:
    """Parses an override value: a list, boolean, number, null or (as a fallback) a bare string."""

    value = text.strip()

    if _null_pattern.match(value):
        return None

    if len(value) >= 2 and value[0] == value[-1] == '"':
        return json.loads(value)

    parsed = map(lambda p: p(value), _value_parsers)

    return next(filter(lambda v: v is not None, parsed), value)


def parse_assignment(text: str) -> Tuple[Optional[str], str, Any]:
    """Parses 'section.key=value' (or 'key=value' for top-level keys)."""

    match = _assignment_pattern.match(text.strip())

    if not match:
        raise ConfigurationError(f"Invalid override (expected section.key=value): {text!r}")

    return match.group("section"), match.group("key"), parse_value(match.group("value"))


def parse_grid_axis(text: str) -> Tuple[Optional[str], str, List[Any]]:
    """Parses a sweep axis 'section.key=v1,v2,...' into its list of values."""

    match = _assignment_pattern.match(text.strip())

    if not match:
        raise ConfigurationError(f"Invalid sweep axis (expected section.key=v1,v2,...): {text!r}")

    raw = match.group("value").strip()
    values = parse_list(raw) if _list_pattern.match(raw) else list(map(parse_value, raw.split(",")))

    if not values:
        raise ConfigurationError(f"A sweep axis needs at least one value: {text!r}")

    return match.group("section"), match.group("key"), values


def parse_seeds(text: str) -> List[int]:
    """Parses '3', '0,1,2' or a range '0-4' (inclusive)."""

    value = text.strip()
    match = _range_pattern.match(value)

    if match:
        (start, end) = (int(match.group("start")), int(match.group("end")))

        if end < start:
            raise ConfigurationError(f"Invalid seed range: {text!r}")

        return list(range(start, end + 1))

    seeds = list(map(lambda s: parse_int(s.strip()), value.split(",")))

    if not seeds or any(map(lambda s: s is None or s < 0, seeds)):
        raise ConfigurationError(f"Invalid seed list: {text!r}")

    return seeds  # type: ignore


def parse_loss(text: str) -> Tuple[str, Optional[float]]:
    """Parses a loss mode with an optional CL weight, as in 'das+cl:0.5'."""

    match = _loss_pattern.match(text.strip().lower())

    if not match:
        raise ConfigurationError(f"Invalid loss mode: {text!r} (expected das, cl or das+cl[:eps])")

    eps = match.group("eps")

    if eps is None:
        return match.group("mode"), None

    weight = parse_float(eps)

    if weight is None:
        raise ConfigurationError(f"Invalid CL weight in loss mode: {text!r}")

    return match.group("mode"), weight
