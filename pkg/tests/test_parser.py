import math

from pytest import mark, raises

from divlab.errors import ConfigurationError
from divlab.parser import parse_assignment, parse_bool, parse_float, parse_grid_axis, parse_int, parse_list, \
    parse_loss, parse_seeds, parse_value


@mark.parametrize(("text", "expected"), (
        ("0", 0),
        ("42", 42),
        ("-7", -7),
        ("+3", 3)
))
def test_parse_int(text: str, expected: int):
    assert parse_int(text) == expected


@mark.parametrize("text", ("", "1.0", "1e3", "abc", "1 2"))
def test_parse_int_rejects(text: str):
    assert parse_int(text) is None


@mark.parametrize(("text", "expected"), (
        ("0.5", 0.5),
        ("1.", 1.0),
        (".25", 0.25),
        ("1e-3", 0.001),
        ("-2.5E2", -250.0),
        ("3", 3.0)
))
def test_parse_float(text: str, expected: float):
    assert parse_float(text) == expected


def test_parse_float_special_values():
    assert parse_float("inf") == math.inf
    assert parse_float("-inf") == -math.inf

    nan = parse_float("nan")

    assert nan is not None and math.isnan(nan)


@mark.parametrize("text", ("", ".", "e5", "1.2.3", "one"))
def test_parse_float_rejects(text: str):
    assert parse_float(text) is None


@mark.parametrize(("text", "expected"), (
        ("true", True),
        ("True", True),
        ("FALSE", False),
        ("yes", None),
        ("1", None)
))
def test_parse_bool(text: str, expected):
    assert parse_bool(text) == expected


def test_parse_list():
    assert parse_list("[]") == []
    assert parse_list("[1, 2.5, true]") == [1, 2.5, True]
    assert parse_list("[modified, full]") == ["modified", "full"]
    assert parse_list("1, 2") is None


@mark.parametrize(("text", "expected"), (
        ("3", 3),
        ("0.01", 0.01),
        ("true", True),
        ("null", None),
        ("None", None),
        ("[0, 1]", [0, 1]),
        ('"3"', "3"),
        ("best_emd", "best_emd"),
        ("  das+cl ", "das+cl")
))
def test_parse_value(text: str, expected):
    assert parse_value(text) == expected


def test_parse_value_prefers_int():
    value = parse_value("10")

    assert isinstance(value, int)


@mark.parametrize(("text", "expected"), (
        ("align.learning_rate=0.05", ("align", "learning_rate", 0.05)),
        ("mlp.hidden_width = 64", ("mlp", "hidden_width", 64)),
        ("cl_eps=2", (None, "cl_eps", 2)),
        ("report.bandwidth=null", ("report", "bandwidth", None)),
        ("dataset.x1_values=[-1, 0, 1]", ("dataset", "x1_values", [-1, 0, 1]))
))
def test_parse_assignment(text: str, expected):
    assert parse_assignment(text) == expected


@mark.parametrize("text", ("", "=3", "align.", "Align.lr=1", "align.lr", "a.b.c=1"))
def test_parse_assignment_rejects(text: str):
    with raises(ConfigurationError):
        parse_assignment(text)


def test_parse_grid_axis():
    assert parse_grid_axis("align.learning_rate=0.1,0.01") == ("align", "learning_rate", [0.1, 0.01])
    assert parse_grid_axis("cl_eps=[0.5, 1]") == (None, "cl_eps", [0.5, 1])
    assert parse_grid_axis("loss_mode=das,cl") == (None, "loss_mode", ["das", "cl"])
    assert parse_grid_axis("mlp.hidden_width=32") == ("mlp", "hidden_width", [32])


def test_parse_grid_axis_rejects():
    with raises(ConfigurationError):
        parse_grid_axis("cl_eps=[]")

    with raises(ConfigurationError):
        parse_grid_axis("0.1,0.2")


@mark.parametrize(("text", "expected"), (
        ("3", [3]),
        ("0,1,2", [0, 1, 2]),
        (" 4 , 2 ", [4, 2]),
        ("0-4", [0, 1, 2, 3, 4]),
        ("2..3", [2, 3]),
        ("5-5", [5])
))
def test_parse_seeds(text: str, expected):
    assert parse_seeds(text) == expected


@mark.parametrize("text", ("", "4-1", "a", "-1", "1,,2", "1.5"))
def test_parse_seeds_rejects(text: str):
    with raises(ConfigurationError):
        parse_seeds(text)


@mark.parametrize(("text", "expected"), (
        ("das", ("das", None)),
        ("cl", ("cl", None)),
        ("DAS+CL", ("das+cl", None)),
        ("das+cl:0.5", ("das+cl", 0.5)),
        ("cl:1e-2", ("cl", 0.01))
))
def test_parse_loss(text: str, expected):
    assert parse_loss(text) == expected


@mark.parametrize("text", ("", "mse", "das+", "cl:", "cl:1.2.3"))
def test_parse_loss_rejects(text: str):
    with raises(ConfigurationError):
        parse_loss(text)
