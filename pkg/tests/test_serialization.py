"""Tests for deterministic JSON emission and atomic writes.

Oracle: Python's float parser.  A 17-significant-digit decimal string
determines a double uniquely, so parsing what we emit must recover the
exact bit pattern.
"""

from __future__ import annotations

import math
import os
import struct

import numpy as np
import pytest

from slanc.serialization import (
    atomic_write_bytes,
    atomic_write_text,
    dumps,
    format_double,
    loads,
)


def _bits(x: float) -> int:
    return struct.unpack("<Q", struct.pack("<d", x))[0]


def test_format_double_round_trips_landmarks():
    for x in (0.0, -0.0, 1.0, -1.0, 0.1, 1e-5, 65504.0, 2.0**-24, 1e300, 5e-324):
        assert _bits(float(format_double(x))) == _bits(x)


def test_format_double_round_trips_random_doubles():
    rng = np.random.default_rng(123)
    mantissas = rng.uniform(-1.0, 1.0, size=20000)
    exponents = rng.integers(-300, 300, size=20000)
    for m, e in zip(mantissas.tolist(), exponents.tolist()):
        x = math.ldexp(m, int(e))
        assert _bits(float(format_double(x))) == _bits(x)


def test_format_double_specials():
    assert format_double(math.inf) == "Infinity"
    assert format_double(-math.inf) == "-Infinity"
    assert format_double(math.nan) == "NaN"
    assert math.isnan(loads(dumps({"x": math.nan}))["x"])
    assert loads(dumps({"x": math.inf}))["x"] == math.inf


def test_dumps_loads_round_trip():
    doc = {
        "name": "table",
        "count": 3,
        "ok": True,
        "missing": None,
        "values": [0.1, 2.0**-30, 1.0 / 3.0, -65504.0],
        "nested": {"s": 16.078829222430947, "flags": [False, True]},
    }
    assert loads(dumps(doc)) == doc


def test_dumps_deterministic_with_trailing_newline():
    doc = {"a": [1.5, 2], "b": {"c": "text"}}
    first, second = dumps(doc), dumps(doc)
    assert first == second
    assert first.endswith("\n")


def test_dumps_preserves_insertion_order():
    text = dumps({"zebra": 1, "apple": 2})
    assert text.index('"zebra"') < text.index('"apple"')


def test_dumps_rejects_unsupported():
    with pytest.raises(TypeError):
        dumps({"x": object()})
    with pytest.raises(TypeError):
        dumps({1: "non-string key"})


def test_dumps_empty_containers():
    assert loads(dumps({"a": [], "b": {}})) == {"a": [], "b": {}}


def test_atomic_write_replaces_contents(tmp_path):
    path = tmp_path / "out.json"
    atomic_write_text(str(path), "first\n")
    atomic_write_text(str(path), "second\n")
    assert path.read_text() == "second\n"
    atomic_write_bytes(str(path), b"\x00\x01")
    assert path.read_bytes() == b"\x00\x01"
    # No temp litter left behind.
    assert os.listdir(tmp_path) == ["out.json"]
