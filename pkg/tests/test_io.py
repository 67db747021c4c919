import json
import math

import numpy as np

from twistray.io import dumps, read_csv, write_csv, write_svg


def test_json_is_canonical():
    text = dumps({"b": np.float64(1.5), "a": [np.int64(2), math.inf, np.array([1.0, math.nan])]})
    assert text == dumps(json.loads(text))
    assert json.loads(text) == {"a": [2, None, [1.0, None]], "b": 1.5}


def test_csv_round_trip(tmp_path):
    p = tmp_path / "a.csv"
    rows = np.array([[0.1, 1.0 / 3.0], [2.0, -1e-300]])
    write_csv(p, ["u", "v"], rows)
    header, back = read_csv(p)
    assert header == ["u", "v"] and np.array_equal(back, rows)


def test_svg_contents(tmp_path):
    p = tmp_path / "a.svg"
    write_svg(p, [np.array([[0.0, 0.0], [0.5, 0.5]])], circles=[(0.0, 0.0, 1.0), (0.0, 0.0, 0.5)],
              outlines=[np.array([[1, 0], [0, 1], [-1, 0]])])
    text = p.read_text()
    assert text.count("<circle") == 2 and text.count("<polyline") == 1 and text.count("<polygon") == 1
    assert text.startswith("<?xml")
