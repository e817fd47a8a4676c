import json
import math

import numpy as np
import pytest

from anpvs.errors import NumericalError
from anpvs.report import canonical_json, read_report, write_report


class TestCanonicalJson:
    def test_sorted_keys_and_rounding(self):
        text = canonical_json({"b": 1.0 / 3.0, "a": np.float64(2.0), "c": np.int64(3)})
        assert list(json.loads(text)) == ["a", "b", "c"]
        assert json.loads(text)["b"] == 0.333333

    def test_nan_refused_with_path(self):
        with pytest.raises(NumericalError) as info:
            canonical_json({"eval": {"acc": [0.5, math.nan]}})
        assert info.value.diagnostics["path"] == "$.eval.acc[1]"

    def test_infinity_as_string(self):
        assert json.loads(canonical_json({"xflops": math.inf}))["xflops"] == "inf"

    def test_to_dict_objects(self):
        class Thing:
            def to_dict(self):
                return {"x": 1}

        assert json.loads(canonical_json({"t": Thing()})) == {"t": {"x": 1}}

    def test_identical_bytes(self, tmp_path):
        report = {"z": np.arange(3) / 7.0, "flag": np.bool_(True)}
        write_report(report, tmp_path / "a.json")
        write_report(dict(reversed(list(report.items()))), tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert read_report(tmp_path / "a.json")["flag"] is True
