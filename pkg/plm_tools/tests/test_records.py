"""
Unit tests for result records and their file formats.

Run with: pytest plm_tools/tests/test_records.py -v
"""

import io
import json
import os
import shutil
import tempfile

import numpy as np
import pandas as pd
import pytest

from plm_tools.dml import DmlConfig, fit_dml
from plm_tools.hd import HdConfig, fit_hd
from plm_tools.records import (
    dml_record,
    hd_record,
    plot_data_frame,
    read_records,
    sim_records,
    write_records,
)
from plm_tools.simgen import GeneratorSpec, ReplicateRecord, SimReport, generate


@pytest.fixture(scope="module")
def sim():
    return generate(GeneratorSpec("hd-i", 300, p=6, seed=12))


@pytest.fixture(scope="module")
def hd_fit(sim):
    return fit_hd(sim.dataset, HdConfig(seed=1, bootstrap_draws=0))


@pytest.fixture(scope="module")
def dml_fit(sim):
    cfg = DmlConfig.for_learner("penalized-linear", k_outer=2, k_inner=2, bootstrap_draws=0)
    return fit_dml(sim.dataset, cfg)


@pytest.fixture
def report():
    records = (
        ReplicateRecord(0, 11, 0.52, 0.40, 0.64, 0.06),
        ReplicateRecord(1, 12, ok=False, error="[alpha] did not converge"),
        ReplicateRecord(2, 13, 0.47, 0.35, 0.59, 0.06),
    )
    return SimReport("hd-i", 500, 200, "hd", 0.5, records, mse=0.00065, bias=0.005,
                     cp=1.0, n_ok=2, failures=1, runtime_seconds=12.5)


class TestRecordContents:
    """Fields of the fit and simulation records"""

    def test_hd_record(self, hd_fit):
        rec = hd_record(hd_fit, {"seed": 1})
        assert rec["command"] == "fit-hd" and rec["seed"] == 1
        assert rec["beta_hat"] == hd_fit.beta_hat
        assert rec["p"] == 6 and rec["n"] == 300
        for stage in ("initial_gamma", "alpha", "gamma_calibrated"):
            assert rec[f"lambda_{stage}"] > 0
            assert rec[f"kkt_{stage}"] <= 1e-6
        assert rec["fold_seed"] == hd_fit.fold_seed

    def test_dml_record(self, dml_fit):
        rec = dml_record(dml_fit, {"learner": "penalized-linear"})
        assert rec["command"] == "fit-dml"
        assert rec["k_outer"] == 2 and rec["r_variant"] == "difference"
        assert rec["breve_beta_fold_1"] == dml_fit.breve_betas[0]
        assert rec["learner_t_fold_2"] == "penalized-linear"
        assert rec["oracle"] is False

    def test_sim_records(self, report):
        records = sim_records(report, {"seed": 3})
        assert records[0]["record"] == "summary" and records[0]["seed"] == 3
        assert records[0]["reps"] == 3 and records[0]["failures"] == 1
        assert "runtime_seconds" not in records[0]
        assert [r["replicate"] for r in records[1:]] == [0, 1, 2]
        assert records[2]["ok"] is False and "alpha" in records[2]["error"]

    def test_plot_data_excludes_failures(self, report):
        frame = plot_data_frame(report)
        assert list(frame.columns) == ["replicate", "beta_hat", "ci_low", "ci_high"]
        assert frame["replicate"].tolist() == [0, 2]


class TestFormats:
    """Writing and reading record files"""

    @pytest.fixture
    def temp_dir(self):
        temp_dir = tempfile.mkdtemp()
        yield temp_dir
        shutil.rmtree(temp_dir)

    def test_json_round_trip_is_exact(self, hd_fit, temp_dir):
        rec = hd_record(hd_fit)
        path = os.path.join(temp_dir, "fit.jsonl")
        write_records([rec], path)
        back = read_records(path)
        assert len(back) == 1
        assert back[0] == json.loads(json.dumps(rec))
        assert back[0]["beta_hat"] == hd_fit.beta_hat
        assert back[0]["se"] == hd_fit.inference.se

    def test_csv_round_trip_is_exact(self, dml_fit, temp_dir):
        rec = dml_record(dml_fit)
        path = os.path.join(temp_dir, "fit.csv")
        write_records([rec], path, fmt="csv-records")
        frame = pd.read_csv(path, float_precision="round_trip")
        assert frame.loc[0, "beta_hat"] == dml_fit.beta_hat
        assert frame.loc[0, "ci_high"] == dml_fit.inference.ci_high

    def test_simulation_json_lines(self, report, temp_dir):
        path = os.path.join(temp_dir, "sim.jsonl")
        write_records(sim_records(report), path)
        back = read_records(path)
        assert len(back) == 4
        assert back[0]["mse"] == 0.00065
        assert back[2]["beta_hat"] is None and back[2]["ok"] is False

    def test_failed_replicates_are_strict_json(self, report, temp_dir):
        path = os.path.join(temp_dir, "sim.jsonl")
        write_records(sim_records(report), path)
        with open(path) as f:
            text = f.read()
        assert "NaN" not in text
        for line in text.splitlines():
            json.loads(line, parse_constant=pytest.fail)

    def test_table(self, report):
        buf = io.StringIO()
        write_records(sim_records(report), buf, fmt="table")
        text = buf.getvalue()
        assert text.splitlines()[0].startswith("record")
        assert "mse" in text and "0.00065" in text
        assert "did not converge" in text

    def test_stdout(self, report, capsys):
        write_records(sim_records(report)[:1], "-")
        out = capsys.readouterr().out
        assert json.loads(out)["config"] == "hd-i"

    def test_unknown_format(self, report):
        with pytest.raises(ValueError, match="format"):
            write_records(sim_records(report), io.StringIO(), fmt="xml")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
