import csv
import json
from pathlib import Path

import numpy as np
import pytest

from spmc.cli import count_tables, main
from spmc.data_prep import load_dataset

FIXTURES = Path(__file__).parent / "fixtures"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def rows_of(text):
    return list(csv.DictReader(text.splitlines()))


@pytest.fixture
def model_files(tmp_path):
    b = tmp_path / "binom.txt"
    b.write_text("family = bernoulli\nI = 1\nq = 0.5\n")
    m = tmp_path / "mult.txt"
    m.write_text("# uniform 3x3 table\nfamily = multinomial\nI = 3\nJ = 3\nn = 900\np = uniform\n")
    return b, m


class TestEstimate:
    def test_identity_binomial(self, capsys, model_files):
        code, out, _ = run(capsys, "estimate", "--model-file", model_files[0], "--y", "1")
        assert code == 0
        assert float(rows_of(out)[0]["value"]) == pytest.approx(0.5)

    def test_mean_centered_needs_no_newton(self, capsys, model_files):
        code, out, _ = run(capsys, "estimate", "--model-file", model_files[1],
                           "--y", "300,300,300,300")
        assert code == 0 and rows_of(out)[0]["newton_iters"] == "0"

    def test_byte_identical(self, capsys, model_files):
        args = ["estimate", "--model-file", model_files[1], "--y", "310,280,305,290",
                "--n-is", "64", "--seed", "7"]
        _, a, _ = run(capsys, *args)
        _, b, _ = run(capsys, *args)
        assert a == b

    def test_seed_from_environment(self, capsys, model_files, monkeypatch):
        args = ["estimate", "--model-file", model_files[1], "--y", "310,280,305,290"]
        monkeypatch.setenv("SPMC_SEED", "7")
        _, env, _ = run(capsys, *args)
        _, flag, _ = run(capsys, *args, "--seed", "7")
        _, other, _ = run(capsys, *args, "--seed", "8")
        assert env == flag != other

    def test_infeasible_exit_code(self, capsys, model_files):
        code, _, err = run(capsys, "estimate", "--model-file", model_files[1],
                           "--y", "901,0,0,0")
        assert code == 3 and "zero" in err

    def test_usage_error(self, capsys, model_files):
        code, _, _ = run(capsys, "estimate", "--model-file", model_files[1], "--y", "1,2")
        assert code == 2
        with pytest.raises(SystemExit) as exc:
            main(["estimate"])
        assert exc.value.code == 2

    def test_out_file_and_sidecar(self, capsys, model_files, tmp_path):
        out = tmp_path / "est.csv"
        code, printed, _ = run(capsys, "estimate", "--model-file", model_files[0], "--y", "1",
                               "--out", out)
        assert code == 0 and printed == ""
        meta = json.loads(Path(str(out) + ".meta.json").read_text())
        assert meta["seed"] == 0 and meta["command"] == "estimate" and "version" in meta


class TestCountTables:
    def test_one_by_one(self):
        est, se = count_tables([1], [1])
        assert est == pytest.approx(1.0)

    def test_two_by_two(self):
        est, se = count_tables([1, 1], [1, 1], replications=50)
        assert abs(est - 2) < 3 * se

    def test_inconsistent_margins(self):
        assert count_tables([2, 1], [1, 1]) == (0.0, 0.0)

    def test_command(self, capsys):
        code, out, _ = run(capsys, "count-tables", "--rows", "1,1", "--cols", "1,1",
                           "--replications", "20")
        assert code == 0 and rows_of(out)[0]["replications"] == "20"


class TestDataCommands:
    def test_synth_reproducible(self, capsys, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for p in (a, b):
            assert run(capsys, "synth", "--K", 5, "--n", 50, "--seed", 3, "--out", p)[0] == 0
        assert a.read_bytes() == b.read_bytes()
        meta = json.loads(Path(str(a) + ".meta.json").read_text())
        assert len(meta["true_params"]) == 3

    def test_synth_empty(self, capsys, tmp_path):
        p = tmp_path / "e.csv"
        assert run(capsys, "synth", "--K", 0, "--out", p)[0] == 0
        assert p.read_text() == "station_id,n,covariate,r_1,r_2,s_1,s_2\n"

    def test_prep_fixture(self, capsys, tmp_path):
        out = tmp_path / "prep.csv"
        fx = FIXTURES / "prep"
        code, _, _ = run(capsys, "prep", "--round1", fx / "round1.csv", "--round2",
                         fx / "round2.csv", "--out", out)
        assert code == 0
        assert out.read_text() == (fx / "expected_dataset.csv").read_text()
        assert Path(str(out) + ".rejections.csv").read_text() == \
            (fx / "expected_rejections.csv").read_text()

    def test_prep_missing_file(self, capsys, tmp_path):
        code, _, _ = run(capsys, "prep", "--round1", tmp_path / "nope.csv", "--round2",
                         tmp_path / "nope.csv", "--out", tmp_path / "x.csv")
        assert code == 3


class TestFit:
    @pytest.fixture
    def dataset(self, capsys, tmp_path):
        p = tmp_path / "d.csv"
        run(capsys, "synth", "--model", 2, "--K", 12, "--n", 100, "--seed", 1, "--out", p)
        return p

    def test_map_stage_only(self, capsys, tmp_path, dataset):
        out = tmp_path / "fit"
        code, _, _ = run(capsys, "fit", "--data", dataset, "--model", 2, "--stage", "map",
                         "--schedule-scale", 0.02, "--n-is", 16, "--out", out)
        assert code == 0
        names = sorted(p.name for p in out.iterdir() if not p.name.endswith(".json"))
        assert names == ["map.csv", "summary.csv"]
        rows = rows_of((out / "map.csv").read_text())
        assert [r["param"] for r in rows] == ["theta_1_2", "theta_2_2"]

    def test_is_stage_reproducible(self, capsys, tmp_path, dataset):
        outs = [tmp_path / "f1", tmp_path / "f2"]
        for out in outs:
            code, _, _ = run(capsys, "fit", "--data", dataset, "--model", 2, "--stage", "is",
                             "--schedule-scale", 0.02, "--n-is", 16, "--is-draws", 50,
                             "--out", out)
            assert code == 0
        for name in ("posterior_is.csv", "transitions_is.csv", "map.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
        post = rows_of((outs[0] / "posterior_is.csv").read_text())
        assert len(post) == 50 and "log_weight_or_accept" in post[0]

    def test_model3_needs_covariate(self, capsys, dataset):
        code, _, err = run(capsys, "fit", "--data", dataset, "--model", 3, "--stage", "map",
                           "--schedule-scale", 0.01)
        assert code == 3 and "covariate" in err

    def test_compare_identical_models(self, capsys, dataset):
        code, out, _ = run(capsys, "compare", "--data", dataset, "--models", "2,2",
                           "--schedule-scale", 0.02, "--n-is", 16, "--is-draws", 200)
        assert code == 0
        row = rows_of(out)[0]
        assert float(row["log10_bf"]) == 0.0


def test_bench_small(capsys):
    code, out, _ = run(capsys, "bench", "--study", "fig1", "--n-grid", "20,40", "--K", 3,
                       "--replications", 10)
    assert code == 0
    rows = rows_of(out)
    assert len(rows) == 8
    assert set(r["variant"] for r in rows) == {"uniform", "uniform-tilt", "gaussian",
                                               "gaussian-tilt"}


def test_bench_thread_count_does_not_change_output(capsys):
    args = ["bench", "--study", "tail", "--n", 60, "--K", 4, "--n-is", 16, "--replications", 5]
    _, one, _ = run(capsys, *args)
    _, two, _ = run(capsys, *args, "--threads", 2)
    assert one == two
