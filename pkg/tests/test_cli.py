import json
import os
import subprocess
import sys
from importlib import resources

import jsonschema
import pytest

from hamkit import cli

SMALL = [
    "--set", "task.height=8", "--set", "task.width=8", "--set", "task.n_train=24", "--set", "task.n_val=8",
    "--set", "task.n_test=8", "--set", "train.iters_max=6", "--set", "train.eval_interval=3",
    "--set", "model.d_z=8", "--set", "model.ham={d: 8, r: 2, K: 3}",
]


def schema(name):
    return json.loads(resources.files("hamkit").joinpath("schemas", f"{name}.schema.json").read_text())


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def run_json(capsys, name, *argv):
    code, out, err = run(capsys, *argv)
    assert code == 0, err
    payload = json.loads(out)
    jsonschema.validate(payload, schema(name))
    return payload


class TestCost:
    def test_sa(self, capsys):
        rep = run_json(capsys, "cost", "cost", "--block", "sa", "--shape", "512x128x128")
        assert rep["macs"] == pytest.approx(2.92e11, rel=0.01)

    def test_ham_nmf(self, capsys):
        rep = run_json(capsys, "cost", "cost", "--block", "ham-nmf", "--shape", "512x128x128", "--r", "64", "--K", "6")
        assert rep["params"] == pytest.approx(5.2e5, rel=0.02)

    def test_bad_shape(self, capsys):
        code, _, err = run(capsys, "cost", "--block", "sa", "--shape", "512x128")
        assert code == 1 and "shape" in err

    def test_unknown_block(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["cost", "--block", "conv"])
        assert exc.value.code == 1


class TestGradCheck:
    def test_nmf_bptt(self, capsys):
        rep = run_json(capsys, "grad_report", "grad-check", "--ham", "nmf", "--mode", "bptt")
        assert rep["oracle_max_rel_error"] < 1e-4

    @pytest.mark.parametrize("ham", ["vq", "cd", "nmf"])
    def test_one_step_k1(self, capsys, ham):
        rep = run_json(capsys, "grad_report", "grad-check", "--ham", ham, "--mode", "one-step", "--K", "1",
                       "--sizes", "d=6,n=8,r=2")
        assert rep["bptt_max_rel_delta"] < 1e-12

    def test_implicit_probe_diverges(self, capsys):
        code, _, err = run(capsys, "grad-check", "--ham", "probe", "--mode", "implicit", "--lh", "1.5")
        assert code == 2 and "diverge" in err

    def test_implicit_probe_contractive(self, capsys):
        rep = run_json(capsys, "grad_report", "grad-check", "--ham", "probe", "--mode", "implicit", "--lh", "0.5")
        assert rep["oracle_max_rel_error"] < 1e-8

    def test_bad_sizes(self, capsys):
        code, _, _ = run(capsys, "grad-check", "--sizes", "q=3")
        assert code == 1

    def test_writes_file(self, capsys, tmp_path):
        run(capsys, "grad-check", "--ham", "vq", "--out", str(tmp_path))
        jsonschema.validate(json.loads((tmp_path / "grad_report.json").read_text()), schema("grad_report"))


class TestProbeProps:
    def test_prop1(self, capsys):
        import math

        rep = run_json(capsys, "probe", "probe-props", "--prop", "1")
        assert abs(rep["convergence_slope"] - math.log(0.5)) < 0.05

    def test_prop2(self, capsys):
        assert run_json(capsys, "probe", "probe-props", "--prop", "2")["implicit_vs_bptt200_max_abs_delta"] < 1e-5

    def test_prop3(self, capsys):
        rep = run_json(capsys, "probe", "probe-props", "--prop", "3", "--probe", "tanh")
        assert rep["prop3_h0_holds"] and rep["prop3_x_holds"] and rep["grad_x_bound_holds"]


class TestGenData:
    def test_byte_identical(self, capsys, tmp_path):
        for name in ("a", "b"):
            assert run(capsys, "gen-data", "--out", str(tmp_path / name), *SMALL)[0] == 0
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_refuses_overwrite(self, capsys, tmp_path):
        run(capsys, "gen-data", "--out", str(tmp_path / "d"), *SMALL)
        assert run(capsys, "gen-data", "--out", str(tmp_path / "d"), *SMALL)[0] == 3
        assert run(capsys, "gen-data", "--out", str(tmp_path / "d"), "--force", *SMALL)[0] == 0

    def test_missing_parent(self, capsys, tmp_path):
        code, _, err = run(capsys, "gen-data", "--out", str(tmp_path / "no" / "d"), *SMALL)
        assert code == 3 and str(tmp_path / "no") in err

    def test_invalid_spec_writes_nothing(self, capsys, tmp_path):
        code, _, _ = run(capsys, "gen-data", "--out", str(tmp_path / "d"), *SMALL, "--set", "task.k=9")
        assert code == 1 and not (tmp_path / "d").exists()

    def test_bad_override(self, capsys, tmp_path):
        assert run(capsys, "gen-data", "--out", str(tmp_path / "d"), "--set", "task.colour=3")[0] == 1


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--out", str(root / "data"), *SMALL]) == 0
    assert cli.main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--seeds", "1,2",
                     "--plot", *SMALL]) == 0
    return root


class TestTrain:
    def test_layout_and_schema(self, trained):
        run_dir = trained / "run"
        for rel in ("config.snapshot", "report.json", "training.png", "seed_1/metrics.csv",
                    "checkpoints/seed_2/manifest.json"):
            assert (run_dir / rel).exists(), rel
        report = json.loads((run_dir / "report.json").read_text())
        jsonschema.validate(report, schema("train_report"))
        assert (run_dir / "seed_1/metrics.csv").read_text().startswith("iter,loss,acc,miou\n")

    def test_summary_line(self, capsys, tmp_path):
        code, out, _ = run(capsys, "train", "--out", str(tmp_path), "--seeds", "1,2,3,4,5", *SMALL,
                           "--set", "train.iters_max=2", "--set", "train.eval_interval=2")
        assert code == 0
        assert out.startswith("mIoU best(mean): ") and "acc best(mean): " in out

    def test_deterministic(self, capsys, trained, tmp_path):
        run(capsys, "train", "--data", str(trained / "data"), "--out", str(tmp_path), "--seeds", "1,2", *SMALL)
        for rel in ("report.json", "seed_1/metrics.csv", "seed_2/metrics.csv", "config.snapshot"):
            assert (tmp_path / rel).read_bytes() == (trained / "run" / rel).read_bytes()

    def test_snapshot_reruns(self, capsys, trained, tmp_path):
        snap = trained / "run" / "config.snapshot"
        run(capsys, "train", "--config", str(snap), "--data", str(trained / "data"), "--out", str(tmp_path))
        assert (tmp_path / "report.json").read_bytes() == (trained / "run" / "report.json").read_bytes()

    def test_resume(self, capsys, trained, tmp_path):
        args = ["train", "--data", str(trained / "data"), "--out", str(tmp_path), "--seeds", "1", *SMALL]
        assert run(capsys, *args, "--stop-after", "4")[0] == 0
        assert run(capsys, *args, "--resume")[0] == 0
        assert (tmp_path / "seed_1/metrics.csv").read_bytes() == (trained / "run/seed_1/metrics.csv").read_bytes()

    def test_invalid_grad_mode(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--out", str(tmp_path), *SMALL, "--set", "model.ham.grad_mode=adjoint")
        assert code == 1
        assert "{bptt, one-step, implicit}" in err

    def test_evaluate(self, capsys, trained):
        rep = run_json(capsys, "evaluation", "evaluate", "--checkpoint", str(trained / "run/checkpoints/seed_1"),
                       "--data", str(trained / "data"))
        report = json.loads((trained / "run" / "report.json").read_text())
        assert rep["acc"] == report["seeds"]["1"]["val_acc"]

    def test_spectrum(self, capsys, trained, tmp_path):
        rep = run_json(capsys, "spectrum", "spectrum", "--checkpoint", str(trained / "run/checkpoints/seed_1"),
                       "--data", str(trained / "data"), "--out", str(tmp_path))
        assert rep["branch_ratio_after_r"] == pytest.approx(1.0, abs=1e-9)
        rows = (tmp_path / "spectrum_branch.csv").read_text().splitlines()
        assert float(rows[rep["r"]].split(",")[4]) == pytest.approx(1.0, abs=1e-9)
        assert (tmp_path / "spectrum_block.png").stat().st_size > 0

    def test_compare(self, capsys, trained, tmp_path):
        rep = run_json(capsys, "comparison", "compare", "--seeds", "1", "--out", str(tmp_path), *SMALL)
        assert set(rep["modes"]) == {"one-step", "bptt"}
        jsonschema.validate(json.loads((tmp_path / "comparison.json").read_text()), schema("comparison"))


class TestBench:
    def test_outputs(self, capsys, tmp_path):
        rep = run_json(capsys, "bench", "bench", "--ns", "64,128", "--repeats", "5", "--channels", "8",
                       "--out", str(tmp_path))
        assert set(rep["tables"]) == {"ham-nmf", "sa"}
        assert (tmp_path / "bench.csv").read_text().startswith("block,n,median_s,iqr_s,ratio\n")
        assert (tmp_path / "bench.png").exists()


class TestProcess:
    def test_entry_point_and_threads(self, tmp_path):
        env = {**os.environ, "HAMKIT_THREADS": "1"}
        out = subprocess.run([sys.executable, "-m", "hamkit.cli", "cost", "--block", "ham-cd"],
                             capture_output=True, text=True, env=env, check=True)
        assert json.loads(out.stdout)["module"] == "ham-cd"

    def test_usage_exit_code(self):
        out = subprocess.run([sys.executable, "-m", "hamkit.cli", "frobnicate"], capture_output=True, text=True)
        assert out.returncode == 1
