import json
import subprocess
import sys

import pytest

from samlab.cli import main
from samlab.harness.config import GOLDEN_CONFIGS


def write_cfg(tmp_path, name="matrix_factorization", **updates):
    obj = json.loads(json.dumps(GOLDEN_CONFIGS[name]))
    for section, upd in updates.items():
        if isinstance(upd, dict):
            obj.setdefault(section, {}).update(upd)
        else:
            obj[section] = upd
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(obj))
    return path


class TestCliBasics:
    def test_version_exit_zero(self, capsys):
        assert main(["version"]) == 0
        out = capsys.readouterr().out
        assert out.startswith("samlab ")
        assert out.strip().split()[-1].count(".") == 2

    def test_missing_config_file_exit_one(self, tmp_path, capsys):
        code = main(["run", "--config", str(tmp_path / "missing.json")])
        assert code == 1
        assert "not found" in capsys.readouterr().err

    def test_unknown_flag_exit_two(self):
        proc = subprocess.run(
            [sys.executable, "-m", "samlab.cli", "run", "--nope"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 2
        assert "usage" in proc.stderr.lower()

    def test_schema_violation_exit_one_with_path(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"experiment": "teacher_student", "seeds": [0],
                                    "optimizer": {"eta": -2}}))
        assert main(["run", "--config", str(path)]) == 1
        assert "optimizer.eta" in capsys.readouterr().err


class TestCliRun:
    def test_run_writes_artifacts(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, seeds=[0], train={"epochs": 3}, params={"ranks": [4]})
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
        assert (out / "summary.json").exists()
        assert (out / "losses.csv").exists()

    def test_run_twice_summary_identical_modulo_wall_time(self, tmp_path):
        cfg = write_cfg(tmp_path, seeds=[0], train={"epochs": 3}, params={"ranks": [4]})
        outs = []
        for name in ("o1", "o2"):
            out = tmp_path / name
            assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
            outs.append(json.loads((out / "summary.json").read_text()))
        for summary in outs:
            summary.pop("wall_time_s")
        assert json.dumps(outs[0], sort_keys=True) == json.dumps(outs[1], sort_keys=True)


class TestCliSweep:
    def test_sweep_prints_table(self, tmp_path, capsys):
        cfg = write_cfg(
            tmp_path, name="rho_grid", seeds=[0],
            data={"n_train": 128, "n_test": 64}, train={"epochs": 2},
            model={"width": 12}, params={"grid": [0.01, 0.1]},
        )
        assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "sw")]) == 0
        out = capsys.readouterr().out
        assert "rho_star=" in out
        assert (tmp_path / "sw" / "rho_table.csv").exists()


class TestCliStabilityAnalyze:
    @pytest.fixture()
    def run_dir(self, tmp_path):
        cfg = write_cfg(
            tmp_path, name="one_hidden_relu", seeds=[0, 1],
            train={"steps": 400, "snapshot_every": 100},
            params={"widths": [8]},
        )
        out = tmp_path / "exp"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
        return out / "runs" / "m8_gd_s0"

    def test_stability_report_from_record(self, run_dir, capsys):
        code = main(["stability", "--record", str(run_dir), "--eta", "0.1",
                     "--rho", "0.05", "--samples", "8"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert "lmax_stability" in payload and "s2_sq" in payload

    def test_analyze_segments(self, run_dir, capsys):
        assert main(["analyze", "--record", str(run_dir), "--kind", "segments"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["segments"] >= 1

    def test_analyze_pca_needs_anchors(self, run_dir, capsys):
        assert main(["analyze", "--record", str(run_dir), "--kind", "pca"]) == 1

    def test_analyze_pca_with_anchors(self, run_dir, tmp_path, capsys):
        other = run_dir.parent / "m8_sam_s0"
        out_csv = tmp_path / "proj.csv"
        code = main(["analyze", "--record", str(run_dir), "--kind", "pca",
                     "--anchors", str(other), str(run_dir.parent / "m8_gd_s1"),
                     "--out", str(out_csv)])
        assert code == 0
        assert out_csv.exists()
        payload = json.loads(capsys.readouterr().out)
        assert len(payload["explained"]) == 2

    def test_analyze_beta_alpha(self, run_dir, tmp_path, capsys):
        out_csv = tmp_path / "ba.csv"
        code = main(["analyze", "--record", str(run_dir), "--kind", "beta-alpha",
                     "--out", str(out_csv)])
        assert code == 0
        assert out_csv.exists()


class TestCliGenData:
    def test_mnist_surrogate_idx(self, tmp_path, capsys):
        code = main(["gen-data", "--kind", "mnist_surrogate",
                     "--out", str(tmp_path / "mnist"), "--n", "64"])
        assert code == 0
        paths = json.loads(capsys.readouterr().out)
        from samlab.data import load_mnist_idx

        ds = load_mnist_idx(paths["train_images"], paths["train_labels"])
        assert len(ds) == 64

    def test_blobs_written(self, tmp_path):
        assert main(["gen-data", "--kind", "blobs", "--out", str(tmp_path / "b"),
                     "--n", "32"]) == 0
        from samlab.data import load_dataset

        ds = load_dataset(tmp_path / "b" / "train")
        assert len(ds) == 32
