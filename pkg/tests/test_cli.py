import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from consistent_diffusion.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, ablation_summary, main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SMOKE = str(CONFIGS / "dirac-smoke.toml")

SMALL_VERIFY = """
[mixture]
preset = "{preset}"

[verify]
n_points = 100
n_bruteforce = 20
n_martingale = 4
n_rollouts = 1000
martingale_steps = 32
"""

TINY_ABLATION = """
[model]
widths = [4]

[train]
steps = 3
batch_n = 8

[ablation]
seeds = [0, 1, 2]
n_eval = 64
n_projections = 8
sample_steps = 8
score_eval_n = 32
"""


def read_csv(path):
    lines = path.read_text().splitlines()
    return lines[0], lines[1].split(","), [line.split(",") for line in lines[2:]]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert main(["train", SMOKE, "--out", str(out)]) == EXIT_OK
    return out


def test_train_smoke_writes_artifacts(trained):
    for name in ("checkpoint.bin", "trainlog.csv", "resolved-config.json"):
        assert (trained / name).exists()
    header, cols, rows = read_csv(trained / "trainlog.csv")
    assert header == "# trainlog-v1" and cols[0] == "step" and len(rows) == 500
    resolved = json.loads((trained / "resolved-config.json").read_text())
    assert resolved["command"] == "train" and resolved["train"]["steps"] == 500
    assert not list(trained.glob("*.tmp"))


def test_train_rerun_is_byte_identical(trained, tmp_path):
    assert main(["train", SMOKE, "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "trainlog.csv").read_bytes() == (trained / "trainlog.csv").read_bytes()
    assert (tmp_path / "checkpoint.bin").read_bytes() == (trained / "checkpoint.bin").read_bytes()


def test_seed_override_changes_the_run(trained, tmp_path):
    assert main(["train", SMOKE, "--out", str(tmp_path), "--seed", "7"]) == EXIT_OK
    assert (tmp_path / "trainlog.csv").read_bytes() != (trained / "trainlog.csv").read_bytes()


def test_missing_config_is_a_usage_error(tmp_path, capsys):
    missing = tmp_path / "absent.toml"
    assert main(["train", str(missing)]) == EXIT_USAGE
    assert "absent.toml" in capsys.readouterr().err


def test_bad_config_is_a_usage_error(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[train]\nsteps = 10\nspeed = 3\n")
    assert main(["train", str(cfg), "--out", str(tmp_path)]) == EXIT_USAGE
    assert "bad.toml:3" in capsys.readouterr().err


def test_unknown_subcommand_is_a_usage_error():
    assert main(["fly", SMOKE]) == EXIT_USAGE


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_with_numeric_failure(tmp_path):
    cfg = tmp_path / "diverge.toml"
    cfg.write_text("[mixture]\npreset = \"two-diracs-1d\"\n[train]\nsteps = 50\nlr = 1e300\n")
    assert main(["train", str(cfg), "--out", str(tmp_path)]) == EXIT_NUMERIC


def test_generate_emits_n_rows(trained, tmp_path):
    assert main(["generate", SMOKE, "--checkpoint", str(trained / "checkpoint.bin"), "--out", str(tmp_path),
                 "--n", "37"]) == EXIT_OK
    header, cols, rows = read_csv(tmp_path / "samples.csv")
    assert header == "# samples-v1" and cols == ["x0"] and len(rows) == 37
    x = np.array(rows, dtype=float)
    assert abs(np.median(x) - 0.5) < 0.1


def test_generate_samplers_are_reproducible(trained, tmp_path):
    ck = str(trained / "checkpoint.bin")
    for sampler in ("ode", "sde"):
        outs = []
        for k in range(2):
            out = tmp_path / f"{sampler}{k}"
            assert main(["generate", SMOKE, "--checkpoint", ck, "--out", str(out), "--sampler", sampler]) == EXIT_OK
            outs.append((out / "samples.csv").read_bytes())
        assert outs[0] == outs[1]


def test_generate_with_the_oracle(tmp_path):
    assert main(["generate", SMOKE, "--oracle", "--out", str(tmp_path), "--n", "400"]) == EXIT_OK
    _, _, rows = read_csv(tmp_path / "samples.csv")
    x = np.array(rows, dtype=float)[:, 0]
    # the last two Euler steps on a Dirac have c near 2 and 1, leaving a spread near sqrt(6) * dt
    dt = (1 - 1e-3) / 64
    assert abs(x.mean() - 0.5) < 4 * x.std() / np.sqrt(x.size)
    assert x.std() < 4 * dt


def test_generate_rejects_nonpositive_n(trained, tmp_path):
    assert main(["generate", SMOKE, "--oracle", "--out", str(tmp_path), "--n", "0"]) == EXIT_USAGE


@pytest.mark.parametrize("preset", ["two-diracs-1d", "grid4-2d"])
def test_verify_oracle_passes(preset, tmp_path):
    cfg = tmp_path / f"{preset}.toml"
    cfg.write_text(SMALL_VERIFY.format(preset=preset))
    assert main(["verify", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "residuals.json").read_text())
    assert report["all_hard_passed"]
    names = {c["name"] for c in report["checks"]}
    assert {"denoiser_vs_bruteforce", "tweedie", "heat_equation", "score_pde", "conservativeness_asymmetry",
            "martingale_excess_over_3se"} <= names


def test_verify_checkpoint_is_report_only(trained, tmp_path):
    assert main(["verify", SMOKE, "--target", "checkpoint", "--checkpoint", str(trained / "checkpoint.bin"),
                 "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "residuals.json").read_text())
    assert all(not c["hard"] for c in report["checks"])
    assert any(c["name"] == "conservativeness_asymmetry" for c in report["checks"])


def test_corrupted_checkpoint_is_a_usage_error(trained, tmp_path):
    bad = tmp_path / "checkpoint.bin"
    blob = bytearray((trained / "checkpoint.bin").read_bytes())
    bad.write_bytes(bytes(blob[: len(blob) // 2]))
    assert main(["verify", SMOKE, "--target", "checkpoint", "--out", str(tmp_path)]) == EXIT_USAGE
    bad.write_bytes(b"not a checkpoint")
    assert main(["generate", SMOKE, "--out", str(tmp_path)]) == EXIT_USAGE


def test_missing_checkpoint_is_a_usage_error(tmp_path):
    assert main(["verify", SMOKE, "--target", "checkpoint", "--out", str(tmp_path)]) == EXIT_USAGE


def test_sweep_writes_csv_with_errors(trained, tmp_path):
    cfg = tmp_path / "sweep.toml"
    cfg.write_text(Path(SMOKE).read_text() + "\n[sweep]\nn_grid = 3\nn_points = 8\nn_rollouts = 8\n")
    assert main(["sweep", str(cfg), "--checkpoint", str(trained / "checkpoint.bin"), "--out", str(tmp_path),
                 "--mode", "fix-tprime-vary-t"]) == EXIT_OK
    header, cols, rows = read_csv(tmp_path / "sweep.csv")
    assert header == "# sweep-v1" and cols == ["mode", "t", "t_prime", "value", "std_error"]
    assert len(rows) == 3 and all(r[0] == "fix-tprime-vary-t" and float(r[4]) >= 0 for r in rows)


def test_sweep_invalid_mode(tmp_path):
    assert main(["sweep", SMOKE, "--oracle", "--out", str(tmp_path), "--mode", "diagonal"]) == EXIT_USAGE


def test_ablate_reports_four_arms_and_honors_seeds(tmp_path):
    cfg = tmp_path / "abl.toml"
    cfg.write_text(TINY_ABLATION)
    assert main(["ablate", str(cfg), "--out", str(tmp_path), "--seeds", "4", "6"]) == EXIT_OK
    report = json.loads((tmp_path / "ablation.json").read_text())
    assert [r["seed"] for r in report["runs"]] == [4, 6]
    assert report["arms"] == ["dsm_only", "dsm_consistency", "masked_consistency", "masked_early_stop",
                              "masked_control"]
    assert report["summary"]["n_seeds"] == 2
    resolved = json.loads((tmp_path / "resolved-config.json").read_text())
    assert resolved["options"]["seeds"] == [4, 6]


def test_ablation_summary_counts():
    def run(seed, es, full, dc, do, mc, ctl):
        return {"seed": seed, "arms": {
            "masked_early_stop": {"quality_sw": es}, "masked_consistency": {"quality_sw": full, "score_mse_masked": mc},
            "dsm_consistency": {"quality_sw": dc}, "dsm_only": {"quality_sw": do},
            "masked_control": {"score_mse_masked": ctl}}}

    s = ablation_summary([run(0, 0.3, 0.2, 0.1, 0.2, 1.0, 2.0), run(1, 0.1, 0.2, 0.3, 0.2, 2.0, 1.0)])
    assert s["counts"] == {"early_stop_worse_than_full": 1, "consistency_not_worse_than_dsm": 1,
                           "masked_score_mse_below_control": 1}


def test_console_entry_point():
    done = subprocess.run([sys.executable, "-m", "consistent_diffusion", "--help"], capture_output=True, text=True)
    assert done.returncode == 0
    for command in ("train", "generate", "verify", "sweep", "ablate"):
        assert command in done.stdout
