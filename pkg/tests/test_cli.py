import csv
import hashlib
import json

import numpy as np
import pytest

from tsnf.checkpoint import load_checkpoint
from tsnf.cli import EXIT_CODES, build_parser, gradcheck_suite, main
from tsnf.data import read_csv_matrix, write_csv_matrix
from tsnf.distributions import make_rng

TINY_TRAIN = {"iterations": 40, "batch_size": 64}


def read_metrics(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["metric", "value"]
    return {k: float(v) for k, v in rows[1:]}


def check_manifest(out):
    manifest = json.loads((out / "manifest.json").read_text())["files"]
    on_disk = {p.name for p in out.iterdir()} - {"manifest.json"}
    assert set(manifest) == on_disk
    for name, digest in manifest.items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    return set(manifest)


def run_cli(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def error_of(err):
    doc = json.loads(err.strip().splitlines()[-1])
    assert set(doc) == {"error", "message"}
    return doc


# --- parser --------------------------------------------------------------------


def test_parser_knows_every_subcommand():
    parser = build_parser()
    for cmd in ["experiment-joint", "experiment-hier", "run-two-stage", "run-tsfb", "oracle-report", "gradcheck"]:
        args = parser.parse_args([cmd, "--seed", "3", "--out", "x"])
        assert args.seed == 3 and args.out == "x"


def test_exit_codes_are_distinct_and_nonzero():
    assert len(set(EXIT_CODES.values())) == len(EXIT_CODES)
    assert 0 not in EXIT_CODES.values()


# --- experiment-joint ----------------------------------------------------------

JOINT_FILES = {
    "config.json",
    "data_xy.csv",
    "data_xz.csv",
    "stage1_xy.json",
    "stage1_xz.json",
    "stage1_xy_loss.csv",
    "stage1_xz_loss.csv",
    "stage2.json",
    "stage2_loss.csv",
    "samples.csv",
    "metrics.csv",
    "kde_grids.csv",
    "hist_xy.csv",
    "hist_xz.csv",
    "hist_yz.csv",
}


@pytest.fixture(scope="module")
def small_joint_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "joint.json"
    small_layers = [{"kind": "ar_rq_spline", "hidden": [8]}, {"kind": "actnorm"}]
    doc = {
        "n1": 300,
        "n2": 300,
        "stage1_layers": small_layers,
        "stage2_layers": [{"kind": "ar_rq_spline", "hidden": [8], "conditioning": "base"}, {"kind": "actnorm"}],
        "stage1": TINY_TRAIN,
        "stage2": TINY_TRAIN,
        "n_samples": 2000,
        "grid_points": 11,
        "hist_bins": 5,
    }
    path.write_text(json.dumps(doc))
    return path


def test_experiment_joint_bundle_and_determinism(small_joint_config, tmp_path, capsys):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        code, stdout, _ = run_cli(["experiment-joint", "--config", str(small_joint_config), "--seed", "7", "--out", str(out)], capsys)
        assert code == 0
        assert "E[Y]" in stdout
    assert check_manifest(outs[0]) == JOINT_FILES
    assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()
    assert (outs[0] / "manifest.json").read_bytes() == (outs[1] / "manifest.json").read_bytes()
    header, samples = read_csv_matrix(outs[0] / "samples.csv")
    assert header == ["x", "y", "z"] and samples.shape == (2000, 3)
    m = read_metrics(outs[0] / "metrics.csv")
    assert m["var_x_truth"] == pytest.approx(0.33798912, abs=1e-7)
    assert m["mean_y_truth"] == pytest.approx(0.0, abs=1e-12)


def test_experiment_joint_seed_changes_output(small_joint_config, tmp_path, capsys):
    for seed in ("1", "2"):
        assert run_cli(["experiment-joint", "--config", str(small_joint_config), "--seed", seed, "--out", str(tmp_path / seed)], capsys)[0] == 0
    assert (tmp_path / "1" / "metrics.csv").read_bytes() != (tmp_path / "2" / "metrics.csv").read_bytes()


def test_experiment_joint_unknown_config_keys_listed_together(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"n1": 10, "bogus": 1, "also_bogus": 2}))
    code, _, err = run_cli(["experiment-joint", "--config", str(path), "--out", str(tmp_path / "o")], capsys)
    assert code == EXIT_CODES["config"]
    doc = error_of(err)
    assert doc["error"] == "config"
    assert "bogus" in doc["message"] and "also_bogus" in doc["message"]


def test_experiment_joint_config_values_validated_before_training(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"n1": 0, "support_wall": -0.5}))
    code, _, err = run_cli(["experiment-joint", "--config", str(path), "--out", str(tmp_path / "o")], capsys)
    assert code == EXIT_CODES["config"]
    msg = error_of(err)["message"]
    assert "n1" in msg and "support_wall" in msg
    assert not (tmp_path / "o").exists()


def test_invalid_json_names_line(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n "n1": 10,\n oops\n}')
    code, _, err = run_cli(["experiment-joint", "--config", str(path), "--out", str(tmp_path / "o")], capsys)
    assert code == EXIT_CODES["config"]
    assert "line 3" in error_of(err)["message"]


def test_missing_config_file(tmp_path, capsys):
    code, _, err = run_cli(["experiment-joint", "--config", str(tmp_path / "nope.json")], capsys)
    assert code == EXIT_CODES["config"]
    assert "nope.json" in error_of(err)["message"]


# --- experiment-hier -----------------------------------------------------------


def test_experiment_hier_bundle_and_determinism(tmp_path, capsys):
    path = tmp_path / "hier.json"
    path.write_text(
        json.dumps(
            {
                "n_software": 500,
                "stage1": {"iterations": 30},
                "stage2": {"iterations": 30},
                "tsfb_iterations": 200,
                "n_samples": 1000,
                "grid_points": 11,
            }
        )
    )
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        argv = ["experiment-hier", "--variant", "J6-flat-prior", "--config", str(path), "--seed", "4", "--out", str(out)]
        code, stdout, _ = run_cli(argv, capsys)
        assert code == 0
        assert "tsnf:" in stdout and "tsfb:" in stdout
    files = check_manifest(outs[0])
    assert {"data.csv", "software_draws.csv", "tsnf_samples.csv", "tsfb_chain.csv", "error_table.csv", "metrics.csv"} <= files
    assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()
    assert (outs[0] / "error_table.csv").read_bytes() == (outs[1] / "error_table.csv").read_bytes()
    header, data = read_csv_matrix(outs[0] / "data.csv")
    assert header == ["group", "theta_true", "y"] and data.shape == (6, 3)
    header, _ = read_csv_matrix(outs[0] / "tsnf_samples.csv")
    assert header == [f"theta_{i}" for i in range(1, 7)] + ["gamma"]
    assert json.loads((outs[0] / "config.json").read_text())["A"] is None


def test_experiment_hier_rejects_unknown_variant(tmp_path, capsys):
    path = tmp_path / "hier.json"
    path.write_text(json.dumps({"variant": "J9"}))
    code, _, err = run_cli(["experiment-hier", "--config", str(path), "--out", str(tmp_path / "o")], capsys)
    assert code == EXIT_CODES["config"]
    assert "J9" in error_of(err)["message"]


# --- run-two-stage -------------------------------------------------------------


def write_spec(tmp_path, **extra):
    data = make_rng(0).standard_normal((4000, 1))
    write_csv_matrix(tmp_path / "draws.csv", ["x"], data)
    layers = [{"kind": "ar_rq_spline", "hidden": [8]}, {"kind": "actnorm"}]
    doc = {
        "dim": 1,
        "components": [{"name": "only", "indices": [1], "data": "draws.csv"}],
        "analytic": {"name": "flat"},
        "stage1": {"layers": layers, "train": {"iterations": 600, "batch_size": 500, "learning_rate": 3e-3}},
        "stage2": {
            "layers": [{"kind": "ar_rq_spline", "hidden": [8], "conditioning": "base"}, {"kind": "actnorm"}],
            "train": {"iterations": 1000, "batch_size": 500, "learning_rate": 3e-3},
        },
        "query": make_rng(1).standard_normal((100, 1)).tolist(),
        "n_samples": 5000,
        "seed": 3,
        **extra,
    }
    (tmp_path / "spec.json").write_text(json.dumps(doc))
    return tmp_path / "spec.json"


def test_run_two_stage_degenerate_composition(tmp_path, capsys):
    spec = write_spec(tmp_path)
    out = tmp_path / "out"
    code, stdout, _ = run_cli(["run-two-stage", "--config", str(spec), "--out", str(out)], capsys)
    assert code == 0
    assert "density routes" in stdout
    files = check_manifest(out)
    assert {"stage1_only.json", "stage2.json", "samples.csv", "density_routes.csv"} <= files

    # m=1, flat h: the Stage-2 model should reproduce the Stage-1 density
    g = load_checkpoint(out / "stage1_only.json")
    q = load_checkpoint(out / "stage2.json")
    x = make_rng(2).standard_normal((100, 1))
    assert np.max(np.abs(q.log_prob_np(x) - g.log_prob_np(x))) < 0.1

    header, routes = read_csv_matrix(out / "density_routes.csv")
    assert header == ["x1", "log_composed", "log_flow"]
    assert routes.shape == (100, 3)
    assert np.max(np.abs(routes[:, 1] - routes[:, 2])) < 0.1


def test_run_two_stage_malformed_csv_names_line(tmp_path, capsys):
    spec = write_spec(tmp_path)
    lines = (tmp_path / "draws.csv").read_text().splitlines()
    lines[3] = lines[3] + ",0.5"
    (tmp_path / "draws.csv").write_text("\n".join(lines) + "\n")
    code, _, err = run_cli(["run-two-stage", "--config", str(spec), "--out", str(tmp_path / "o")], capsys)
    assert code == EXIT_CODES["config"]
    msg = error_of(err)["message"]
    assert "line 4" in msg
    assert msg.count(";") == 0  # a single problem


def test_run_two_stage_enumerates_every_problem(tmp_path, capsys):
    spec = write_spec(tmp_path, analytic={"name": "not-a-term"}, combine={"mode": "sum"}, support_margin=-1, support_wall=-2)
    doc = json.loads(spec.read_text())
    doc["components"].append({"name": "ghost", "indices": [1], "data": "missing.csv"})
    doc["stage2"]["layers"].append({"kind": "glow"})
    spec.write_text(json.dumps(doc))
    code, _, err = run_cli(["run-two-stage", "--config", str(spec), "--out", str(tmp_path / "o")], capsys)
    assert code == EXIT_CODES["config"]
    msg = error_of(err)["message"]
    for needle in ("not-a-term", "sum", "support_margin", "support_wall", "missing.csv", "glow"):
        assert needle in msg


def test_run_two_stage_requires_spec(capsys):
    code, _, err = run_cli(["run-two-stage"], capsys)
    assert code == EXIT_CODES["config"]
    assert error_of(err)["error"] == "config"


# --- run-tsfb ------------------------------------------------------------------


def test_run_tsfb_on_pool_file(tmp_path, capsys):
    pool = make_rng(3).normal([-4.0, -5.0], 1.0, (200, 2))
    write_csv_matrix(tmp_path / "pool.csv", ["theta_1", "theta_2"], pool)
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        argv = ["run-tsfb", "--pool", str(tmp_path / "pool.csv"), "--iterations", "300", "--A", "0.5", "--seed", "1", "--out", str(out)]
        code, stdout, _ = run_cli(argv, capsys)
        assert code == 0 and "acceptance rates" in stdout
    assert check_manifest(outs[0]) == {"tsfb_chain.csv", "metrics.csv"}
    assert (outs[0] / "tsfb_chain.csv").read_bytes() == (outs[1] / "tsfb_chain.csv").read_bytes()
    _, chain = read_csv_matrix(outs[0] / "tsfb_chain.csv")
    assert chain.shape == (300, 1 + 2 + 1 + 2)
    assert np.all(np.isin(chain[:, 1], pool[:, 0]))


def test_run_tsfb_simulates_pool_when_none_given(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"n_software": 100, "iterations": 50}))
    code, _, _ = run_cli(["run-tsfb", "--config", str(path), "--out", str(tmp_path / "o")], capsys)
    assert code == 0
    assert "software_draws.csv" in check_manifest(tmp_path / "o")


def test_run_tsfb_ragged_pool_is_a_data_error(tmp_path, capsys):
    (tmp_path / "pool.csv").write_text("a,b\n1,2\n3\n")
    code, _, err = run_cli(["run-tsfb", "--pool", str(tmp_path / "pool.csv"), "--out", str(tmp_path / "o")], capsys)
    assert code == EXIT_CODES["data"]
    assert "line 3" in error_of(err)["message"]


# --- oracle-report -------------------------------------------------------------


def test_oracle_report(tmp_path, capsys):
    out = tmp_path / "o"
    code, _, _ = run_cli(["oracle-report", "--y", "0", "1", "2", "--out", str(out)], capsys)
    assert code == 0
    assert check_manifest(out) == {"marginals.csv", "theta_covariance.csv", "metrics.csv"}
    with (out / "marginals.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["parameter", "mean", "sd"]
    assert rows[1][0] == "theta_1" and float(rows[1][1]) == pytest.approx(0.2, abs=1e-14)
    assert rows[4][0] == "gamma" and float(rows[4][1]) == pytest.approx(1.0, abs=1e-14)
    _, cov = read_csv_matrix(out / "theta_covariance.csv")
    assert cov[0, 0] == pytest.approx(13.0 / 15.0, abs=1e-14)
    m = read_metrics(out / "metrics.csv")
    assert m["quadrature_gamma_sup"] < 1e-4 and m["inverse_identity_error"] < 1e-10


def test_oracle_report_needs_observations(tmp_path, capsys):
    code, _, err = run_cli(["oracle-report", "--out", str(tmp_path / "o")], capsys)
    assert code == EXIT_CODES["config"]
    assert error_of(err)["error"] == "config"


def test_oracle_report_invalid_parameters(tmp_path, capsys):
    code, _, err = run_cli(["oracle-report", "--y", "1", "--sigma", "0", "--out", str(tmp_path / "o")], capsys)
    assert code == EXIT_CODES["config"]


# --- gradcheck -----------------------------------------------------------------


def test_gradcheck_command_passes(tmp_path, capsys):
    code, stdout, _ = run_cli(["gradcheck", "--draws", "3", "--out", str(tmp_path / "o")], capsys)
    assert code == 0
    lines = stdout.strip().splitlines()
    assert len(lines) == 6 and all(line.startswith("PASS") for line in lines)
    assert set(read_metrics(tmp_path / "o" / "gradcheck.csv")) == {
        "actnorm",
        "permutation",
        "affine_coupling",
        "ar_rq_spline",
        "forward_kl",
        "reverse_kl",
    }


def test_gradcheck_failure_has_its_own_exit_code(tmp_path, capsys):
    code, stdout, err = run_cli(["gradcheck", "--draws", "1", "--tol", "0", "--out", str(tmp_path / "o")], capsys)
    assert code == EXIT_CODES["check-failed"]
    assert "FAIL" in stdout
    assert error_of(err)["error"] == "check-failed"


def test_gradcheck_suite_is_deterministic():
    assert gradcheck_suite(2, seed=5) == gradcheck_suite(2, seed=5)
