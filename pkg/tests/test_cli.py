import hashlib
import json
import subprocess

import numpy as np
import pytest

from dirforge.cli import main
from dirforge.volume import load_volume

SPEC_JSON = {
    "dims": [16, 16, 16],
    "spacing_mm": [0.9, 0.9, 2.0],
    "seed": 0,
    "landmark_count": 8,
    "deformation": {"type": "rigid_shift", "shift_mm": [0.9, 0.0, 0.0]},
}

CFG_JSON = {
    "epochs_global": 1,
    "epochs_local": 1,
    "steps_per_epoch": 1,
    "patch_size": [16, 16, 16],
    "overlap": [8, 8, 8],
    "global_downsample_target": 16,
    "seed": 0,
}


def write_spec(tmp_path, name="spec.json", spec=None):
    path = tmp_path / name
    path.write_text(json.dumps(spec or SPEC_JSON))
    return str(path)


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture
def phantom_dir(tmp_path):
    spec = write_spec(tmp_path)
    out = tmp_path / "ph"
    assert main(["phantom", "--spec", spec, "--out", str(out)]) == 0
    return out


def test_phantom_outputs_and_manifest(phantom_dir):
    manifest = json.loads((phantom_dir / "manifest.json").read_text())
    files = manifest["files"]
    for name in ("moving.json", "moving.bin", "target.json", "target.bin",
                 "truth_dvf.json", "truth_dvf.bin"):
        assert name in files
        assert sha(phantom_dir / name) == files[name]
    assert manifest["seed"] == 0
    for csv_name in ("landmarks_moving.csv", "landmarks_target.csv"):
        rows = (phantom_dir / csv_name).read_text().strip().split("\n")
        assert len(rows) == 1 + 8  # header + landmark_count


def test_phantom_rerun_is_byte_identical(tmp_path, phantom_dir):
    spec = write_spec(tmp_path, "spec2.json")
    out2 = tmp_path / "ph2"
    assert main(["phantom", "--spec", spec, "--out", str(out2)]) == 0
    m1 = json.loads((phantom_dir / "manifest.json").read_text())["files"]
    m2 = json.loads((out2 / "manifest.json").read_text())["files"]
    assert m1 == m2


def test_phantom_bump_peak_matches_spec(tmp_path):
    spec = dict(SPEC_JSON)
    spec["deformation"] = {"type": "gaussian_bump", "center_mm": [7.2, 7.2, 16.0],
                           "peak_mm": [3.0, 0.0, 0.0], "sigma_mm": 12.0}
    path = write_spec(tmp_path, "bump.json", spec)
    out = tmp_path / "bump"
    assert main(["phantom", "--spec", path, "--out", str(out)]) == 0
    raw = np.frombuffer((out / "truth_dvf.bin").read_bytes(), dtype="<f4")
    assert np.abs(raw).max() == pytest.approx(3.0, abs=1e-3)  # stored in mm


def run_training(tmp_path, phantom_dir, epochs=(1, 1)):
    pairs = tmp_path / "pairs.json"
    pairs.write_text(json.dumps({"pairs": [{
        "moving": str(phantom_dir / "moving"),
        "target": str(phantom_dir / "target"),
    }]}))
    cfg = dict(CFG_JSON)
    cfg["epochs_global"], cfg["epochs_local"] = epochs
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    ckpt = tmp_path / "ckpt"
    rc = main(["train", "--pairs", str(pairs), "--config", str(cfg_path),
               "--out", str(ckpt)])
    return rc, ckpt


def test_train_register_evaluate_round_trip(tmp_path, phantom_dir):
    rc, ckpt = run_training(tmp_path, phantom_dir)
    assert rc == 0
    for name in ("global_gen", "global_disc", "local_gen", "local_disc"):
        assert (ckpt / f"{name}.json").exists()
        assert (ckpt / f"{name}.bin").exists()
    frozen = json.loads((ckpt / "config.json").read_text())
    assert frozen["weights"] == {"alpha": 200.0, "beta": 1.0, "gamma": 10.0,
                                 "delta": 5.0, "mu1": 1.0, "mu2": 0.5}
    history = (ckpt / "loss_history.csv").read_text().strip().split("\n")
    assert history[0] == "epoch,stage,sim,adv_g,adv_d,reg,total"
    assert len(history) == 1 + 2  # one epoch per stage

    reg_out = tmp_path / "reg"
    rc = main(["register", "--moving", str(phantom_dir / "moving"),
               "--target", str(phantom_dir / "target"),
               "--ckpt", str(ckpt), "--out", str(reg_out)])
    assert rc == 0
    deformed = load_volume(str(reg_out / "deformed"))
    assert deformed.dims == (16, 16, 16)
    timing = json.loads((reg_out / "timing.json").read_text())
    assert timing["total_s"] > 0 and timing["patch_count"] == 1

    report = tmp_path / "report"
    rc = main(["evaluate", "--deformed", str(reg_out / "deformed"),
               "--target", str(phantom_dir / "target"),
               "--dvf", str(reg_out / "final_dvf"),
               "--landmarks-moving", str(phantom_dir / "landmarks_moving.csv"),
               "--landmarks-target", str(phantom_dir / "landmarks_target.csv"),
               "--out", str(report)])
    assert rc == 0
    obj = json.loads((tmp_path / "report.json").read_text())
    assert obj["body_hu"] == -300.0 and obj["bone_hu"] == 300.0
    csv_lines = (tmp_path / "report.csv").read_text().strip().split("\n")
    assert csv_lines[0] == "fraction,tre_mean,tre_std,mae,ncc,dsc,jac_min,fold_frac"


def test_evaluate_threshold_flags_echoed(tmp_path, phantom_dir):
    report = tmp_path / "r2"
    rc = main(["evaluate", "--deformed", str(phantom_dir / "target"),
               "--target", str(phantom_dir / "target"),
               "--dvf", str(phantom_dir / "truth_dvf"),
               "--landmarks-moving", str(phantom_dir / "landmarks_moving.csv"),
               "--landmarks-target", str(phantom_dir / "landmarks_target.csv"),
               "--out", str(report), "--body-hu", "-250", "--bone-hu", "350"])
    assert rc == 0
    obj = json.loads((tmp_path / "r2.json").read_text())
    assert obj["body_hu"] == -250.0 and obj["bone_hu"] == 350.0


def test_evaluate_truth_dvf_is_oracle_registration(tmp_path, phantom_dir):
    report = tmp_path / "oracle"
    rc = main(["evaluate", "--deformed", str(phantom_dir / "moving"),
               "--target", str(phantom_dir / "target"),
               "--dvf", str(phantom_dir / "truth_dvf"),
               "--landmarks-moving", str(phantom_dir / "landmarks_moving.csv"),
               "--landmarks-target", str(phantom_dir / "landmarks_target.csv"),
               "--out", str(report)])
    assert rc == 0
    obj = json.loads((tmp_path / "oracle.json").read_text())
    assert obj["fractions"]["1"]["tre_mean"] <= 1e-3


def test_zero_epoch_training_keeps_initialisation(tmp_path, phantom_dir):
    rc, ckpt = run_training(tmp_path, phantom_dir, epochs=(0, 0))
    assert rc == 0
    history = (ckpt / "loss_history.csv").read_text().strip().split("\n")
    assert history == ["epoch,stage,sim,adv_g,adv_d,reg,total"]
    from dirforge.model import init_generator_params
    from dirforge.nn import load_params
    init = init_generator_params("global", 0)
    saved = load_params(str(ckpt / "global_gen"))
    for name, t in init.tensors.items():
        assert np.array_equal(saved[name], t.data)


def test_info_reports_header_and_checksum(tmp_path, phantom_dir, capsys):
    rc = main(["info", "--file", str(phantom_dir / "moving.json")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "dims: 16 16 16" in out
    assert "channels: 1" in out
    manifest = json.loads((phantom_dir / "manifest.json").read_text())
    assert manifest["files"]["moving.bin"] in out

    rc = main(["info", "--file", str(phantom_dir / "truth_dvf")])
    out = capsys.readouterr().out
    assert "channels: 3" in out


def test_info_slice_writes_pgm(tmp_path, phantom_dir, capsys):
    out_img = tmp_path / "slice.pgm"
    rc = main(["info", "--file", str(phantom_dir / "target"), "--slice", "8",
               "--out", str(out_img)])
    assert rc == 0
    data = out_img.read_bytes()
    assert data.startswith(b"P5\n16 16\n255\n")
    assert len(data) == len(b"P5\n16 16\n255\n") + 16 * 16


def test_exit_codes(tmp_path, capsys):
    assert main(["phantom", "--out", str(tmp_path)]) == 1          # missing --spec
    assert main(["info", "--file", str(tmp_path / "missing")]) == 2
    bad_spec = tmp_path / "bad.json"
    bad_spec.write_text("{not json")
    assert main(["phantom", "--spec", str(bad_spec), "--out", str(tmp_path / "x")]) == 2
    spec = tmp_path / "deform.json"
    spec.write_text(json.dumps({**SPEC_JSON,
                                "deformation": {"type": "twist"}}))
    assert main(["phantom", "--spec", str(spec), "--out", str(tmp_path / "y")]) == 2


def test_register_identity_checkpoints_give_identity(tmp_path, phantom_dir):
    rc, ckpt = run_training(tmp_path, phantom_dir, epochs=(0, 0))
    assert rc == 0
    reg_out = tmp_path / "ident"
    rc = main(["register", "--moving", str(phantom_dir / "moving"),
               "--target", str(phantom_dir / "moving"),  # moving == target
               "--ckpt", str(ckpt), "--out", str(reg_out)])
    assert rc == 0
    assert (reg_out / "deformed.bin").read_bytes() == (phantom_dir / "moving.bin").read_bytes()
    dvf_raw = np.frombuffer((reg_out / "final_dvf.bin").read_bytes(), dtype="<f4")
    assert np.all(dvf_raw == 0.0)


def test_workers_env_var_fallback(tmp_path, monkeypatch):
    from dirforge.cli import build_parser
    monkeypatch.setenv("DIRFORGE_WORKERS", "3")
    args = build_parser().parse_args(["register", "--moving", "m", "--target", "t",
                                      "--ckpt", "c", "--out", "o"])
    assert args.workers == 3


def test_console_entry_point(tmp_path):
    proc = subprocess.run(["dirforge", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "dirforge" in proc.stdout


def test_seed_override_changes_outputs(tmp_path):
    spec = write_spec(tmp_path)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(["phantom", "--spec", spec, "--out", str(out_a), "--seed", "1"]) == 0
    assert main(["phantom", "--spec", spec, "--out", str(out_b)]) == 0
    ma = json.loads((out_a / "manifest.json").read_text())
    mb = json.loads((out_b / "manifest.json").read_text())
    assert ma["seed"] == 1 and mb["seed"] == 0
    assert ma["files"]["target.bin"] != mb["files"]["target.bin"]
