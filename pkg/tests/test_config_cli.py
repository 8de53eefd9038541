import json
import os
import subprocess
import sys

import pytest
import yaml

from metadd import cli, config as C, pipeline
from metadd.errors import ConfigError, ContractError, LockError
from metadd.runs import COMPLETE, FAILED, PENDING, RUNNING, RunLock, RunManifest

# a pipeline small enough to run every stage in seconds
TINY = {
    "dataset": {"name": "digits", "classes": [3, 5], "resolution": 8},
    "pool": {
        "auxiliaries": [{"family": "conv-plain", "depth": 2, "width": 8},
                        {"family": "attention", "depth": 1, "width": 16, "patch_size": 2}],
        "pretrain": {"warmup": 1, "decay": 1},
    },
    "distill": {"iterations": 3, "ipc": 2, "snapshot_every": 2, "batch_real": 8,
                "backbone": {"family": "conv-plain", "depth": 2, "width": 8}},
    "eval": {"repeats": 1, "unseen": [{"family": "conv-mobile", "depth": 2, "width": 8}],
             "schedule": {"warmup": 2, "decay": 3}},
    "erasure": {"target": {"family": "conv-plain", "depth": 2, "width": 8}, "seeds": [0],
                "schedule": {"warmup": 1, "decay": 1}},
    "cam_export": {"max_samples": 2},
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({**TINY, "output_dir": str(tmp_path / "runs")}))
    return p


# --- config ---------------------------------------------------------------------

def test_hash_ignores_key_order():
    a = {"x": 1, "y": {"b": 2, "a": [1, 2]}}
    b = {"y": {"a": [1, 2], "b": 2}, "x": 1}
    assert C.config_hash(a) == C.config_hash(b)
    assert C.config_hash(a) != C.config_hash({**a, "x": 2})


def test_yaml_key_order_does_not_change_stage_hash(tmp_path):
    p1, p2 = tmp_path / "a.yaml", tmp_path / "b.yaml"
    p1.write_text("seed: 3\ndistill:\n  ipc: 5\n  lr_img: 0.5\n")
    p2.write_text("distill:\n  lr_img: 0.5\n  ipc: 5\nseed: 3\n")
    assert C.stage_hash(C.load(p1), "distill") == C.stage_hash(C.load(p2), "distill")


def test_unknown_key_names_nearest():
    with pytest.raises(ConfigError, match="distill.iteratons.*distill.iterations"):
        C.resolve({"distill": {"iteratons": 3}})
    with pytest.raises(ConfigError, match="nearest valid key: 'seed'"):
        C.resolve({"sed": 1})


def test_precedence_flag_over_file_over_default(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 7\ndistill:\n  ipc: 4\n")
    cfg = C.load(p, {"distill": {"ipc": 9}})
    assert cfg["seed"] == 7 and cfg["distill"]["ipc"] == 9
    assert cfg["distill"]["lr_img"] == C.DEFAULTS["distill"]["lr_img"]


def test_bad_yaml_and_values(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("distill: [unclosed\n")
    with pytest.raises(ConfigError):
        C.load(p)
    with pytest.raises(ConfigError):
        C.resolve({"dataset": {"classes": []}})
    with pytest.raises(ConfigError, match="divisible"):
        C.resolve({"pool": {"auxiliaries": [{"family": "attention", "depth": 1, "width": 8, "patch_size": 5}]}})


def test_stage_hash_scoping():
    base = C.resolve()
    other = C.resolve({"eval": {"repeats": 2}})
    assert C.stage_hash(base, "distill") == C.stage_hash(other, "distill")
    assert C.stage_hash(base, "eval") != C.stage_hash(other, "eval")


# --- manifest and lock ------------------------------------------------------------

def test_manifest_never_reopens_complete_stage(tmp_path):
    m = RunManifest("h", "distill")
    m.set_status("distill", RUNNING)
    m.set_status("distill", COMPLETE)
    for s in (PENDING, RUNNING, FAILED):
        with pytest.raises(ContractError):
            m.set_status("distill", s)
    m.add_artifact("a")
    m.add_artifact("a")
    m.save(tmp_path)
    back = RunManifest.load(tmp_path)
    assert back.is_complete() and back.artifacts == ["a"]
    assert set(back.component_versions) >= {"metadd", "torch", "numpy"}
    assert os.listdir(tmp_path) == ["manifest.json"]


def test_lock_excludes_and_records_owner(tmp_path):
    with RunLock(tmp_path):
        owner = json.loads((tmp_path / ".lock").read_text())
        assert owner["pid"] == os.getpid()
        with pytest.raises(LockError, match="locked"):
            RunLock(tmp_path).__enter__()
    assert not (tmp_path / ".lock").exists()


def test_stale_lock_from_dead_process_is_taken_over(tmp_path):
    dead = subprocess.run([sys.executable, "-c", "import os; print(os.getpid())"], capture_output=True, text=True)
    import socket
    (tmp_path / ".lock").write_text(json.dumps({"pid": int(dead.stdout), "host": socket.gethostname()}))
    with RunLock(tmp_path):
        assert json.loads((tmp_path / ".lock").read_text())["pid"] == os.getpid()


# --- CLI ------------------------------------------------------------------------

def test_metadd_on_off_gives_two_run_dirs(cfg_file, tmp_path, capsys):
    assert cli.main(["distill", "--config", str(cfg_file), "--metadd", "off"]) == 0
    assert cli.main(["distill", "--config", str(cfg_file), "--metadd", "on"]) == 0
    runs = tmp_path / "runs"
    dirs = sorted(d for d in os.listdir(runs) if d.startswith("distill-"))
    assert len(dirs) == 2
    cfgs = [yaml.safe_load((runs / d / "config.yaml").read_text()) for d in dirs]
    diff = {k for k in cfgs[0]["distill"] if cfgs[0]["distill"][k] != cfgs[1]["distill"][k]}
    assert diff == {"metadd"}
    assert {k: v for k, v in cfgs[0].items() if k != "distill"} == {k: v for k, v in cfgs[1].items() if k != "distill"}
    for d in dirs:
        man = RunManifest.load(runs / d)
        assert man.is_complete() and d.endswith(man.config_hash[:12])
        assert all(os.path.exists(a) for a in man.artifacts)
        lines = (runs / d / "loss_log.jsonl").read_text().splitlines()
        assert [json.loads(x)["step"] for x in lines] == [0, 1, 2]

    assert cli.main(["distill", "--config", str(cfg_file), "--metadd", "on"]) == 0
    assert "already complete" in capsys.readouterr().out


def test_full_stage_chain_and_report(cfg_file, tmp_path, capsys):
    base = ["--config", str(cfg_file)]
    for stage in ("pretrain", "eval", "cam-export", "erase-study"):
        assert cli.main([stage] + base) == 0
    assert cli.main(["eval"] + base + ["--metadd", "off"]) == 0
    runs = tmp_path / "runs"
    evals = sorted(str(runs / d) for d in os.listdir(runs) if d.startswith("eval-"))
    assert len(evals) == 2
    rep = json.loads(open(os.path.join(evals[0], "report.json")).read())
    assert [c[0] for c in rep["extra"]["accuracy_vs_step"]] == [0, 2, 3]
    assert set(rep["groups"].values()) == {"seen", "unseen"}

    cam_dir = next(runs / d for d in os.listdir(runs) if d.startswith("cam-export-"))
    assert len(json.loads((cam_dir / "cams" / "cams.json").read_text())) == 4
    assert (cam_dir / "masks" / "sample0_meta.png").exists()
    er_dir = next(runs / d for d in os.listdir(runs) if d.startswith("erase-study-"))
    rows = json.loads((er_dir / "erasure.json").read_text())["rows"]
    assert rows[0]["variant"] == "none" and rows[0]["delta"] == 0

    out = tmp_path / "rep"
    assert cli.main(["report"] + evals + ["--out", str(out)]) == 0
    text = (out / "report.txt").read_text()
    assert "metadd" in text and "none" in text and "unseen avg" in text
    assert (out / "accuracy_vs_step.png").stat().st_size > 0
    assert (out / "loss_vs_step.png").exists()


def test_cli_error_is_machine_parseable(cfg_file, capsys):
    code = cli.main(["distill", "--config", str(cfg_file), "--set", "distill.iteratons=3"])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config" and "distill.iterations" in err["message"]


def test_cli_report_on_non_eval_dir(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path)]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "contract"


def test_cli_overrides(tmp_path):
    pool = tmp_path / "pool.yaml"
    pool.write_text(yaml.safe_dump([{"family": "conv-mobile", "depth": 2, "width": 8}]))
    args = cli.build_parser().parse_args(["distill", "--seed", "4", "--ipc", "3", "--baseline", "dc",
                                          "--pool", str(pool), "--set", "distill.lr_img=0.25", "--out", "o"])
    cfg = cli.resolve_config(args)
    assert cfg["seed"] == 4 and cfg["distill"]["ipc"] == 3 and cfg["distill"]["baseline"] == "dc"
    assert cfg["distill"]["lr_img"] == 0.25 and cfg["output_dir"] == "o"
    assert cfg["pool"]["auxiliaries"] == [{"family": "conv-mobile", "depth": 2, "width": 8}]
    assert cfg["pool"]["pretrain"] == C.DEFAULTS["pool"]["pretrain"]


def test_console_script_exit_code(tmp_path):
    r = subprocess.run([sys.executable, "-m", "metadd.cli", "distill", "--set", "bogus=1"],
                       capture_output=True, text=True, cwd=tmp_path)
    assert r.returncode == 2
    assert json.loads(r.stderr)["error"] == "config"


def test_stage_run_dir_uses_stage_hash(tmp_path):
    cfg = C.resolve({**TINY, "output_dir": str(tmp_path)})
    d = pipeline.run_dir(cfg, "distill")
    assert os.path.basename(d) == "distill-" + C.stage_hash(cfg, "distill")[:12]
