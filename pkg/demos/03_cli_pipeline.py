"""The command-line pipeline end to end on a deliberately tiny config.

Each stage writes a content-addressed run directory (``<stage>-<hash>``)
holding its resolved config, a manifest and its artifacts; re-running a
finished stage is a no-op. Equivalent shell session:

    metadd pretrain --config tiny.yaml
    metadd distill  --config tiny.yaml --metadd off
    metadd eval     --config tiny.yaml --metadd off
    metadd eval     --config tiny.yaml --metadd on
    metadd report   runs/eval-* --out report

    python demos/03_cli_pipeline.py [workdir]
"""
import glob
import os
import sys
import tempfile

import yaml

from metadd.cli import main

work = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="metadd-demo-")
cfg = {
    "output_dir": os.path.join(work, "runs"),
    "dataset": {"name": "digits", "classes": [3, 5], "resolution": 8},
    "pool": {"auxiliaries": [{"family": "conv-plain", "depth": 2, "width": 8},
                             {"family": "attention", "depth": 1, "width": 16, "patch_size": 2}],
             "pretrain": {"warmup": 1, "decay": 2}},
    "distill": {"iterations": 20, "ipc": 3, "snapshot_every": 10, "batch_real": 16,
                "backbone": {"family": "conv-plain", "depth": 2, "width": 8}},
    "eval": {"repeats": 1, "unseen": [{"family": "conv-mobile", "depth": 2, "width": 8}],
             "schedule": {"warmup": 10, "decay": 20}},
}
os.makedirs(work, exist_ok=True)
path = os.path.join(work, "tiny.yaml")
with open(path, "w") as f:
    yaml.safe_dump(cfg, f)

steps = [["pretrain"], ["eval", "--metadd", "off"], ["eval", "--metadd", "on"], ["cam-export"],
         ["eval", "--metadd", "on"]]  # the last one finds its run complete and returns at once
for argv in steps:
    print(f"\n$ metadd {' '.join(argv)} --config {path}")
    code = main(argv + ["--config", path])
    assert code == 0, code

evals = sorted(glob.glob(os.path.join(work, "runs", "eval-*")))
print(f"\n$ metadd report {' '.join(os.path.basename(e) for e in evals)}")
main(["report", *evals, "--out", os.path.join(work, "report")])
print(f"\nplots and report.txt in {os.path.join(work, 'report')}")
print("run directories:")
for d in sorted(os.listdir(os.path.join(work, "runs"))):
    print("  " + d)
