"""Stage orchestration behind the CLI. Each stage owns one run directory keyed by its config hash."""
import glob
import json
import os

import torch

from . import config as C
from .cam import cam_stack, export_cams
from .distill import DistillConfig, SyntheticDataset, distill_run
from .data import ingest_dataset
from .evaluate import EvalArch, EvalReport, cross_arch_report, erasure_study, train_on_distilled
from .errors import ContractError
from .losses import ai_loss
from .masks import export_mask, hetero_mask, meta_mask
from .models import AuxiliaryPool, Schedule, freeze, load_checkpoint, pretrain, save_checkpoint
from .runs import COMPLETE, FAILED, RUNNING, RunLock, RunManifest, _now


def run_dir(cfg, stage):
    return os.path.join(cfg["output_dir"], f"{stage}-{C.stage_hash(cfg, stage)[:12]}")


def _run_stage(cfg, stage, body, say=print):
    d = run_dir(cfg, stage)
    os.makedirs(d, exist_ok=True)
    with RunLock(d):
        cfg_path = os.path.join(d, "config.yaml")
        if not os.path.exists(cfg_path):
            with open(cfg_path, "w") as f:
                f.write(C.dump(C.stage_config(cfg, stage)))
        if os.path.exists(os.path.join(d, "manifest.json")):
            man = RunManifest.load(d)
        else:
            man = RunManifest(C.stage_hash(cfg, stage), stage)
        if man.is_complete(stage):
            say(f"{stage}: already complete ({d})")
            return d, man
        man.started_at = _now()
        man.set_status(stage, RUNNING)
        man.save(d)
        try:
            body(d, man)
        except BaseException:
            man.set_status(stage, FAILED)
            man.ended_at = _now()
            man.save(d)
            raise
        man.set_status(stage, COMPLETE)
        man.ended_at = _now()
        man.save(d)
        say(f"{stage}: complete ({d})")
    return d, man


def load_data(cfg):
    ds = cfg["dataset"]
    return ingest_dataset(ds["name"], ds["root"], ds["classes"], ds["resolution"])


def _spec(cfg, entry, splits):
    return C.arch_spec(entry, splits.num_classes, splits.resolution, splits.channels)


def stage_pretrain(cfg, splits=None, say=print):
    splits = splits or load_data(cfg)

    def body(d, man):
        sched = cfg["pool"]["pretrain"]
        for i, entry in enumerate(cfg["pool"]["auxiliaries"]):
            spec = _spec(cfg, entry, splits)
            sub = f"pretrain:{i}:{spec.arch_id}"
            path = os.path.join(d, f"aux{i}_{spec.arch_id}.ckpt")
            if man.is_complete(sub) and os.path.exists(path):
                continue
            lr = cfg["pool"]["pretrain_lr"].get(spec.family, 0.01)
            pm = pretrain(spec, (splits.train_x, splits.train_y), Schedule(lr=lr, **sched),
                          C.stage_seed(cfg, "pretrain", i, spec.arch_id), val=(splits.val_x, splits.val_y),
                          dataset_id=f"{cfg['dataset']['name']}:{cfg['dataset']['classes']}")
            save_checkpoint(freeze(pm), path)
            say(f"  {spec.arch_id}: val top-1 {pm.provenance['final_top1']:.3f}")
            man.add_artifact(path)
            man.set_status(sub, COMPLETE)
            man.save(d)

    return _run_stage(cfg, "pretrain", body, say)


def load_pool(cfg, splits=None, say=print) -> AuxiliaryPool:
    d, man = stage_pretrain(cfg, splits, say)
    n = len(cfg["pool"]["auxiliaries"])
    paths = [glob.glob(os.path.join(d, f"aux{i}_*.ckpt"))[0] for i in range(n)]
    auxes = [load_checkpoint(p) for p in paths]
    return AuxiliaryPool([freeze(a) for a in auxes], cfg["dataset"]["resolution"])


def distill_config(cfg) -> DistillConfig:
    return DistillConfig.from_dict({**cfg["distill"], "seed": C.stage_seed(cfg, "distill")})


def stage_distill(cfg, splits=None, say=print):
    splits = splits or load_data(cfg)
    dcfg = distill_config(cfg)
    pool = load_pool(cfg, splits, say) if dcfg.metadd else None

    def body(d, man):
        log_path = os.path.join(d, "loss_log.jsonl")
        if os.path.exists(log_path):
            os.unlink(log_path)
        snaps = os.path.join(d, "snapshots")
        S, _ = distill_run(dcfg, splits.train_x, splits.train_y, splits.num_classes, pool,
                           log_path=log_path, snapshot_dir=snaps)
        out = os.path.join(d, "synthetic.mdd")
        S.save(out)
        man.notes["checksum"] = S.checksum()
        for p in [log_path, out] + sorted(glob.glob(os.path.join(snaps, "*.mdd"))):
            man.add_artifact(p)

    return _run_stage(cfg, "distill", body, say)


def load_synthetic(cfg, splits=None, say=print) -> SyntheticDataset:
    d, _ = stage_distill(cfg, splits, say)
    return SyntheticDataset.load(os.path.join(d, "synthetic.mdd"))


def eval_archs(cfg, splits):
    archs = []
    for entry in cfg["pool"]["auxiliaries"]:
        s = _spec(cfg, entry, splits)
        archs.append(EvalArch(s.arch_id, s, "seen", cfg["eval"]["lr"].get(s.family)))
    for entry in cfg["eval"]["unseen"]:
        s = _spec(cfg, entry, splits)
        name = s.arch_id if s.arch_id not in {a.name for a in archs} else s.arch_id + "-unseen"
        archs.append(EvalArch(name, s, "unseen", cfg["eval"]["lr"].get(s.family)))
    return archs


def stage_eval(cfg, splits=None, say=print):
    splits = splits or load_data(cfg)
    S = load_synthetic(cfg, splits, say)
    ddir = run_dir(cfg, "distill")

    def body(d, man):
        sched = Schedule(**cfg["eval"]["schedule"])
        archs = eval_archs(cfg, splits)
        seed = C.stage_seed(cfg, "eval")
        rep = cross_arch_report(S.images, S.labels, splits.val_x, splits.val_y, archs, sched,
                                cfg["eval"]["repeats"], seed, C.stage_hash(cfg, "eval"))
        curve = []
        if cfg["eval"]["snapshot_curve"]:
            unseen = [a for a in archs if a.group == "unseen"] or archs
            snaps = sorted(glob.glob(os.path.join(ddir, "snapshots", "step_*.mdd")))
            points = {int(os.path.basename(p)[5:11]): p for p in snaps}
            points.setdefault(cfg["distill"]["iterations"], S)
            for step in sorted(points):
                snap = points[step]
                if isinstance(snap, str):
                    snap = SyntheticDataset.load(snap)
                accs = [train_on_distilled(a.spec, snap.images, snap.labels, splits.val_x, splits.val_y,
                                           sched, C.stage_seed(cfg, "curve", a.name), lr=a.lr) for a in unseen]
                curve.append([step, sum(accs) / len(accs)])
        rep.extra = {"accuracy_vs_step": curve, "distill_dir": os.path.abspath(ddir),
                     "components": S.provenance.get("components"), "method": S.provenance.get("method")}
        with open(os.path.join(d, "report.json"), "w") as f:
            f.write(rep.to_json())
        title = f"{S.provenance.get('method')} + {S.provenance.get('components')}"
        with open(os.path.join(d, "report.txt"), "w") as f:
            f.write(rep.render_table(title) + "\n")
        say(rep.render_table(title))
        man.add_artifact(os.path.join(d, "report.json"))
        man.add_artifact(os.path.join(d, "report.txt"))

    return _run_stage(cfg, "eval", body, say)


def stage_cam_export(cfg, splits=None, say=print):
    splits = splits or load_data(cfg)
    S = load_synthetic(cfg, splits, say)
    pool = load_pool(cfg, splits, say)

    def body(d, man):
        n = min(cfg["cam_export"]["max_samples"], len(S))
        x = S.images[:n].clone().requires_grad_(True)
        ctx = ai_loss(pool, x, S.labels[:n])
        stack = cam_stack(pool, x, ctx, create_graph=False)
        entries = export_cams(os.path.join(d, "cams"), stack, list(range(n)), cfg["cam_export"]["colormap"])
        maps = stack.maps.detach()
        mu = meta_mask(maps)
        for b in range(n):
            export_mask(os.path.join(d, "masks", f"sample{b}_meta.png"), mu[b], "meta", pool.arch_ids)
            for m, arch in enumerate(pool.arch_ids):
                export_mask(os.path.join(d, "masks", f"sample{b}_hetero_{arch}.png"),
                            hetero_mask(maps[b], m, mu[b]), "heterogeneous", [arch])
        man.add_artifact(os.path.join(d, "cams", "cams.json"))
        man.add_artifact(os.path.join(d, "masks"))
        say(f"  exported {len(entries)} CAM images")

    return _run_stage(cfg, "cam-export", body, say)


def stage_erase_study(cfg, splits=None, say=print):
    splits = splits or load_data(cfg)
    pool = load_pool(cfg, splits, say)

    def body(d, man):
        er = cfg["erasure"]
        spec = _spec(cfg, er["target"], splits)
        target = EvalArch(spec.arch_id, spec, "seen", cfg["pool"]["pretrain_lr"].get(spec.family))
        rows = erasure_study(splits.train_x, splits.train_y, splits.val_x, splits.val_y, pool, target,
                             Schedule(**er["schedule"]), seeds=[C.stage_seed(cfg, "erasure", s) for s in er["seeds"]],
                             fill=er["fill"])
        with open(os.path.join(d, "erasure.json"), "w") as f:
            json.dump({"target": spec.arch_id, "rows": rows}, f, indent=1)
        lines = [f"target {spec.arch_id}", f"{'variant':<36} {'acc %':>7} {'delta':>7} {'erased':>7}"]
        for r in rows:
            lines.append(f"{r['variant']:<36} {100 * r['mean']:7.2f} {100 * r['delta']:7.2f} "
                         f"{100 * r['erased_fraction']:6.1f}%")
        text = "\n".join(lines)
        with open(os.path.join(d, "erasure.txt"), "w") as f:
            f.write(text + "\n")
        say(text)
        man.add_artifact(os.path.join(d, "erasure.json"))

    return _run_stage(cfg, "erase-study", body, say)


def report(run_dirs, out_dir, say=print):
    """Side-by-side table of eval runs plus accuracy- and CAM-variance-vs-step plots."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    reps = []
    for rd in run_dirs:
        path = os.path.join(rd, "report.json")
        if not os.path.exists(path):
            raise ContractError(f"{rd} has no report.json; pass eval run directories")
        with open(path) as f:
            reps.append((os.path.basename(os.path.normpath(rd)), EvalReport.from_dict(json.load(f))))
    names = []
    for _, r in reps:
        names += [n for n in r.runs if n not in names]
    header = ["arch", "group"] + [label for label, _ in reps]
    rows = []
    for n in names:
        group = next((r.groups[n] for _, r in reps if n in r.groups), "")
        cells = []
        for _, r in reps:
            if n in r.runs:
                m, s = r.arch_stats(n)
                cells.append(f"{100 * m:.1f}±{100 * s:.1f}")
            else:
                cells.append("-")
        rows.append([n, group] + cells)
    for g in ("seen", "unseen"):
        rows.append([f"{g} avg", ""] + [f"{100 * r.group_average(g):.2f}" for _, r in reps])
    rows.append(["components", ""] + [str(r.extra.get("components")) for _, r in reps])
    widths = [max(len(str(row[i])) for row in [header] + rows) for i in range(len(header))]
    text = "\n".join("  ".join(str(v).ljust(w) for v, w in zip(row, widths)) for row in [header] + rows)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.txt"), "w") as f:
        f.write(text + "\n")
    say(text)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, r in reps:
        curve = r.extra.get("accuracy_vs_step") or []
        if curve:
            ax.plot([c[0] for c in curve], [100 * c[1] for c in curve], marker="o", label=label)
    ax.set_xlabel("distillation step")
    ax.set_ylabel("unseen-arch accuracy (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "accuracy_vs_step.png"), dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, r in reps:
        log = os.path.join(r.extra.get("distill_dir", ""), "loss_log.jsonl")
        if os.path.exists(log):
            with open(log) as f:
                recs = [json.loads(line) for line in f if line.strip()]
            ax.plot([q["step"] for q in recs], [q["l_dd"] for q in recs], label=f"{label} l_dd", lw=0.8)
    ax.set_xlabel("distillation step")
    ax.set_ylabel("L_dd")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "loss_vs_step.png"), dpi=120)
    plt.close(fig)
    return text
