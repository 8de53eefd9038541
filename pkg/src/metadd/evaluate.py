"""Cross-architecture evaluation: train fresh models on distilled data and aggregate accuracies."""
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch

from .cam import cam_stack
from .errors import TrainingError
from .losses import ai_loss, cam_variance
from .masks import erase, erased_fraction, hetero_mask, meta_mask
from .models import ArchitectureSpec, Schedule, accuracy, build_model, train_classifier
from .seeding import substream_seed

# initial learning rates per family, held fixed across components
DEFAULT_LR = {"conv-plain": 0.01, "conv-residual": 0.01, "conv-mobile": 0.02, "attention": 0.005}


@dataclass
class EvalArch:
    name: str
    spec: ArchitectureSpec
    group: str = "seen"   # "seen" | "unseen"
    lr: Optional[float] = None


def train_on_distilled(spec, images, labels, val_x, val_y, schedule: Schedule, seed: int, lr=None) -> float:
    """Fresh ``spec`` trained only on ``(images, labels)``; returns top-1 accuracy on the validation split."""
    if images.shape[0] == 0:
        raise TrainingError("empty distilled set", step=0)
    model = build_model(spec, seed)
    sched = Schedule(**{**schedule.__dict__, "lr": lr if lr is not None else schedule.lr})
    train_classifier(model, images.detach(), labels, sched, seed)
    return accuracy(model, val_x, val_y)


@dataclass
class EvalReport:
    runs: Dict[str, List[Optional[float]]] = field(default_factory=dict)
    groups: Dict[str, str] = field(default_factory=dict)
    repeats: int = 3
    failures: Dict[str, List[str]] = field(default_factory=dict)
    config_hash: str = ""
    delta_acc: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def arch_stats(self, name):
        accs = [a for a in self.runs[name] if a is not None]
        if not accs:
            return float("nan"), float("nan")
        return float(np.mean(accs)), float(np.std(accs))

    @property
    def single_repeat(self):
        return self.repeats == 1

    def group_average(self, group):
        means = [self.arch_stats(n)[0] for n, g in self.groups.items() if g == group]
        means = [m for m in means if not math.isnan(m)]
        return float(np.mean(means)) if means else float("nan")

    @property
    def overall_average(self):
        means = [self.arch_stats(n)[0] for n in self.runs]
        means = [m for m in means if not math.isnan(m)]
        return float(np.mean(means)) if means else float("nan")

    def to_dict(self):
        return {
            "runs": self.runs, "groups": self.groups, "repeats": self.repeats,
            "failures": self.failures, "config_hash": self.config_hash,
            "per_arch": {n: dict(zip(("mean", "std"), self.arch_stats(n))) for n in self.runs},
            "seen_average": self.group_average("seen"),
            "unseen_average": self.group_average("unseen"),
            "overall_average": self.overall_average,
            "std_is_placeholder": self.single_repeat,
            "delta_acc": self.delta_acc,
            "extra": self.extra,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(d["runs"], d["groups"], d["repeats"], d.get("failures", {}),
                   d.get("config_hash", ""), d.get("delta_acc"), d.get("extra", {}))

    def render_table(self, title=""):
        seen = [n for n, g in self.groups.items() if g == "seen"]
        unseen = [n for n, g in self.groups.items() if g == "unseen"]
        cols = seen + unseen
        cells = []
        for n in cols:
            m, s = self.arch_stats(n)
            cells.append(f"{100 * m:.1f}±{100 * s:.1f}" + ("*" if self.failures.get(n) else ""))
        head = ["group"] + ["seen"] * len(seen) + ["unseen"] * len(unseen) + ["avg"]
        names = ["arch"] + cols + [""]
        vals = ["acc %"] + cells + [f"{100 * self.overall_average:.1f}"]
        widths = [max(len(a), len(b), len(c)) for a, b, c in zip(head, names, vals)]
        lines = [title] if title else []
        for row in (head, names, vals):
            lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
        lines.append(f"seen avg {100 * self.group_average('seen'):.2f}  "
                     f"unseen avg {100 * self.group_average('unseen'):.2f}  "
                     f"(repeats={self.repeats}{', std not meaningful' if self.single_repeat else ''})")
        return "\n".join(lines)


def cross_arch_report(images, labels, val_x, val_y, archs: List[EvalArch], schedule: Schedule,
                      repeats=3, seed=0, config_hash="") -> EvalReport:
    rep = EvalReport(repeats=repeats, config_hash=config_hash)
    for a in archs:
        rep.groups[a.name] = a.group
        rep.runs[a.name] = []
        lr = a.lr if a.lr is not None else DEFAULT_LR.get(a.spec.family, schedule.lr)
        for r in range(repeats):
            s = substream_seed(seed, "eval", a.name, r)
            try:
                acc = train_on_distilled(a.spec, images, labels, val_x, val_y, schedule, s, lr=lr)
            except TrainingError as e:
                rep.failures.setdefault(a.name, []).append(f"repeat {r}: {e}")
                acc = None
            rep.runs[a.name].append(acc)
    return rep


def delta_acc(acc_same, acc_cross):
    """Accuracy lost when architecture v trains on data distilled by u instead of by v."""
    return acc_same - acc_cross


def total_delta_acc(matrix):
    """Sum of delta_acc over ordered pairs u != v; ``matrix[v][u]`` is v's accuracy on S(u)."""
    m = np.asarray(matrix, dtype=float)
    n = m.shape[0]
    return float(sum(delta_acc(m[v, v], m[v, u]) for v in range(n) for u in range(n) if u != v))


def cam_stacks(pool, images, labels, backbone=None, batch_size=64, create_graph=False):
    """Normalised CAM stacks ``(N, M, H, W)`` for a whole image set (CE-only loss unless a backbone is given)."""
    out = []
    for i in range(0, images.shape[0], batch_size):
        x = images[i:i + batch_size].detach().clone().requires_grad_(True)
        y = labels[i:i + batch_size]
        bl = None if backbone is None else backbone(x)
        ctx = ai_loss(pool, x, y, bl)
        out.append(cam_stack(pool, x, ctx, create_graph=create_graph).maps.detach())
    return torch.cat(out)


def cam_variance_metric(images, labels, pool, backbone=None, batch_size=64) -> float:
    """Mean CAM variance over every sample of a dataset."""
    maps = cam_stacks(pool, images, labels, backbone, batch_size)
    return float(cam_variance(maps, reduce=False).mean())


def erasure_study(train_x, train_y, val_x, val_y, pool, target: EvalArch, schedule: Schedule,
                  seeds=(0, 1, 2), fill="mean", threshold=0.5, batch_size=64):
    """Accuracy of ``target`` trained on the dataset with each mask family erased.

    Variants: ``none``, ``meta`` (all-architecture consensus) and
    ``hetero:<arch>`` for every auxiliary. Returns a list of row dicts with
    mean accuracy, delta vs ``none`` and erased-area fraction.
    """
    maps = cam_stacks(pool, train_x, train_y, batch_size=batch_size)
    mu = meta_mask(maps, threshold)
    mean = train_x.mean(dim=(0, 2, 3))
    variants = {"none": None, "meta": mu}
    for m, arch in enumerate(pool.arch_ids):
        variants[f"hetero:{arch}"] = hetero_mask(maps, m, mu, threshold)
    lr = target.lr if target.lr is not None else DEFAULT_LR.get(target.spec.family, schedule.lr)
    rows = []
    for name, mask in variants.items():
        x = train_x if mask is None else erase(train_x, mask, fill=fill, mean=mean)
        accs = [train_on_distilled(target.spec, x, train_y, val_x, val_y, schedule,
                                   substream_seed(s, "erasure", target.name), lr=lr) for s in seeds]
        rows.append({"variant": name, "accs": accs, "mean": float(np.mean(accs)),
                     "erased_fraction": 0.0 if mask is None else erased_fraction(mask)})
    base = rows[0]["accs"]
    for r in rows:
        r["deltas"] = [a - b for a, b in zip(r["accs"], base)]
        r["delta"] = float(np.mean(r["deltas"]))
    return rows


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
