"""Baseline distillation engines (gradient matching, distribution matching) and the MetaDD loop."""
import dataclasses
import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from . import container
from .errors import ConfigError, ContractError, NumericError
from .losses import LossBreakdown, LossWeights, total_loss
from .models import ArchitectureSpec, build_model
from .seeding import make_generator, substream_seed


@dataclass
class SyntheticDataset:
    images: torch.Tensor
    labels: torch.Tensor
    ipc: int
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return self.images.shape[0]

    def validate(self):
        counts = torch.bincount(self.labels, minlength=self.num_classes)
        if (counts != self.ipc).any():
            raise ContractError(f"expected {self.ipc} images per class, got {counts.tolist()}")
        if self.images.numel() and (self.images.min() < 0 or self.images.max() > 1):
            raise ContractError("synthetic pixels outside [0, 1]")
        return self

    def save(self, path, saved_at=None):
        meta = {"ipc": self.ipc, "num_classes": self.num_classes, "provenance": self.provenance,
                "config_hash": self.provenance.get("config_hash")}
        arrays = {"images": self.images.detach().cpu().float().numpy(),
                  "labels": self.labels.cpu().numpy().astype("int64")}
        container.write(path, "synthetic", meta, arrays, saved_at=saved_at)

    @classmethod
    def load(cls, path):
        header, arrays = container.read(path, expected_kind="synthetic")
        m = header["meta"]
        return cls(torch.from_numpy(arrays["images"]), torch.from_numpy(arrays["labels"]),
                   m["ipc"], m["num_classes"], m["provenance"])

    def checksum(self):
        return hashlib.sha256(self.images.detach().cpu().numpy().tobytes()).hexdigest()


@dataclass
class DistillConfig:
    baseline: str = "dm"
    metadd: bool = True
    iterations: int = 200
    lr_img: float = 1.0
    ipc: int = 10
    batch_real: int = 64            # per class
    batch_syn: Optional[int] = None  # per class; None uses every synthetic image
    init: str = "real"
    weights: LossWeights = field(default_factory=LossWeights)
    momentum: float = 0.0
    seed: int = 0
    backbone: dict = field(default_factory=lambda: {"family": "conv-plain", "depth": 3, "width": 32})
    cam_size: Optional[int] = None
    max_cam_batch: int = 512
    snapshot_every: int = 0
    dc_outer_loop: int = 10
    dc_inner_steps: int = 10
    dc_lr_net: float = 0.01

    def validate(self):
        if self.baseline not in ("dc", "dm"):
            raise ConfigError(f"baseline must be 'dc' or 'dm', got {self.baseline!r}")
        if self.iterations < 0 or self.lr_img < 0:
            raise ConfigError("iterations and lr_img must be non-negative")
        if self.ipc < 1 or self.batch_real < 1 or (self.batch_syn is not None and self.batch_syn < 1):
            raise ConfigError("ipc and batch sizes must be positive")
        if self.batch_syn is not None and self.batch_syn > self.ipc:
            raise ConfigError(f"batch_syn {self.batch_syn} exceeds ipc {self.ipc}")
        if self.init not in ("real", "noise"):
            raise ConfigError(f"init must be 'real' or 'noise', got {self.init!r}")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)

    def config_hash(self):
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def init_synthetic(train_x, train_y, num_classes, ipc, mode="real", seed=0) -> SyntheticDataset:
    if ipc < 1:
        raise ContractError("ipc must be >= 1")
    if num_classes * ipc > 0.1 * train_x.shape[0]:
        raise ContractError(f"|S| = {num_classes * ipc} exceeds 10% of |T| = {train_x.shape[0]}")
    g = make_generator(seed, "init")
    labels = torch.arange(num_classes).repeat_interleave(ipc)
    if mode == "noise":
        images = torch.rand((num_classes * ipc, *train_x.shape[1:]), generator=g, dtype=train_x.dtype)
    elif mode == "real":
        chunks = []
        for c in range(num_classes):
            idx = torch.nonzero(train_y == c).flatten()
            if idx.numel() < ipc:
                raise ContractError(f"class {c} has {idx.numel()} samples, fewer than ipc={ipc}")
            chunks.append(train_x[idx[torch.randperm(idx.numel(), generator=g)[:ipc]]])
        images = torch.cat(chunks).clone()
    else:
        raise ContractError(f"unknown init mode {mode!r}")
    return SyntheticDataset(images, labels, ipc, num_classes, {"init": mode, "init_seed": seed})


def _classes_present(ys, yt):
    cls = sorted(set(ys.tolist()) | set(yt.tolist()))
    keep = []
    for c in cls:
        if not (ys == c).any() or not (yt == c).any():
            warnings.warn(f"class {c} missing from one of the batches; skipped")
            continue
        keep.append(c)
    return keep


def _match_distance(gr, gs):
    if gr.dim() == 1:
        # biases and norm scales are not matched
        return gs.new_zeros(())
    gr = gr.reshape(gr.shape[0], -1)
    gs = gs.reshape(gs.shape[0], -1)
    cos = (gr * gs).sum(-1) / (gr.norm(dim=-1) * gs.norm(dim=-1) + 1e-6)
    return (1 - cos).sum()


def dc_loss(backbone, xs, ys, xt, yt):
    """Per-class layerwise (1 - cosine) distance between real and synthetic parameter gradients."""
    params = [p for p in backbone.parameters() if p.requires_grad]
    loss = xs.new_zeros(())
    for c in _classes_present(ys, yt):
        real = F.cross_entropy(backbone(xt[yt == c]), yt[yt == c])
        g_real = [g.detach() for g in torch.autograd.grad(real, params)]
        syn = F.cross_entropy(backbone(xs[ys == c]), ys[ys == c])
        g_syn = torch.autograd.grad(syn, params, create_graph=True)
        for gr, gs in zip(g_real, g_syn):
            loss = loss + _match_distance(gr, gs)
    return loss


def dm_loss(backbone, xs, ys, xt, yt):
    """Per-class squared distance between mean real and mean synthetic embeddings."""
    loss = xs.new_zeros(())
    for c in _classes_present(ys, yt):
        with torch.no_grad():
            er = backbone.embed(xt[yt == c]).mean(0)
        es = backbone.embed(xs[ys == c]).mean(0)
        loss = loss + ((er - es) ** 2).sum()
    return loss


class BaselineEngine:
    """Owns the backbone and produces L_dd for a (B_s, B_t) pair."""
    name = ""

    def __init__(self, spec: ArchitectureSpec, seed: int):
        self.spec = spec
        self.seed = seed
        self.backbone = None

    def begin_step(self, step):
        pass

    def loss(self, xs, ys, xt, yt):
        raise NotImplementedError

    def after_update(self, step, images, labels):
        pass


class DMEngine(BaselineEngine):
    """Fresh randomly initialised backbone every step; never trained."""
    name = "dm"

    def begin_step(self, step):
        self.backbone = build_model(self.spec, substream_seed(self.seed, "backbone", step))
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.backbone.train()

    def loss(self, xs, ys, xt, yt):
        return dm_loss(self.backbone, xs, ys, xt, yt)


class DCEngine(BaselineEngine):
    """Backbone re-initialised every ``outer_loop`` steps and trained on S between updates."""
    name = "dc"

    def __init__(self, spec, seed, outer_loop=10, inner_steps=10, lr_net=0.01):
        super().__init__(spec, seed)
        self.outer_loop = outer_loop
        self.inner_steps = inner_steps
        self.lr_net = lr_net
        self.opt = None

    def begin_step(self, step):
        if step % self.outer_loop == 0:
            self.backbone = build_model(self.spec, substream_seed(self.seed, "backbone", step))
            self.backbone.train()
            self.opt = torch.optim.SGD(self.backbone.parameters(), lr=self.lr_net, momentum=0.5)

    def loss(self, xs, ys, xt, yt):
        return dc_loss(self.backbone, xs, ys, xt, yt)

    def after_update(self, step, images, labels):
        if (step + 1) % self.outer_loop == 0:
            return
        x = images.detach()
        for _ in range(self.inner_steps):
            loss = F.cross_entropy(self.backbone(x), labels)
            self.opt.zero_grad(set_to_none=True)
            loss.backward()
            self.opt.step()


def make_engine(config: DistillConfig, num_classes, in_channels, resolution) -> BaselineEngine:
    spec = ArchitectureSpec(**{"num_classes": num_classes, "input_resolution": resolution,
                               "in_channels": in_channels, **config.backbone})
    seed = substream_seed(config.seed, "engine")
    if config.baseline == "dm":
        return DMEngine(spec, seed)
    return DCEngine(spec, seed, config.dc_outer_loop, config.dc_inner_steps, config.dc_lr_net)


def baseline_breakdown(l_dd) -> LossBreakdown:
    z = torch.zeros((), dtype=l_dd.dtype)
    return LossBreakdown(l_dd, z, z, z, l_dd)


def metadd_step(engine, pool, xs, ys, xt, yt, config: DistillConfig, velocity=None):
    """One update of the synthetic batch.

    Returns ``(new_xs, breakdown, velocity)``. With MetaDD off only L_dd drives
    the update; with it on the CAM terms are added. Pixels are clamped to [0, 1].
    """
    x = xs.detach().clone().requires_grad_(True)
    l_dd = engine.loss(x, ys, xt, yt)
    if config.metadd:
        if pool is None or pool.M == 0:
            raise ContractError("MetaDD needs a non-empty auxiliary pool")
        if x.shape[0] > config.max_cam_batch:
            raise ConfigError(f"B_s of {x.shape[0]} exceeds max_cam_batch={config.max_cam_batch}")
        bb_logits = engine.backbone(x)
        cam_size = None if config.cam_size is None else (config.cam_size, config.cam_size)
        try:
            br = total_loss(l_dd, pool, x, ys, bb_logits, config.weights, cam_size=cam_size)
        except NumericError as e:
            raise NumericError(f"step aborted: {e}", component=e.component) from e
    else:
        br = baseline_breakdown(l_dd)
        if not torch.isfinite(l_dd):
            raise NumericError("non-finite l_dd", component="l_dd", breakdown=br)
    (g,) = torch.autograd.grad(br.total, x)
    if not torch.isfinite(g).all():
        raise NumericError("non-finite gradient w.r.t. synthetic pixels", component="grad", breakdown=br)
    step = g
    if config.momentum:
        velocity = g if velocity is None else config.momentum * velocity + g
        step = velocity
    new = (x.detach() - config.lr_img * step).clamp_(0.0, 1.0)
    return new, br, velocity


def _sample_syn(labels, num_classes, per_class, g):
    if per_class is None:
        return torch.arange(labels.shape[0])
    idx = []
    for c in range(num_classes):
        ci = torch.nonzero(labels == c).flatten()
        idx.append(ci[torch.randperm(ci.numel(), generator=g)[:per_class]])
    return torch.cat(idx)


def _sample_real(class_idx, per_class, g):
    return torch.cat([ci[torch.randperm(ci.numel(), generator=g)[:per_class]] for ci in class_idx])


def distill_run(config: DistillConfig, train_x, train_y, num_classes, pool=None,
                log_path=None, snapshot_dir=None, callback=None):
    """Algorithm loop. Returns ``(SyntheticDataset, log)`` where ``log`` is a list of loss records."""
    config.validate()
    if config.metadd and (pool is None or pool.M == 0):
        raise ContractError("metadd=on requires a pretrained auxiliary pool")
    syn = init_synthetic(train_x, train_y, num_classes, config.ipc, config.init, seed=config.seed)
    engine = make_engine(config, num_classes, train_x.shape[1], train_x.shape[-1])
    g = make_generator(config.seed, "batches")
    class_idx = [torch.nonzero(train_y == c).flatten() for c in range(num_classes)]
    images, labels = syn.images.clone(), syn.labels.clone()
    velocity = torch.zeros_like(images) if config.momentum else None
    chash = config.config_hash()
    prov = {"method": config.baseline, "components": "metadd" if config.metadd else "none",
            "seed": config.seed, "config_hash": chash, "iterations": config.iterations}
    log = []
    logf = open(log_path, "a") if log_path else None

    def snapshot(step, imgs):
        if snapshot_dir:
            s = SyntheticDataset(imgs.clone(), labels.clone(), config.ipc, num_classes,
                                 {**prov, "step": step})
            s.save(os.path.join(snapshot_dir, f"step_{step:06d}.mdd"))

    if config.snapshot_every:
        snapshot(0, images)
    try:
        for k in range(config.iterations):
            engine.begin_step(k)
            sel = _sample_syn(labels, num_classes, config.batch_syn, g)
            real = _sample_real(class_idx, config.batch_real, g)
            vel = velocity[sel] if velocity is not None else None
            try:
                new, br, vel = metadd_step(engine, pool, images[sel], labels[sel],
                                           train_x[real], train_y[real], config, vel)
            except NumericError as e:
                snapshot(k, images)
                e.last_valid = SyntheticDataset(images.clone(), labels.clone(), config.ipc,
                                                num_classes, {**prov, "aborted_at": k})
                raise
            images[sel] = new
            if velocity is not None:
                velocity[sel] = vel
            engine.after_update(k, images, labels)
            rec = br.record(k)
            log.append(rec)
            if logf:
                logf.write(json.dumps(rec) + "\n")
                logf.flush()
            if callback:
                callback(k, images, br)
            if config.snapshot_every and (k + 1) % config.snapshot_every == 0:
                snapshot(k + 1, images)
    finally:
        if logf:
            logf.close()
    out = SyntheticDataset(images, labels, config.ipc, num_classes, prov)
    return out.validate(), log
