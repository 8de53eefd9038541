"""Model zoo: compact conv / residual / mobile / attention classifiers.

Every model maps images ``B x C x H x W`` in [0, 1] to logits ``B x num_classes``
and exposes the tensors CAM extraction needs through ``forward_capture``:

* conv families return the last conv-stage feature maps ``B x K x I x J``;
* the attention family returns an :class:`AttentionFeatures` bundle.

No layer couples samples within a batch (instance/group norm, layer norm), so
per-sample gradients can be taken from the sum of per-sample losses.
"""
import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import container
from .errors import ConfigError, FormatError, TrainingError
from .seeding import make_generator

FAMILIES = ("conv-plain", "conv-residual", "conv-mobile", "attention")
CONV_FAMILIES = ("conv-plain", "conv-residual", "conv-mobile")


@dataclass(frozen=True)
class ArchitectureSpec:
    family: str
    depth: int
    width: int
    num_classes: int
    input_resolution: int
    patch_size: int = 4
    in_channels: int = 3
    heads: int = 4

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unsupported family {self.family!r}; expected one of {FAMILIES}")
        for name in ("depth", "width", "num_classes", "input_resolution", "patch_size", "in_channels", "heads"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ConfigError(f"{name} must be a positive int, got {v!r}")
        if self.family == "attention":
            if self.input_resolution % self.patch_size:
                raise ConfigError(
                    f"attention family: input_resolution {self.input_resolution} "
                    f"not divisible by patch_size {self.patch_size}")
            if self.width % self.heads:
                raise ConfigError(f"embed width {self.width} not divisible by heads {self.heads}")
        if self.family == "conv-plain" and self.input_resolution < 2 ** self.depth:
            raise ConfigError(f"conv-plain depth {self.depth} pools {self.input_resolution}px below 1px")
        if self.family in ("conv-residual", "conv-mobile") and self.input_resolution < 4:
            raise ConfigError(f"{self.family} needs input_resolution >= 4")
        return self

    @property
    def arch_id(self) -> str:
        s = f"{self.family}-d{self.depth}-w{self.width}"
        if self.family == "attention":
            s += f"-p{self.patch_size}"
        return s

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad architecture spec {d!r}: {e}") from None


class AttentionFeatures(NamedTuple):
    attention: torch.Tensor  # B x heads x N, class-token row of the last block (patch columns)
    tokens: torch.Tensor     # B x N x D, patch tokens entering the last block
    cls: torch.Tensor        # B x D, final class-token output


def _norm(c):
    # per-sample instance normalisation with affine params, as in the DC/DM ConvNet
    return nn.GroupNorm(c, c, affine=True)


class ZooModel(nn.Module):
    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec

    @property
    def family(self):
        return self.spec.family

    def fit_input(self, x):
        r = self.spec.input_resolution
        if x.shape[-2:] != (r, r):
            x = F.interpolate(x, size=(r, r), mode="bilinear", align_corners=False)
        return x

    def forward(self, x):
        return self.forward_capture(x)[0]


class ConvNetPlain(ZooModel):
    """depth x [conv3x3 -> instancenorm -> relu -> avgpool2], then a linear head."""

    def __init__(self, spec):
        super().__init__(spec)
        layers, c = [], spec.in_channels
        for _ in range(spec.depth):
            layers += [nn.Conv2d(c, spec.width, 3, padding=1), _norm(spec.width), nn.ReLU(), nn.AvgPool2d(2)]
            c = spec.width
        self.features = nn.Sequential(*layers)
        side = spec.input_resolution // 2 ** spec.depth
        self.classifier = nn.Linear(spec.width * side * side, spec.num_classes)

    def forward_capture(self, x):
        a = self.features(self.fit_input(x))
        return self.classifier(a.flatten(1)), a

    def embed(self, x):
        return self.features(self.fit_input(x)).flatten(1)


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.n1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.n2 = _norm(cout)
        self.short = None
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout))

    def forward(self, x):
        out = F.relu(self.n1(self.conv1(x)))
        out = self.n2(self.conv2(out))
        return F.relu(out + (x if self.short is None else self.short(x)))


class ResNetSmall(ZooModel):
    """Stem conv, (depth - 2) // 2 basic blocks over three stages, pooled linear head."""

    def __init__(self, spec):
        super().__init__(spec)
        w = spec.width
        self.stem = nn.Sequential(nn.Conv2d(spec.in_channels, w, 3, 1, 1, bias=False), _norm(w), nn.ReLU())
        nblocks = max(1, (spec.depth - 2) // 2)
        widths = [w, 2 * w, 2 * w]
        blocks, cin = [], w
        for i in range(nblocks):
            stage = min(2, i * 3 // nblocks)
            first_in_stage = i == 0 or stage != min(2, (i - 1) * 3 // nblocks)
            stride = 2 if (first_in_stage and stage > 0) else 1
            blocks.append(_BasicBlock(cin, widths[stage], stride))
            cin = widths[stage]
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(cin, spec.num_classes)

    def forward_capture(self, x):
        a = self.blocks(self.stem(self.fit_input(x)))
        return self.fc(a.mean((2, 3))), a

    def embed(self, x):
        return self.blocks(self.stem(self.fit_input(x))).mean((2, 3))


class _InvertedResidual(nn.Module):
    def __init__(self, cin, cout, stride, expand=2):
        super().__init__()
        hid = cin * expand
        self.use_res = stride == 1 and cin == cout
        self.body = nn.Sequential(
            nn.Conv2d(cin, hid, 1, bias=False), _norm(hid), nn.ReLU6(),
            nn.Conv2d(hid, hid, 3, stride, 1, groups=hid, bias=False), _norm(hid), nn.ReLU6(),
            nn.Conv2d(hid, cout, 1, bias=False), _norm(cout),
        )

    def forward(self, x):
        y = self.body(x)
        return x + y if self.use_res else y


class MobileNetSmall(ZooModel):
    """Stem conv, depth - 2 inverted-residual blocks (two stride-2), 1x1 head conv, pooled linear."""

    def __init__(self, spec):
        super().__init__(spec)
        w = spec.width
        self.stem = nn.Sequential(nn.Conv2d(spec.in_channels, w, 3, 1, 1, bias=False), _norm(w), nn.ReLU6())
        nblocks = max(1, spec.depth - 2)
        down = {nblocks // 3, (2 * nblocks) // 3} if nblocks >= 3 else {0}
        blocks, cin = [], w
        for i in range(nblocks):
            cout = w if i < nblocks // 2 else 2 * w
            blocks.append(_InvertedResidual(cin, cout, 2 if i in down else 1))
            cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Sequential(nn.Conv2d(cin, 2 * cin, 1, bias=False), _norm(2 * cin), nn.ReLU6())
        self.fc = nn.Linear(2 * cin, spec.num_classes)

    def forward_capture(self, x):
        a = self.head(self.blocks(self.stem(self.fit_input(x))))
        return self.fc(a.mean((2, 3))), a

    def embed(self, x):
        return self.head(self.blocks(self.stem(self.fit_input(x)))).mean((2, 3))


class _Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=2):
        super().__init__()
        self.heads = heads
        self.n1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.n2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        b, t, d = x.shape
        q, k, v = self.qkv(self.n1(x)).reshape(b, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // self.heads), dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, t, d)
        x = x + self.proj(y)
        x = x + self.mlp(self.n2(x))
        return x, attn


class TinyViT(ZooModel):
    def __init__(self, spec):
        super().__init__(spec)
        d = spec.width
        self.grid = spec.input_resolution // spec.patch_size
        self.patch = nn.Conv2d(spec.in_channels, d, spec.patch_size, spec.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos = nn.Parameter(torch.randn(1, self.grid ** 2 + 1, d) * 0.02)
        self.blocks = nn.ModuleList([_Block(d, spec.heads) for _ in range(spec.depth)])
        self.norm = nn.LayerNorm(d)
        self.fc = nn.Linear(d, spec.num_classes)

    @property
    def num_patches(self):
        return self.grid ** 2

    def _encode(self, x):
        x = self.patch(self.fit_input(x)).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], 1) + self.pos
        for blk in self.blocks[:-1]:
            x, _ = blk(x)
        tokens = x[:, 1:]
        x, attn = self.blocks[-1](torch.cat([x[:, :1], tokens], 1))
        cls = self.norm(x[:, 0])
        return cls, AttentionFeatures(attn[:, :, 0, 1:], tokens, cls)

    def forward_capture(self, x):
        cls, feats = self._encode(x)
        return self.fc(cls), feats

    def embed(self, x):
        return self._encode(x)[0]


_BUILDERS = {"conv-plain": ConvNetPlain, "conv-residual": ResNetSmall,
             "conv-mobile": MobileNetSmall, "attention": TinyViT}


def build_model(spec: ArchitectureSpec, seed: int) -> ZooModel:
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = _BUILDERS[spec.family](spec)
    return model


# ---------------------------------------------------------------------------
# training


@dataclass
class Schedule:
    """SGD + momentum with linear warm-up then cosine decay.

    ``unit`` is ``"step"`` or ``"epoch"``; epochs are converted to optimizer steps
    using the training-set size and batch size.
    """
    lr: float = 0.01
    warmup: int = 500
    decay: int = 500
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    unit: str = "step"

    def steps(self, n_train: int):
        if self.warmup < 0 or self.decay < 0:
            raise ConfigError("schedule step counts must be non-negative")
        if self.unit == "epoch":
            per = math.ceil(n_train / min(self.batch_size, n_train))
            return self.warmup * per, self.decay * per
        if self.unit != "step":
            raise ConfigError(f"schedule unit must be 'step' or 'epoch', got {self.unit!r}")
        return self.warmup, self.decay


def lr_at(step, base_lr, warmup, decay):
    if step < warmup:
        return base_lr * (step + 1) / warmup
    if decay <= 0:
        return base_lr
    t = min(step - warmup, decay) / decay
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def train_classifier(model, x, y, schedule: Schedule, seed: int, log_every=0):
    """Train ``model`` in place on tensors ``x, y``. Returns per-step losses.

    Mini-batches are drawn from an epoch-wise permutation seeded by ``seed``;
    a non-finite loss raises :class:`TrainingError` with the step index.
    """
    n = x.shape[0]
    warm, dec = schedule.steps(n)
    total = warm + dec
    bs = min(schedule.batch_size, n)
    g = make_generator(seed, "data-order")
    opt = torch.optim.SGD([p for p in model.parameters() if p.requires_grad], lr=schedule.lr,
                          momentum=schedule.momentum, weight_decay=schedule.weight_decay)
    model.train()
    losses, perm, pos = [], torch.randperm(n, generator=g), 0
    for step in range(total):
        if pos + bs > n:
            perm, pos = torch.randperm(n, generator=g), 0
        idx = perm[pos:pos + bs]
        pos += bs
        for group in opt.param_groups:
            group["lr"] = lr_at(step, schedule.lr, warm, dec)
        loss = F.cross_entropy(model(x[idx]), y[idx])
        if not torch.isfinite(loss):
            raise TrainingError(f"loss became non-finite at step {step}", step=step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            print(f"step {step}/{total} loss {loss.item():.4f}")
    model.eval()
    return losses


@torch.no_grad()
def accuracy(model, x, y, batch_size=500) -> float:
    was_training = model.training
    model.eval()
    correct = 0
    for i in range(0, x.shape[0], batch_size):
        correct += (model(x[i:i + batch_size]).argmax(1) == y[i:i + batch_size]).sum().item()
    model.train(was_training)
    return correct / max(1, x.shape[0])


@dataclass
class PretrainedModel:
    model: ZooModel
    provenance: dict = field(default_factory=dict)
    frozen: bool = False

    @property
    def spec(self) -> ArchitectureSpec:
        return self.model.spec

    @property
    def arch_id(self) -> str:
        return self.model.spec.arch_id


def pretrain(spec, train, schedule: Schedule, seed: int, val=None, dataset_id="") -> PretrainedModel:
    """Build and train ``spec`` on ``train = (x, y)``; provenance accuracy is on ``val`` when given."""
    x, y = train
    if x.shape[0] == 0:
        raise TrainingError("empty training split", step=0)
    model = build_model(spec, seed)
    train_classifier(model, x, y, schedule, seed)
    ex, ey = val if val is not None else train
    prov = {
        "dataset_id": dataset_id,
        "epochs": schedule.warmup + schedule.decay if schedule.unit == "epoch" else None,
        "steps": sum(schedule.steps(x.shape[0])),
        "final_top1": accuracy(model, ex, ey),
        "top1_split": "val" if val is not None else "train",
        "seed": seed,
    }
    return PretrainedModel(model, prov, frozen=False)


def freeze(pm: PretrainedModel) -> PretrainedModel:
    """Mark parameters non-trainable and switch to eval mode. Idempotent."""
    for p in pm.model.parameters():
        p.requires_grad_(False)
        p.grad = None  # leftover from pretraining
    pm.model.eval()
    pm.frozen = True
    return pm


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(pm: PretrainedModel, path, saved_at=None):
    arrays = {k: v.detach().cpu().numpy() for k, v in pm.model.state_dict().items()}
    meta = {"spec": pm.spec.to_dict(), "provenance": pm.provenance, "frozen": pm.frozen}
    container.write(path, "model", meta, arrays, saved_at=saved_at)


def load_checkpoint(path) -> PretrainedModel:
    header, arrays = container.read(path, expected_kind="model")
    meta = header["meta"]
    spec = ArchitectureSpec.from_dict(meta["spec"])
    model = build_model(spec, 0)
    state = model.state_dict()
    if set(state) != set(arrays):
        raise FormatError(f"checkpoint tensors do not match architecture {spec.arch_id} "
                          f"(format version {header['format_version']})")
    model.load_state_dict({k: torch.from_numpy(arrays[k]) for k in state})
    model.eval()
    pm = PretrainedModel(model, meta["provenance"], frozen=False)
    if meta.get("frozen"):
        freeze(pm)
    return pm


@dataclass
class AuxiliaryPool:
    """Frozen auxiliary networks sharing class count; inputs are resized per model."""
    auxiliaries: list
    working_resolution: Optional[int] = None

    def __post_init__(self):
        if not self.auxiliaries:
            return
        ncls = {a.spec.num_classes for a in self.auxiliaries}
        if len(ncls) != 1:
            raise ConfigError(f"auxiliaries disagree on num_classes: {sorted(ncls)}")
        for a in self.auxiliaries:
            if not a.frozen:
                raise ConfigError(f"auxiliary {a.arch_id} is not frozen")

    @property
    def M(self):
        return len(self.auxiliaries)

    @property
    def arch_ids(self):
        return [a.arch_id for a in self.auxiliaries]

    def models(self):
        return [a.model for a in self.auxiliaries]

    def checksums(self):
        return [parameter_checksum(a.model) for a in self.auxiliaries]
