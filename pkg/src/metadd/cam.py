"""Signed class-activation maps for conv and attention models.

Maps are never rectified: negative evidence stays in the map and in its
gradient. Everything here is differentiable w.r.t. the input pixels when the
captures were built with ``create_graph=True``.
"""
import json
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, NumericError, WrongFamilyError
from .models import CONV_FAMILIES, AttentionFeatures

# a normalised map is treated as constant when max - min <= this fraction of its magnitude
DEGENERATE_RTOL = 1e-6


@dataclass
class ConvCapture:
    activations: torch.Tensor  # (..., K, I, J)
    gradients: torch.Tensor    # same shape

    def __post_init__(self):
        if self.activations.shape != self.gradients.shape:
            raise ContractError(f"activation shape {tuple(self.activations.shape)} != "
                                f"gradient shape {tuple(self.gradients.shape)}")

    def split(self):
        return [ConvCapture(a, g) for a, g in zip(self.activations, self.gradients)]


@dataclass
class AttentionCapture:
    attention: torch.Tensor   # (..., heads, N) class-to-patch rows
    tokens: torch.Tensor      # (..., N, D) patch tokens
    gradients: torch.Tensor   # (..., N, D) dL/d tokens
    cls_output: Optional[torch.Tensor] = None

    def __post_init__(self):
        n = self.attention.shape[-1]
        if self.tokens.shape[-2] != n or self.tokens.shape != self.gradients.shape:
            raise ContractError("attention capture shapes disagree")
        if int(round(n ** 0.5)) ** 2 != n:
            raise ContractError(f"patch count {n} is not a square grid")

    def split(self):
        cls = self.cls_output if self.cls_output is not None else [None] * self.attention.shape[0]
        return [AttentionCapture(a, t, g, c) for a, t, g, c in
                zip(self.attention, self.tokens, self.gradients, cls)]


@dataclass
class RawCam:
    values: torch.Tensor
    source_arch: str = ""
    source_image: object = None


@dataclass
class CamStack:
    maps: torch.Tensor                  # (B, M, H, W) normalised, or (M, H, W)
    mins: torch.Tensor                  # pre-normalisation min per map
    maxs: torch.Tensor
    arch_ids: List[str] = field(default_factory=list)
    raw: List[torch.Tensor] = field(default_factory=list)  # per auxiliary, (B, I_m, J_m)
    sample_ids: Optional[list] = None

    @property
    def M(self):
        return self.maps.shape[-3]


def capture_conv(model, x, loss_fn, create_graph=False) -> ConvCapture:
    """Forward ``x`` through a conv model and differentiate ``loss_fn(logits)`` w.r.t. its last stage."""
    if model.family not in CONV_FAMILIES:
        raise WrongFamilyError(f"capture_conv needs a conv-family model, got {model.family}")
    logits, a = model.forward_capture(x)
    loss = loss_fn(logits).sum()
    (g,) = torch.autograd.grad(loss, a, create_graph=create_graph)
    return ConvCapture(a if create_graph else a.detach(), g)


def capture_attention(model, x, loss_fn, create_graph=False) -> AttentionCapture:
    if model.family != "attention":
        raise WrongFamilyError(f"capture_attention needs an attention model, got {model.family}")
    logits, f = model.forward_capture(x)
    loss = loss_fn(logits).sum()
    (g,) = torch.autograd.grad(loss, f.tokens, create_graph=create_graph)
    if create_graph:
        return AttentionCapture(f.attention, f.tokens, g, f.cls)
    return AttentionCapture(f.attention.detach(), f.tokens.detach(), g, f.cls.detach())


def conv_cam(capture: ConvCapture) -> torch.Tensor:
    """Grad-CAM without the ReLU: channel weights are spatially averaged gradients."""
    alpha = capture.gradients.mean(dim=(-2, -1), keepdim=True)
    return (alpha * capture.activations).sum(dim=-3)


def attention_cam(capture) -> torch.Tensor:
    """Head-summed class-token attention times the gradient projection of each patch token.

    score[n] = (sum_h attn[h, cls, n]) * <Z[n], dL/dZ[n]>, laid out on the patch grid.
    """
    if isinstance(capture, ConvCapture):
        raise WrongFamilyError("attention_cam got a conv capture")
    w_agg = capture.attention.sum(dim=-2)
    s = (capture.tokens * capture.gradients).sum(dim=-1)
    score = w_agg * s
    g = int(round(score.shape[-1] ** 0.5))
    return score.reshape(*score.shape[:-1], g, g)


def resize(c: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize of the trailing two dims (align_corners=False)."""
    if tuple(c.shape[-2:]) == tuple(size):
        return c
    lead = c.shape[:-2]
    out = F.interpolate(c.reshape(-1, 1, *c.shape[-2:]), size=tuple(size), mode="bilinear", align_corners=False)
    return out.reshape(*lead, *size)


def resize_normalize(c: torch.Tensor, target, return_range=False):
    """Interpolate to ``target`` then min-max scale each map to [0, 1].

    Constant maps become all zeros.
    """
    c = torch.as_tensor(c)
    if target[0] <= 0 or target[1] <= 0:
        raise ContractError(f"target size must be positive, got {target}")
    if not torch.isfinite(c).all():
        raise NumericError("non-finite values in CAM", component="cam")
    p = resize(c, target)
    lo = p.amin(dim=(-2, -1), keepdim=True)
    hi = p.amax(dim=(-2, -1), keepdim=True)
    rng = hi - lo
    scale = torch.maximum(hi.abs(), lo.abs())
    degenerate = rng <= DEGENERATE_RTOL * scale
    safe = torch.where(degenerate, torch.ones_like(rng), rng)
    out = torch.where(degenerate, torch.zeros_like(p), (p - lo) / safe)
    if return_range:
        return out, lo[..., 0, 0], hi[..., 0, 0]
    return out


def pos_score(c: torch.Tensor) -> torch.Tensor:
    return c.sum(dim=(-2, -1))


def raw_cams(pool, context, create_graph=True) -> List[torch.Tensor]:
    """Per-auxiliary raw CAMs ``(B, I_m, J_m)`` from an architecture-invariant loss context.

    ``context`` is the object returned by :func:`metadd.losses.ai_loss`; its
    per-sample loss is differentiated w.r.t. every auxiliary's capture tensors.
    The sum over the batch gives each sample exactly its own gradient since no
    model couples samples.
    """
    targets = []
    for feats in context.captures:
        targets.append(feats.tokens if isinstance(feats, AttentionFeatures) else feats)
    grads = torch.autograd.grad(context.per_sample.sum(), targets, create_graph=create_graph)
    cams = []
    for aux, feats, g in zip(pool.auxiliaries, context.captures, grads):
        try:
            if isinstance(feats, AttentionFeatures):
                cap = AttentionCapture(feats.attention, feats.tokens, g, feats.cls)
                cams.append(attention_cam(cap))
            else:
                cams.append(conv_cam(ConvCapture(feats, g)))
        except Exception as e:
            raise type(e)(f"[{aux.arch_id}] {e}") from e
    if not create_graph:
        cams = [c.detach() for c in cams]
    return cams


def cam_stack(pool, x, context, target=None, create_graph=True) -> CamStack:
    """Normalised CAM stack, one map per auxiliary in pool order, at the image resolution by default."""
    if pool.M == 0:
        raise ContractError("auxiliary pool is empty")
    target = tuple(target) if target is not None else tuple(x.shape[-2:])
    raws = raw_cams(pool, context, create_graph=create_graph)
    maps, mins, maxs = [], [], []
    for aux, c in zip(pool.auxiliaries, raws):
        try:
            m, lo, hi = resize_normalize(c, target, return_range=True)
        except NumericError as e:
            raise NumericError(f"[{aux.arch_id}] {e}", component="cam") from e
        maps.append(m)
        mins.append(lo)
        maxs.append(hi)
    return CamStack(torch.stack(maps, 1), torch.stack(mins, 1), torch.stack(maxs, 1),
                    pool.arch_ids, raws)


def _to_uint8(m):
    return (np.clip(np.asarray(m, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def export_cams(out_dir, stack: CamStack, sample_ids=None, colormap=None):
    """Write one PNG per (sample, architecture) plus ``cams.json`` with pre-normalisation ranges."""
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    maps = stack.maps.detach().cpu().numpy()
    if maps.ndim == 3:
        maps = maps[None]
    mins = stack.mins.detach().cpu().numpy().reshape(maps.shape[:2])
    maxs = stack.maxs.detach().cpu().numpy().reshape(maps.shape[:2])
    sample_ids = sample_ids if sample_ids is not None else (stack.sample_ids or list(range(maps.shape[0])))
    cmap = None
    if colormap:
        import matplotlib

        cmap = matplotlib.colormaps[colormap]
    entries = []
    for b, sid in enumerate(sample_ids):
        for m, arch in enumerate(stack.arch_ids):
            name = f"sample{sid}_{arch}.png"
            if cmap is None:
                img = Image.fromarray(_to_uint8(maps[b, m]), mode="L")
            else:
                img = Image.fromarray(_to_uint8(cmap(maps[b, m])[..., :3]), mode="RGB")
            img.save(os.path.join(out_dir, name))
            entries.append({"sample_id": sid, "arch_id": arch, "file": name,
                            "min": float(mins[b, m]), "max": float(maxs[b, m])})
    with open(os.path.join(out_dir, "cams.json"), "w") as f:
        json.dump(entries, f, indent=1)
    return entries
