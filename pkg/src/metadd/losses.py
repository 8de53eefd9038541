"""Architecture-invariant loss, CAM variance, positive-CAM term and the combined objective."""
import json
import math
from dataclasses import dataclass, field
from typing import List, Optional

import torch
import torch.nn.functional as F

from .cam import cam_stack
from .errors import ContractError, NumericError

KD_EPS = 1e-12


@dataclass
class LossWeights:
    ai: float = 1.0
    var: float = 1.0
    pos: float = 1.0
    # divide L_ai by M and L_pos by M * I * J; False gives the plain sums
    normalize: bool = True
    # L_pos enters the minimised total as pos_sign * sum(cams); -1 maximises positive evidence
    pos_sign: float = -1.0

    def all_zero(self):
        return self.ai == 0 and self.var == 0 and self.pos == 0


def kd_loss(p_m, p_mu, eps=KD_EPS, reduce=True):
    """KL(p_m || p_mu) over the last axis, natural log; batch-averaged when ``reduce``."""
    if not torch.is_tensor(p_m):
        p_m = torch.tensor(p_m, dtype=torch.float64)
    p_mu = torch.as_tensor(p_mu, dtype=p_m.dtype)
    if p_m.shape != p_mu.shape:
        raise ContractError(f"distribution shapes differ: {tuple(p_m.shape)} vs {tuple(p_mu.shape)}")
    for name, p in (("p_m", p_m), ("p_mu", p_mu)):
        if (p < 0).any() or ((p.sum(-1) - 1).abs() > 1e-6).any():
            raise ContractError(f"{name} is not a probability vector")
    pm = p_m.clamp_min(eps)
    kl = (pm * (pm.log() - p_mu.clamp_min(eps).log())).sum(-1)
    return kl.mean() if (reduce and kl.dim() > 0) else kl


@dataclass
class AIContext:
    """Output of :func:`ai_loss`; keeps the graph needed for per-auxiliary CAM gradients."""
    value: torch.Tensor           # batch-mean L_ai
    per_sample: torch.Tensor      # (B,)
    ce: List[torch.Tensor]        # per auxiliary, (B,)
    kd: List[torch.Tensor]
    logits: List[torch.Tensor]
    captures: list


def ai_loss(pool, x, y, backbone_logits=None, normalize=True) -> AIContext:
    """Sum over auxiliaries of CE(aux(x), y) + KL(aux(x) || backbone(x)).

    ``backbone_logits`` may be ``None`` for a CE-only loss (plain Grad-CAM
    target). When ``normalize`` the per-sample sum is divided by M. Gradients
    reach the pixels through both the auxiliary and the backbone logits; only
    pixel gradients are ever taken, so no parameter is updated from this loss.
    """
    if pool.M == 0:
        raise ContractError("auxiliary pool is empty")
    p_mu = None if backbone_logits is None else torch.softmax(backbone_logits, -1)
    ce, kd, logits, caps = [], [], [], []
    for aux in pool.auxiliaries:
        lg, feats = aux.model.forward_capture(x)
        logits.append(lg)
        caps.append(feats)
        ce.append(F.cross_entropy(lg, y, reduction="none"))
        if p_mu is not None:
            kd.append(kd_loss(torch.softmax(lg, -1), p_mu, reduce=False))
        else:
            kd.append(torch.zeros_like(ce[-1]))
    per = torch.stack(ce).sum(0) + torch.stack(kd).sum(0)
    if normalize:
        per = per / pool.M
    return AIContext(per.mean(), per, ce, kd, logits, caps)


def cam_variance(maps, reduce=True):
    """Per-pixel population variance across architectures, averaged over pixels.

    ``maps`` is ``(M, H, W)`` or ``(B, M, H, W)``; batched input is batch-averaged when ``reduce``.
    """
    maps = torch.as_tensor(maps)
    if maps.dim() < 3:
        raise ContractError("cam_variance expects (M, H, W) or (B, M, H, W)")
    # shifting by the first map makes identical maps give exactly zero
    d = maps - maps.narrow(-3, 0, 1)
    v = ((d - d.mean(dim=-3, keepdim=True)) ** 2).mean(dim=-3).mean(dim=(-2, -1))
    return v.mean() if (reduce and v.dim() > 0) else v


def pos_loss(cams, normalize=True, sign=-1.0, reduce=True):
    """``sign`` times the summed raw CAM entries over architectures.

    ``cams`` is a list of per-auxiliary raw maps ``(B, I_m, J_m)`` (or ``(I, J)``).
    Normalised mode averages over pixels and over architectures.
    """
    if torch.is_tensor(cams):
        cams = [cams]
    if not cams:
        raise ContractError("pos_loss needs at least one CAM")
    if normalize:
        s = torch.stack([c.mean(dim=(-2, -1)) for c in cams]).mean(0)
    else:
        s = torch.stack([c.sum(dim=(-2, -1)) for c in cams]).sum(0)
    s = sign * s
    return s.mean() if (reduce and s.dim() > 0) else s


@dataclass
class LossBreakdown:
    """Weighted components: ``total == l_dd + l_ai + var_term + pos_term``."""
    l_dd: torch.Tensor
    l_ai: torch.Tensor
    var_term: torch.Tensor
    pos_term: torch.Tensor
    total: torch.Tensor
    per_aux_ce: List[float] = field(default_factory=list)
    per_aux_kd: List[float] = field(default_factory=list)
    raw: dict = field(default_factory=dict)
    stack: Optional[object] = None

    def record(self, step=None) -> dict:
        r = {k: float(torch.as_tensor(v).detach()) for k, v in
             (("l_dd", self.l_dd), ("l_ai", self.l_ai), ("var", self.var_term),
              ("pos", self.pos_term), ("total", self.total))}
        if step is not None:
            r = {"step": step, **r}
        return r

    def to_json(self, step=None) -> str:
        return json.dumps(self.record(step))


def _check_finite(name, v):
    v = float(torch.as_tensor(v).detach())
    if not math.isfinite(v):
        raise NumericError(f"non-finite {name}: {v}", component=name)


def total_loss(l_dd, pool, x, y, backbone_logits=None, weights: LossWeights = None,
               cam_size=None, create_graph=True) -> LossBreakdown:
    """Combined objective l_dd + w_ai * L_ai + w_var * var + w_pos * L_pos, batch-averaged."""
    weights = weights or LossWeights()
    ctx = ai_loss(pool, x, y, backbone_logits, normalize=weights.normalize)
    stack = cam_stack(pool, x, ctx, target=cam_size, create_graph=create_graph)
    var = cam_variance(stack.maps)
    pos = pos_loss(stack.raw, normalize=weights.normalize, sign=weights.pos_sign)
    l_dd = torch.as_tensor(l_dd, dtype=x.dtype)
    for name, v in (("l_dd", l_dd), ("l_ai", ctx.value), ("var", var), ("pos", pos)):
        _check_finite(name, v)
    t_ai, t_var, t_pos = weights.ai * ctx.value, weights.var * var, weights.pos * pos
    total = l_dd + t_ai + t_var + t_pos
    _check_finite("total", total)
    return LossBreakdown(
        l_dd, t_ai, t_var, t_pos, total,
        per_aux_ce=[float(c.detach().mean()) for c in ctx.ce],
        per_aux_kd=[float(k.detach().mean()) for k in ctx.kd],
        raw={"l_ai": float(ctx.value.detach()), "var": float(var.detach()), "pos": float(pos.detach())},
        stack=stack,
    )
