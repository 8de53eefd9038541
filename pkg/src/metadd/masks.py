"""Meta / heterogeneous feature masks and pixel erasure."""
import json
import os

import numpy as np
import torch

from .errors import ContractError

THRESHOLD = 0.5


def threshold_mask(c, threshold=THRESHOLD) -> torch.Tensor:
    """1 where the normalised map is >= threshold (inclusive), else 0. Returns uint8."""
    c = torch.as_tensor(c)
    if c.numel() and (c.min() < 0 or c.max() > 1 or not torch.isfinite(c).all()):
        raise ContractError("threshold_mask expects a normalised map with entries in [0, 1]")
    return (c >= threshold).to(torch.uint8)


def meta_mask(maps, threshold=THRESHOLD) -> torch.Tensor:
    """Intersection of every architecture's high-confidence region.

    ``maps`` is a stack ``(..., M, H, W)``; the product runs over the M axis.
    """
    maps = torch.as_tensor(maps)
    if maps.dim() < 3 or maps.shape[-3] == 0:
        raise ContractError("meta_mask needs a non-empty stack of shape (..., M, H, W)")
    return threshold_mask(maps, threshold).prod(dim=-3).to(torch.uint8)


def hetero_mask(maps, m: int, mu=None, threshold=THRESHOLD) -> torch.Tensor:
    """High-confidence region of map ``m`` with the meta region removed."""
    maps = torch.as_tensor(maps)
    if mu is None:
        mu = meta_mask(maps, threshold)
    mu = torch.as_tensor(mu).to(torch.uint8)
    h = threshold_mask(maps.select(-3, m), threshold)
    if h.shape != mu.shape:
        raise ContractError(f"mask size mismatch: {tuple(h.shape)} vs {tuple(mu.shape)}")
    if (mu > h).any():
        raise ContractError("meta mask is not contained in the thresholded map; was it built from this stack?")
    return h - mu


def channel_mean(images) -> torch.Tensor:
    return torch.as_tensor(images).mean(dim=(0, 2, 3))


def erase(image, mask, fill="mean", mean=None, generator=None):
    """Replace pixels where ``mask == 1``.

    ``fill``: ``"mean"`` (per-channel ``mean``, e.g. the training-set mean; when
    omitted, the image's channel mean over unerased pixels), ``"zero"``, ``"noise"`` (uniform [0, 1]) or a number.
    ``image`` is ``(C, H, W)`` or ``(B, C, H, W)``; ``mask`` is ``(H, W)`` or ``(B, H, W)``.
    """
    image = torch.as_tensor(image)
    mask = torch.as_tensor(mask)
    if mask.shape[-2:] != image.shape[-2:]:
        raise ContractError(f"mask size {tuple(mask.shape[-2:])} != image size {tuple(image.shape[-2:])}")
    m = mask.bool().unsqueeze(-3)
    if fill == "mean":
        if mean is None:
            # channel mean over the pixels that survive, so re-erasing is a no-op
            keep = (~m).to(image.dtype).expand(image.shape)
            n = keep.sum(dim=(-2, -1))
            own = (image * keep).sum(dim=(-2, -1)) / n.clamp_min(1)
            value = torch.where(n > 0, own, image.mean(dim=(-2, -1)))[..., None, None].expand(image.shape)
        else:
            value = torch.as_tensor(mean, dtype=image.dtype).reshape(-1, 1, 1).expand(image.shape[-3:])
    elif fill == "zero":
        value = torch.zeros((), dtype=image.dtype)
    elif fill == "noise":
        value = torch.rand(image.shape, generator=generator, dtype=image.dtype)
    elif isinstance(fill, (int, float)):
        value = torch.full((), float(fill), dtype=image.dtype)
    else:
        raise ContractError(f"unknown fill policy {fill!r}")
    return torch.where(m, value, image)


def erased_fraction(mask) -> float:
    mask = torch.as_tensor(mask)
    return float(mask.float().mean())


def export_mask(path, mask, kind, sources, threshold=THRESHOLD):
    """Write a 1-bit PNG and a ``.json`` sidecar next to it."""
    from PIL import Image

    arr = np.asarray(torch.as_tensor(mask).cpu(), dtype=bool)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(arr).convert("1").save(path)
    side = os.path.splitext(path)[0] + ".json"
    with open(side, "w") as f:
        json.dump({"kind": kind, "sources": list(sources), "threshold": threshold,
                   "shape": list(arr.shape)}, f, indent=1)
    return side
