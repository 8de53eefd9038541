"""Dataset ingestion into float tensors in [0, 1] with deterministic ordering.

Supported layouts under ``root``:

``cifar10``
    ``cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin`` (binary records:
    1 label byte + 3072 pixel bytes), or the pickled
    ``cifar-10-batches-py/{data_batch_1..5,test_batch}``.
``folder``
    ``train/<class>/*.png|jpg`` and ``val/<class>/*.png|jpg``.
``digits``
    scikit-learn's bundled 8x8 handwritten digits (no files needed); every
    fifth sample of each class goes to the validation split.

If ``root`` contains ``SHA256SUMS`` (``<hex>  <relative path>`` lines) the
listed files are verified before loading.
"""
import hashlib
import os
import pickle
from dataclasses import dataclass
from typing import List

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, IngestionError, IntegrityError

DATA_ROOT_ENV = "METADD_DATA_ROOT"

CIFAR10_CLASSES = ["airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck"]
DIGITS_CLASSES = [str(i) for i in range(10)]

_CIFAR_TRAIN = [f"data_batch_{i}" for i in range(1, 6)]
_CIFAR_TEST = ["test_batch"]


@dataclass
class Splits:
    train_x: torch.Tensor
    train_y: torch.Tensor
    val_x: torch.Tensor
    val_y: torch.Tensor
    class_names: List[str]

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def channels(self):
        return self.train_x.shape[1]

    @property
    def resolution(self):
        return self.train_x.shape[-1]


def resolve_root(root):
    return os.environ.get(DATA_ROOT_ENV) or root


def verify_checksums(root):
    sums = os.path.join(root, "SHA256SUMS")
    if not os.path.exists(sums):
        return 0
    n = 0
    with open(sums) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            digest, rel = line.split(maxsplit=1)
            path = os.path.join(root, rel.lstrip("*"))
            if not os.path.exists(path):
                raise IngestionError(f"file listed in SHA256SUMS is missing: {path}")
            h = hashlib.sha256()
            with open(path, "rb") as fh:
                for chunk in iter(lambda: fh.read(1 << 20), b""):
                    h.update(chunk)
            if h.hexdigest() != digest.lower():
                raise IntegrityError(f"checksum mismatch for {rel}")
            n += 1
    return n


def _read_cifar_bin(path):
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % 3073:
        raise IntegrityError(f"{path}: size {raw.size} is not a multiple of the 3073-byte record")
    rec = raw.reshape(-1, 3073)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0].astype(np.int64)


def _read_cifar_py(path):
    with open(path, "rb") as f:
        d = pickle.load(f, encoding="bytes")
    return np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32), np.asarray(d[b"labels"], dtype=np.int64)


def _load_cifar(root):
    for sub, ext, reader in (("cifar-10-batches-bin", ".bin", _read_cifar_bin),
                             ("cifar-10-batches-py", "", _read_cifar_py)):
        d = os.path.join(root, sub)
        files = [os.path.join(d, n + ext) for n in _CIFAR_TRAIN + _CIFAR_TEST]
        if all(os.path.exists(p) for p in files):
            parts = [reader(p) for p in files]
            tx = np.concatenate([p[0] for p in parts[:5]])
            ty = np.concatenate([p[1] for p in parts[:5]])
            return tx, ty, parts[5][0], parts[5][1], list(CIFAR10_CLASSES)
    raise IngestionError(
        f"CIFAR-10 not found under {root!r}. Expected either\n"
        "  cifar-10-batches-bin/data_batch_{1..5}.bin + test_batch.bin\n"
        "or\n  cifar-10-batches-py/data_batch_{1..5} + test_batch")


def _load_folder(root):
    from PIL import Image

    out = []
    for split in ("train", "val"):
        d = os.path.join(root, split)
        if not os.path.isdir(d):
            raise IngestionError(f"image-folder layout expects {d}/<class>/*.png")
        classes = sorted(e for e in os.listdir(d) if os.path.isdir(os.path.join(d, e)))
        xs, ys = [], []
        for ci, c in enumerate(classes):
            for fn in sorted(os.listdir(os.path.join(d, c))):
                if fn.lower().endswith((".png", ".jpg", ".jpeg", ".bmp")):
                    img = np.asarray(Image.open(os.path.join(d, c, fn)).convert("RGB"))
                    xs.append(img.transpose(2, 0, 1))
                    ys.append(ci)
        if not xs:
            raise IngestionError(f"no images found under {d}")
        out.append((np.stack(xs), np.asarray(ys, dtype=np.int64), classes))
    (tx, ty, classes), (vx, vy, vclasses) = out
    if classes != vclasses:
        raise IngestionError("train and val class folders differ")
    return tx, ty, vx, vy, classes


def _load_digits():
    from sklearn.datasets import load_digits

    d = load_digits()
    x = (d.images / 16.0).astype(np.float32)[:, None]
    y = d.target.astype(np.int64)
    val = np.zeros(len(y), dtype=bool)
    for c in range(10):
        val[np.nonzero(y == c)[0][::5]] = True
    return x[~val], y[~val], x[val], y[val], list(DIGITS_CLASSES)


def _to_float(x):
    x = torch.from_numpy(np.ascontiguousarray(x))
    return x.float() / 255.0 if x.dtype == torch.uint8 else x.float()


def ingest_dataset(name, root=None, classes=None, resolution=None) -> Splits:
    """Load ``name`` and keep only ``classes`` (names or indices), relabelled 0..k-1 in the given order."""
    if classes is not None and len(classes) == 0:
        raise ContractError("class subset is empty")
    root = resolve_root(root)
    if name == "cifar10":
        if not root:
            raise IngestionError(f"cifar10 needs a root directory (or ${DATA_ROOT_ENV})")
        verify_checksums(root)
        tx, ty, vx, vy, names = _load_cifar(root)
    elif name == "folder":
        if not root:
            raise IngestionError(f"folder dataset needs a root directory (or ${DATA_ROOT_ENV})")
        verify_checksums(root)
        tx, ty, vx, vy, names = _load_folder(root)
    elif name == "digits":
        tx, ty, vx, vy, names = _load_digits()
    else:
        raise IngestionError(f"unknown dataset {name!r}; expected cifar10, folder or digits")

    if classes is None:
        keep = list(range(len(names)))
    else:
        keep = []
        for c in classes:
            if isinstance(c, str) and c in names:
                keep.append(names.index(c))
            elif isinstance(c, (int, np.integer)) and 0 <= c < len(names):
                keep.append(int(c))
            else:
                raise ContractError(f"unknown class {c!r}; available: {names}")
    remap = {old: new for new, old in enumerate(keep)}

    def select(x, y):
        m = np.isin(y, keep)
        return _to_float(x[m]), torch.tensor([remap[int(v)] for v in y[m]], dtype=torch.long)

    txf, tyf = select(tx, ty)
    vxf, vyf = select(vx, vy)
    if resolution is not None and txf.shape[-1] != resolution:
        txf = F.interpolate(txf, size=(resolution, resolution), mode="bilinear", align_corners=False).clamp_(0, 1)
        vxf = F.interpolate(vxf, size=(resolution, resolution), mode="bilinear", align_corners=False).clamp_(0, 1)
    return Splits(txf, tyf, vxf, vyf, [names[k] for k in keep])
