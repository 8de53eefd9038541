"""Named random substreams derived from one global seed."""
import hashlib

import torch


def substream_seed(seed: int, *names) -> int:
    key = ":".join([str(int(seed))] + [str(n) for n in names])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little") & ((1 << 63) - 1)


def make_generator(seed: int, *names) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(substream_seed(seed, *names) if names else int(seed))
    return g
