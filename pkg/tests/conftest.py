import pytest
import torch

from metadd.models import ArchitectureSpec, AuxiliaryPool, PretrainedModel, build_model, freeze


def tiny_spec(family, res=8, nc=2, ch=1, **kw):
    base = {"conv-plain": dict(depth=2, width=4), "conv-residual": dict(depth=4, width=4),
            "conv-mobile": dict(depth=2, width=4), "attention": dict(depth=2, width=8, patch_size=2, heads=2)}
    return ArchitectureSpec(family, num_classes=nc, input_resolution=res, in_channels=ch, **{**base[family], **kw})


def tiny_pool(families=("conv-plain", "attention"), res=8, nc=2, ch=1, seed=0, dtype=torch.float32):
    auxes = []
    for i, fam in enumerate(families):
        m = build_model(tiny_spec(fam, res, nc, ch), seed + i).to(dtype)
        auxes.append(freeze(PretrainedModel(m, {"seed": seed + i})))
    return AuxiliaryPool(auxes)


@pytest.fixture
def pool():
    return tiny_pool()


@pytest.fixture(autouse=True)
def _threads():
    torch.set_num_threads(2)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = [mod.RESULTS[k] for k in sorted(mod.RESULTS)] if mod else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
