import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def toy_model_config(**kw):
    from rmformer.config import ModelConfig

    return ModelConfig(**kw)


def tiny_model_config(**kw):
    """Small but structurally complete pipeline: scales 32/64/128, C=8."""
    from rmformer.config import BackboneConfig, ModelConfig

    bb = BackboneConfig(embed_dim=8, patch_size=4, window_size=4, depths=(1, 1, 1, 1), heads=(1, 2, 2, 4))
    args = dict(backbone=bb, scales=(32, 64, 128), encoder_channels=8, pr_scales=(64, 128), pr_k=16)
    args.update(kw)
    return ModelConfig(**args)


_CRITERIA = {}


def record_criterion(n, ok, detail):
    _CRITERIA[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
