import numpy as np
import pytest
import torch

from instap.encoders import InstAPModel, ModelConfig
from instap.schema import SceneConfig, generate_dataset

MICRO = ModelConfig(d=8, d_proj=8, heads=2, video_layers=1, text_layers=1, fusion_layers=1, patch=8,
                    max_frames=4, max_grid=4, max_len=8, mlp_ratio=2, grounding_hidden=8)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def micro_cfg():
    return MICRO


@pytest.fixture
def micro_model():
    return InstAPModel(MICRO, seed=0)


@pytest.fixture
def micro_model64():
    return InstAPModel(MICRO, seed=0).double()


@pytest.fixture(scope="session")
def small_scenes():
    """Eight 32x32, 2-frame scenes with 2-3 objects."""
    return generate_dataset(8, 5, "train", SceneConfig(canvas=(32, 32), T=2, object_count=(2, 3), sizes=(8, 12)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion; repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(number, name, ok, detail, soft=False):
        status = "PASS" if ok else ("SOFT-FAIL" if soft else "FAIL")
        line = f"[{status}] criterion {number} ({name}): {detail}"
        print(line)
        lines.append(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split()[0])):
            terminalreporter.write_line(line)
