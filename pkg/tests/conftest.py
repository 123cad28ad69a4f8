from pathlib import Path
from typing import Callable, Dict, List, Sequence

import numpy as np
import pytest

from backend.backbone import BackboneConfig
from backend.config_helper import RunConfig, parse_config_text
from backend.numerics import GradRecord
from backend.parameters import ModelParams
from backend.synth import SynthSpec, generate_synth

REPO_ROOT = Path(__file__).resolve().parent.parent
SMOKE_CONFIG = REPO_ROOT / "configs" / "smoke.conf"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_backbone_config() -> BackboneConfig:
    return BackboneConfig(stage_blocks=(1, 1, 1, 1), base_width=4, input_size=32, reduction_ratio=2,
                          spatial_kernel=3)


@pytest.fixture
def smoke_config(synth_corpus: Path) -> RunConfig:
    config = parse_config_text(SMOKE_CONFIG.read_text(), source=str(SMOKE_CONFIG))
    config.set("data.frames_root", str(synth_corpus / "frames"))
    config.set("data.annotations_root", str(synth_corpus / "annotations"))
    return config


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory) -> Path:
    """4 videos x 64 frames of 32x32 synthetic faces, shared by the whole session"""
    root = tmp_path_factory.mktemp("synth")
    generate_synth(SynthSpec(num_videos=4, frames_per_video=64, image_size=32), root, seed=7)
    return root


def tree_op(tree, forward: Callable, names: Sequence[str]) -> Callable:
    """
    Wrap a module whose parameters live in a dataclass tree as a grad_check op

    The returned op copies the checked values into the live arrays before
    every forward call and reports gradients for ``names``.
    """
    live: Dict[str, np.ndarray] = ModelParams.of(tree).parameters

    def op(x: np.ndarray, *values: np.ndarray):
        for name, value in zip(names, values):
            np.copyto(live[name], value)
        out, backprop = forward(x)

        def backward_fn(g: np.ndarray):
            dx, grads = backprop(g)
            return (dx, *(grads.get(name) for name in names))

        return out, GradRecord("tree", (x, *(live[n] for n in names)), out, backward_fn)

    return op


def tree_inputs(tree, x: np.ndarray, names: Sequence[str]) -> List[np.ndarray]:
    live = ModelParams.of(tree).parameters
    return [x, *(live[n].copy() for n in names)]
