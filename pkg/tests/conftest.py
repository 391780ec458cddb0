import functools
import sys
from pathlib import Path

import numpy as np
import pytest

from dres3d.annotation import make_description
from dres3d.core import PointMask
from dres3d.model import ModelConfig, init_state
from dres3d.samples import Sample, build_samples
from dres3d.superpoint import OversegmentConfig, SuperpointPartition, oversegment
from dres3d.synth import (
    GeometricPointFeatures,
    HashedTokenFeatures,
    SynthConfig,
    gen_dataset,
    gen_scenes,
)

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE))

FIXTURE = HERE / "data" / "fixture"

# small synthetic benchmark shared by the overfit and ablation checks
OVERFIT_SYNTH = SynthConfig(seed=0, num_scenes=8, objects_per_scene=(3, 5),
                            points_per_object=(30, 40), phrases_per_description=(1, 4))
OVERFIT_SEGMENT = OversegmentConfig(target_max_superpoints=16)
TOY_MODEL = ModelConfig(d=32, e=32, c=16, n_layers=2, heads=2)


@functools.lru_cache(maxsize=None)
def overfit_data():
    scenes = gen_scenes(OVERFIT_SYNTH)
    descs = gen_dataset(OVERFIT_SYNTH, scenes)
    by_id = {s.scene_id: s for s in scenes}
    parts = {s.scene_id: oversegment(s, OVERFIT_SEGMENT) for s in scenes}
    samples = build_samples(descs, by_id, parts, GeometricPointFeatures(16), HashedTokenFeatures(32))
    return scenes, descs, parts, samples


def toy_sample(seed=0, n_superpoints=12, n_pooled=16, e=32,
               text="[a b](1) c [d](2) e [f](3)", sentence=None):
    """Random sample over an identity partition (one point per superpoint)."""
    rng = np.random.default_rng(seed)
    desc = make_description("toy", "s", text, sentence)
    part = SuperpointPartition("s", np.arange(n_superpoints), n_superpoints)
    gt = tuple(PointMask.from_bits(rng.random(n_superpoints) < 0.4, "s") for _ in desc.phrases)
    return Sample(desc, part, rng.normal(size=(n_superpoints, n_pooled)),
                  rng.normal(size=(desc.n_tokens + 2, e)), gt, np.stack([m.bits for m in gt]))


def toy_state(cfg=TOY_MODEL, seed=1, bias_scale=0.1):
    """Initialized state with non-zero biases and norm parameters."""
    st = init_state(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for k, v in st.params.items():
        if k.endswith("bias") or ".norm." in k:
            st.params[k] = v + bias_scale * rng.normal(size=v.shape)
    return st


@pytest.fixture(scope="session")
def overfit():
    return overfit_data()


@pytest.fixture
def fixture_dir():
    return FIXTURE


# one line per acceptance criterion, echoed at the end of the run
CRITERIA: dict[int, str] = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
