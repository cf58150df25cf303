import numpy as np
import pytest
import torch

from modprompt.data import DEFAULT_VOCAB, GroundTruth, generate_scene, render_modality, scene_seed, to_uint8
from modprompt.train import PretrainConfig, pretrain

torch.set_num_threads(1)

VOCAB = list(DEFAULT_VOCAB)


def make_samples(split, n, modality, seed=0):
    """In-memory equivalent of write_dataset + load_dataset (same 8-bit quantization)."""
    out = []
    for i in range(n):
        spec = generate_scene(scene_seed(seed, split, i))
        img = render_modality(spec, modality)
        img.pixels = (to_uint8(img.pixels) / 255.0).astype(np.float32)
        out.append((img, GroundTruth.from_scene(spec)))
    return out


@pytest.fixture(scope="session")
def vocab():
    return list(VOCAB)


@pytest.fixture(scope="session")
def tiny_zeroshot():
    """A briefly pretrained detector: good enough to produce detections, cheap to build."""
    pipe, _ = pretrain(make_samples("train", 64, "rgb"), VOCAB, PretrainConfig(epochs=6, batch_size=16))
    return pipe


@pytest.fixture(scope="session")
def ir_samples():
    return make_samples("train", 16, "pseudo_ir")
