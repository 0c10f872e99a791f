import numpy as np
import pytest

from rgbdvit import data
from rgbdvit.vit import ModelSpec


@pytest.fixture(scope="session")
def toy_spec():
    """D=32, L=2, heads=2, 32x32 images, patch 8 (the grad-check model)."""
    return ModelSpec(image_size=32, patch_size=8, embed_dim=32, depth=2,
                     heads=2, num_classes=4, positional_mode="sinusoid-2d",
                     head_hidden_dim=16)


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory):
    """Small joint-only corpus: 4 categories x 2 instances x 6 views."""
    root = tmp_path_factory.mktemp("corpus")
    cfg = data.SynthConfig(categories=4, instances=2, views=6,
                           image_size=32, seed=1)
    index = data.gen_synthetic(cfg, root)
    return index


def fd_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function, entry by entry."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g
