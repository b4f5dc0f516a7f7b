import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ipmerge import NamedTensorMap


def random_map(rng, names_shapes, dtype="f32"):
    tmap = NamedTensorMap()
    for name, shape in names_shapes:
        tmap.add(name, rng.normal(size=shape), dtype)
    return tmap


def make_toy_triple(rng, n_layers=4, hidden=128, planted=None, donor_count=1, donor_scale=8.0):
    """Synthetic (base, mllm, donors) checkpoints with LLaMA-style names.

    ``planted`` lists layer indices whose donor deltas share the target
    delta's top right-singular direction, so they pass the similarity gate;
    the rest get independent random deltas.
    """
    planted = set(range(n_layers)) if planted is None else set(planted)

    def layer_names(i):
        return [
            f"model.layers.{i}.self_attn.q_proj.weight",
            f"model.layers.{i}.mlp.up_proj.weight",
        ]

    base = NamedTensorMap()
    mllm = NamedTensorMap()
    donors = [NamedTensorMap() for _ in range(donor_count)]

    for i in range(n_layers):
        for name in layer_names(i):
            w0 = rng.normal(size=(hidden, hidden))
            v = rng.normal(size=hidden)
            v /= np.linalg.norm(v)
            u = rng.normal(size=hidden)
            u /= np.linalg.norm(u)
            d_mllm = 0.5 * np.outer(u, v) + 0.01 * rng.normal(size=(hidden, hidden))
            base.add(name, w0)
            mllm.add(name, w0 + d_mllm)
            for donor in donors:
                if i in planted:
                    u2 = rng.normal(size=hidden)
                    u2 /= np.linalg.norm(u2)
                    d_math = donor_scale * np.outer(u2, v) + 0.01 * rng.normal(
                        size=(hidden, hidden)
                    )
                else:
                    d_math = rng.normal(size=(hidden, hidden))
                donor.add(name, w0 + d_math)

    # pass-through content, present only where it would be in real models
    embed = rng.normal(size=(8, hidden))
    norm1d = rng.normal(size=hidden)
    for tmap in [base, mllm] + donors:
        tmap.add("model.embed_tokens.weight", embed, "f32")
        tmap.add("model.norm.weight", norm1d, "f32")
    mllm.add("vision_tower.blocks.0.weight", rng.normal(size=(hidden, hidden)), "f32")
    return base, mllm, donors


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
