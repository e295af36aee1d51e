import pathlib

import numpy as np
import pytest

import headsvd

SCHEMAS = pathlib.Path(__file__).resolve().parents[2] / "resources" / "schemas"


def make_bundle(path, D=8, d=4, L=2, H=2, seed=0):
    rng = np.random.default_rng(seed)
    f = lambda *shape, s=1.0: (s * rng.standard_normal(shape)).astype(np.float32)
    t = {}
    for l in range(L):
        for n in "qkvo":
            t[f"visual.blocks.{l}.attn.{n}.weight"] = f(D, D, s=D**-0.5)
            t[f"visual.blocks.{l}.attn.{n}.bias"] = f(D, s=0.1)
        t[f"visual.blocks.{l}.ln_1.weight"] = 1 + f(D, s=0.2)
        t[f"visual.blocks.{l}.ln_1.bias"] = f(D, s=0.1)
    t["visual.ln_post.weight"] = 1 + f(D, s=0.2)
    t["visual.ln_post.bias"] = f(D, s=0.05)
    t["visual.proj"] = f(D, d, s=D**-0.5)
    headsvd.write_tensor_file(path, t, {"D": str(D), "d": str(d), "L": str(L), "H": str(H)})
    return t


@pytest.fixture
def assets(tmp_path):
    bundle = tmp_path / "bundle.safetensors"
    make_bundle(bundle)
    rng = np.random.default_rng(1)
    emb = rng.standard_normal((12, 4))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    dict_emb = tmp_path / "concepts.safetensors"
    headsvd.write_tensor_file(
        dict_emb,
        {
            "embeddings": emb.astype(np.float32),
            "text_mean": (0.1 * rng.standard_normal(4)).astype(np.float32),
            "image_mean": (0.1 * rng.standard_normal(4)).astype(np.float32),
        },
    )
    vocab = tmp_path / "concepts.txt"
    vocab.write_text("".join(f"concept_{i}\n" for i in range(12)))
    return {"bundle": bundle, "dict": ["--dict-emb", str(dict_emb), "--dict-vocab", str(vocab)], "dir": tmp_path}
