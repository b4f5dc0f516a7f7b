#!/usr/bin/env python3
"""Generate the cross-ecosystem interop fixtures.

Builds a tiny 2-layer, 16-hidden-unit decoder checkpoint triple, merges it
with every engine, and writes for each merged checkpoint: the checkpoint
itself, a manifest of expected tensor names/shapes/dtypes, and reference
forward-pass activations computed here so the external validator can
compare against them.

Usage: python3 scripts/make_interop_fixtures.py [output_dir]
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

from ipmerge import (
    MergeRecipe,
    NamedTensorMap,
    SelectionConfig,
    align_layers,
    merge_checkpoints,
    save_checkpoint,
)

ROOT = Path(__file__).resolve().parent.parent
ARCH_PATH = ROOT / "shared" / "tiny_decoder_arch.json"


def tensor_names(arch):
    names = []
    for layer in range(arch["num_layers"]):
        for block, projs in arch["blocks"].items():
            for proj in projs:
                names.append(
                    arch["name_template"].format(layer=layer, block=block, proj=proj)
                )
    return names


def forward(arch, weights: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    """Reference forward pass for the tiny decoder block stack."""
    h = arch["hidden_size"]
    scale = 1.0 / np.sqrt(h)

    def linear(v, name):
        return v @ weights[name].T

    def name(layer, block, proj):
        return arch["name_template"].format(layer=layer, block=block, proj=proj)

    seq = x.shape[0]
    mask = np.triu(np.full((seq, seq), -np.inf), k=1)
    for layer in range(arch["num_layers"]):
        q = linear(x, name(layer, "self_attn", "q_proj"))
        k = linear(x, name(layer, "self_attn", "k_proj"))
        v = linear(x, name(layer, "self_attn", "v_proj"))
        scores = q @ k.T * scale + mask
        scores -= scores.max(axis=1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=1, keepdims=True)
        x = x + linear(probs @ v, name(layer, "self_attn", "o_proj"))
        up = np.maximum(linear(x, name(layer, "mlp", "up_proj")), 0.0)
        x = x + linear(up, name(layer, "mlp", "down_proj"))
    return x


def build_triple(arch, rng):
    base = NamedTensorMap()
    mllm = NamedTensorMap()
    math = NamedTensorMap()
    h = arch["hidden_size"]
    for name in tensor_names(arch):
        w0 = 0.3 * rng.normal(size=(h, h))
        v = rng.normal(size=h)
        v /= np.linalg.norm(v)
        d_mllm = 0.05 * np.outer(rng.normal(size=h), v) + 0.002 * rng.normal(size=(h, h))
        d_math = 0.4 * np.outer(rng.normal(size=h), v) + 0.002 * rng.normal(size=(h, h))
        base.add(name, w0)
        mllm.add(name, w0 + d_mllm)
        math.add(name, w0 + d_math)
    return base, mllm, math


FORMAT_DTYPE = {"f32": "F32", "f16": "F16", "bf16": "BF16"}


def manifest_for(tmap: NamedTensorMap) -> dict:
    return {
        "tensors": {
            name: {"dtype": FORMAT_DTYPE[e.dtype], "shape": list(e.values.shape)}
            for name, e in tmap.items()
        }
    }


def main(out_dir: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arch = json.loads(ARCH_PATH.read_text())
    rng = np.random.default_rng(20250823)

    base, mllm, math = build_triple(arch, rng)
    triples = align_layers(base, mllm, [math])
    x = rng.normal(size=(arch["seq_len"], arch["hidden_size"]))

    recipes = {
        "ip": MergeRecipe(method="ip", selection=SelectionConfig(threshold=0.3)),
        "task_arithmetic": MergeRecipe(method="task_arithmetic", alphas=[0.4]),
        "ties": MergeRecipe(method="ties", alphas=[0.7], ties_retain_fraction=0.3),
        "emr": MergeRecipe(method="emr"),
    }
    index = {"arch": str(ARCH_PATH.relative_to(ROOT)), "cases": []}
    for label, recipe in recipes.items():
        merged, _ = merge_checkpoints(base, mllm, [math], triples, recipe)
        ckpt_path = out / f"{label}.safetensors"
        save_checkpoint(merged, ckpt_path, "force_f32")

        # reference outputs computed from the quantized (stored) weights so
        # both sides evaluate the identical network
        from ipmerge import load_checkpoint

        stored = load_checkpoint(ckpt_path)
        weights = {name: stored[name] for name in stored.names()}
        y = forward(arch, weights, x)

        (out / f"{label}.manifest.json").write_text(
            json.dumps(manifest_for(stored), indent=2) + "\n"
        )
        (out / f"{label}.reference.json").write_text(
            json.dumps(
                {"input": x.tolist(), "output": y.tolist(), "tolerance": 1e-5},
                indent=2,
            )
            + "\n"
        )
        index["cases"].append(label)
    (out / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    print(f"wrote {len(recipes)} fixture cases to {out}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else str(ROOT / "frontend" / "fixtures"))
