"""Timing and cache-size comparison of compressed vs uncompressed decoding."""

from __future__ import annotations

import os
import platform

import jsonschema
import numpy as np

from .mergear import decode_full_oracle, decode_raster
from .numerics import RandomStream
from .toymodel import init_model

BENCH_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["machine", "config", "workloads"],
    "properties": {
        "machine": {
            "type": "object",
            "required": ["platform", "python", "numpy", "cpu_count"],
        },
        "config": {"type": "object"},
        "workloads": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": [
                    "name", "length", "duplicate_density", "unique_tokens", "duplicates",
                    "final_cache_len", "compression_ratio", "cache_len_trace",
                    "mean_step_ns_full", "mean_step_ns_compressed", "speedup", "equivalence",
                ],
                "properties": {
                    "name": {"type": "string"},
                    "length": {"type": "integer", "minimum": 1},
                    "duplicate_density": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                    "unique_tokens": {"type": "integer", "minimum": 1},
                    "duplicates": {"type": "integer", "minimum": 0},
                    "final_cache_len": {"type": "integer", "minimum": 1},
                    "compression_ratio": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                    "cache_len_trace": {"type": "array", "items": {"type": "integer"}},
                    "mean_step_ns_full": {"type": "number", "minimum": 0},
                    "mean_step_ns_compressed": {"type": "number", "minimum": 0},
                    "speedup": {"type": "number", "minimum": 0},
                    "equivalence": {"type": "boolean"},
                },
            },
        },
    },
}


def machine_fingerprint() -> dict:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count() or 1,
    }


def forced_sequence(l: int, density: float, vocab: int, rng: RandomStream) -> list[int]:
    """Length-``l`` id sequence with ``round(l * (1 - density))`` distinct ids.

    Each distinct id fills one contiguous run, so every id after the first of
    its run is an exact duplicate.
    """
    unique = max(1, int(round(l * (1.0 - density))))
    if unique > vocab:
        raise ValueError(f"forced_sequence: {unique} distinct ids need vocab >= {unique}, have {vocab}")
    ids = rng.permutation(vocab)[:unique]
    return [int(ids[j * unique // l]) for j in range(l)]


def run_workload(model, name: str, l: int, forced, density, window=None, mode="compensated",
                 class_id: int = 0, merge_instruction: int = 0) -> dict:
    ref_tokens, ref_logits, full_ns = decode_full_oracle(model, class_id, merge_instruction, l, forced=forced)
    res = decode_raster(model, class_id, merge_instruction, l, mode, window, forced=forced)
    diff = max(float(np.max(np.abs(a - b))) for a, b in zip(res.stats.logits, ref_logits))
    full_mean = float(np.mean(full_ns))
    comp_mean = float(np.mean(res.stats.step_ns))
    return {
        "name": name,
        "length": l,
        "duplicate_density": density,
        "unique_tokens": len(set(res.tokens)),
        "duplicates": res.stats.duplicates,
        "final_cache_len": res.stats.cache_len,
        "compression_ratio": res.stats.cache_len / l,
        "cache_len_trace": res.stats.cache_len_trace,
        "mean_step_ns_full": full_mean,
        "mean_step_ns_compressed": comp_mean,
        "speedup": full_mean / comp_mean if comp_mean else 0.0,
        "max_abs_logit_diff": diff,
        "equivalence": res.tokens == ref_tokens and (mode == "lossy" or diff <= 1e-5),
    }


def run_bench(seed: int = 0, length: int = 64, densities=(0.0, 0.25, 0.5, 0.75), window=None,
              mode: str = "compensated", vocab: int | None = None, embed_dim: int = 64,
              layers: int = 4) -> dict:
    vocab = vocab or max(64, length)
    model = init_model(seed, vocab=vocab, embed_dim=embed_dim, layers=layers, l_max=length + 2)
    rng = RandomStream(seed, 1)
    workloads = [
        run_workload(model, f"forced-{d:.2f}", length, forced_sequence(length, d, vocab, rng), float(d),
                     window, mode)
        for d in densities
    ]
    workloads.append(run_workload(model, "greedy", length, None, None, window, mode))
    report = {
        "machine": machine_fingerprint(),
        "config": {"seed": seed, "length": length, "window": window, "mode": mode,
                   "vocab": vocab, "embed_dim": embed_dim, "layers": layers},
        "workloads": workloads,
    }
    jsonschema.validate(report, BENCH_SCHEMA)
    return report
