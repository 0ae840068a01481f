"""Release-gate criteria, runnable from pytest or ``mergevq verify``.

Each criterion is a function returning a short detail string and raising
:class:`CriterionFailed` when its check does not hold. Tolerances and time
budgets are fixed here.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from . import align, bench, lfq, mergear, recovery, sampler, tome, toymodel
from .numerics import RandomStream


class CriterionFailed(AssertionError):
    pass


def _require(cond, msg):
    if not cond:
        raise CriterionFailed(msg)


@dataclass(frozen=True)
class Criterion:
    key: str
    module: str
    title: str
    budget_s: float
    run: Callable[[], str]


@dataclass
class CriterionResult:
    criterion: Criterion
    passed: bool
    detail: str
    seconds: float

    @property
    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        c = self.criterion
        return f"[{status}] {c.key:<16} {c.title} ({self.seconds:.2f}s / {c.budget_s:g}s) {self.detail}"


def _max_constant_r(l: int, n: int) -> int:
    r = l // 2
    while r > 0:
        try:
            tome.constant_schedule(r, n).check(l)
            return r
        except ValueError:
            r -= 1
    return 0


def merge_arithmetic() -> str:
    rng = RandomStream(101)
    checked = 0
    for l in (16, 64, 256):
        for n in (1, 4, 12):
            top = _max_constant_r(l, n)
            for r in sorted({0, 1, top // 2, top} & set(range(top + 1))):
                x = rng.matrix(l, 8)
                s, z = tome.encode(x, tome.constant_schedule(r, n), rng=rng)
                _require(z.shape[0] == l - r * n and s.shape == (l - r * n, l),
                         f"L={l} N={n} r={r}: got K={z.shape[0]}, S {s.shape}")
                checked += 1
    return f"{checked} encodes, K = L - rN exact"


def _random_schedule(l: int, n: int, rng: RandomStream) -> tome.MergeSchedule:
    counts, remaining = [], l
    for u in rng.uniform(n):
        r = int(u * (remaining // 2 + 1))
        counts.append(r)
        remaining -= r
    return tome.MergeSchedule(tuple(counts))


def partition_invariants(trials: int = 1000) -> str:
    rng = RandomStream(202)
    for trial in range(trials):
        l = 2 + int(rng.integers(63, 1)[0])
        n = 1 + int(rng.integers(4, 1)[0])
        sched = _random_schedule(l, n, rng)
        weights = tome.init_encoder(8, n, rng)
        state = tome.TokenState.initial(rng.matrix(l, 8))
        for r, w in zip(sched.counts, weights):
            state = tome.tome_attention_layer(state, r, w)
            dense = state.source.dense(np.int64)
            _require(np.all(dense.sum(axis=0) == 1), f"trial {trial}: column sum != 1")
            _require(np.all(dense.sum(axis=1) >= 1), f"trial {trial}: empty cluster row")
            _require(dense.sum() == l, f"trial {trial}: total {dense.sum()} != {l}")
            _require(np.array_equal(dense.sum(axis=1), state.sizes), f"trial {trial}: sizes != row sums")
            _require(int(state.sizes.sum()) == l, f"trial {trial}: size sum != L")
        _require(state.count == l - sched.total, f"trial {trial}: K mismatch")
    return f"{trials} randomized encodes"


def duplicate_attention_identity(trials: int = 200) -> str:
    rng = RandomStream(303)
    worst = 0.0
    for trial in range(trials):
        l = 2 * (1 + int(rng.integers(32, 1)[0]))
        dim = 4 + int(rng.integers(13, 1)[0])
        x = rng.matrix(l, dim)
        dup = rng.uniform(l // 2) < 0.5
        dup[0] = True
        for a in np.flatnonzero(dup):
            x[2 * a + 1] = x[2 * a]
        w = tome.LayerWeights.init(dim, rng)
        keys = tome.attention_block(x, None, w)[1]
        plan = tome.bipartite_soft_match(keys, np.ones(l), int(dup.sum()))
        _require(sorted(plan.pairs) == [(int(a), int(a)) for a in np.flatnonzero(dup)],
                 f"trial {trial}: matching did not pick the duplicate pairs")
        merged = tome.apply_merge(tome.TokenState.initial(x), plan)
        out_merged, _ = tome.attention_block(merged.tokens, merged.sizes, w)
        out_full, _ = tome.attention_block(x, None, w)
        delta = float(np.max(np.abs(out_merged[merged.source.assignment] - out_full)))
        worst = max(worst, delta)
        _require(delta <= 1e-6, f"trial {trial}: max |delta| = {delta:.3g}")
    return f"{trials} instances, max |delta| = {worst:.2e}"


def lfq_bijection() -> str:
    for d in range(1, 13):
        idx = np.arange(1 << d)
        _require(np.array_equal(lfq.code_indices(lfq.index_codes(idx, d)), idx), f"d={d}: roundtrip broken")
    rng = RandomStream(404)
    z = rng.matrix(10_000, lfq.DEFAULT_CODE_DIM)
    i1, q1 = lfq.quantize(z)
    i2, q2 = lfq.quantize(q1)
    _require(np.array_equal(q1, q2) and np.array_equal(i1, i2), "quantize is not idempotent")
    return "d = 1..12 exhaustive; 10^4 rows idempotent"


def _same_partition(a: np.ndarray, b: np.ndarray) -> bool:
    return len(set(zip(a.tolist(), b.tolist()))) == len(set(a.tolist())) == len(set(b.tolist()))


def recovery_round_trip(trials: int = 100) -> str:
    rng = RandomStream(505)
    dim = 12
    for trial in range(trials):
        m = 1 + int(rng.integers(3, 1)[0])
        block = 1 << m
        k = 2 + int(rng.integers(64 // block - 1, 1)[0])
        l = k * block
        base = rng.matrix(k, dim)
        x = np.repeat(base, block, axis=0)
        sched = tome.MergeSchedule(tuple(l >> (i + 1) for i in range(m)))
        weights = tome.init_encoder(dim, m, rng)
        s, z_k = tome.encode(x, sched, weights)
        _require(_same_partition(s.assignment, np.arange(l) // block),
                 f"trial {trial}: clusters differ from duplicate blocks")
        _, zq = lfq.quantize(z_k)
        z_l = recovery.recover_tokens(zq, s)
        _require(np.array_equal(z_l, zq[s.assignment]), f"trial {trial}: rows differ from cluster bases")
        _, expanded = lfq.quantize(tome.transformer_stack(x, weights))
        _require(np.array_equal(z_l, expanded), f"trial {trial}: differs from unmerged oracle")
    return f"{trials} trials bitwise"


def _fd_rel_err(f, x, grad, h=1e-4) -> float:
    x = np.array(x, dtype=np.float64)
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        fd[idx] = (up - down) / (2 * h)
    return float(np.max(np.abs(fd - grad) / np.maximum(np.abs(grad), 1.0)))


def _naive_bce(p, truth: tome.SourceMatrix) -> float:
    total = 0.0
    l, k = p.shape
    for j in range(l):
        for i in range(k):
            q = min(max(p[j, i], recovery.PROB_EPS), 1 - recovery.PROB_EPS)
            s = 1.0 if truth.assignment[j] == i else 0.0
            total -= s * math.log(q) + (1 - s) * math.log(1 - q)
    return total


def loss_gradients(trials: int = 100) -> str:
    rng = RandomStream(606)
    one = tome.SourceMatrix([0], 1)
    _require(abs(recovery.source_loss(np.array([[0.5]]), one) - math.log(2)) < 1e-12, "source loss ln 2 check")
    uni = np.full(10, 0.1)
    _require(abs(align.align_loss(uni, uni) - math.log(10)) < 1e-12, "align loss ln C check")
    worst_loss, worst_grad = 0.0, 0.0
    for trial in range(trials):
        l = 1 + int(rng.integers(12, 1)[0])
        k = 1 + int(rng.integers(6, 1)[0])
        truth = tome.SourceMatrix(rng.integers(k, l), k)
        probs = recovery.SourceLogits(np.zeros((l, k)), 0.02 + 0.96 * rng.uniform(l * k).reshape(l, k))
        loss = recovery.source_loss(probs, truth)
        d = abs(loss - _naive_bce(probs.probs, truth))
        worst_loss = max(worst_loss, d)
        _require(d <= 1e-6, f"trial {trial}: source_loss off by {d:.3g}")
        err = _fd_rel_err(lambda p: recovery.source_loss(p, truth), probs.probs,
                          recovery.source_loss_grad(probs, truth))
        worst_grad = max(worst_grad, err)
        _require(err <= 1e-4, f"trial {trial}: source_loss gradient rel err {err:.3g}")

        c = 2 + int(rng.integers(9, 1)[0])
        student = rng.uniform(c) + 0.05
        student /= student.sum()
        teacher = rng.uniform(c)
        teacher /= teacher.sum()
        naive = -sum(teacher[i] * math.log(max(student[i], align.STUDENT_EPS)) for i in range(c))
        d = abs(align.align_loss(student, teacher) - naive)
        worst_loss = max(worst_loss, d)
        _require(d <= 1e-6, f"trial {trial}: align_loss off by {d:.3g}")
        err = _fd_rel_err(lambda s: align.cross_entropy(s, teacher), student,
                          align.align_loss_grad(student, teacher))
        worst_grad = max(worst_grad, err)
        _require(err <= 1e-4, f"trial {trial}: align_loss gradient rel err {err:.3g}")
    return f"loss |delta| <= {worst_loss:.1e}, grad rel err <= {worst_grad:.1e}"


def _mergear_trial(seed: int):
    model = toymodel.init_model(seed)
    rng = RandomStream(seed, 7)
    l = 16 + int(rng.integers(113, 1)[0])
    class_id = int(rng.integers(16, 1)[0])
    merge_id = int(rng.integers(16, 1)[0])
    return model, l, class_id, merge_id


def mergear_equivalence(trials: int = 100) -> str:
    worst, dups = 0.0, 0
    for seed in range(trials):
        model, l, class_id, merge_id = _mergear_trial(seed)
        res = mergear.decode_raster(model, class_id, merge_id, l, "compensated", None)
        ref_tokens, ref_logits, _ = mergear.decode_full_oracle(model, class_id, merge_id, l)
        _require(res.tokens == ref_tokens, f"seed {seed}: token streams differ")
        d = max(float(np.max(np.abs(a - b))) for a, b in zip(res.stats.logits, ref_logits))
        worst = max(worst, d)
        _require(d <= 1e-5, f"seed {seed}: logits differ by {d:.3g}")
        _require(res.stats.cache_len == len(set(res.tokens)),
                 f"seed {seed}: cache {res.stats.cache_len} != unique {len(set(res.tokens))}")
        dups += res.stats.duplicates
    return f"{trials} trials, {dups} duplicates pruned, max |dlogit| = {worst:.1e}"


def mask_duality(trials: int = 50) -> str:
    for seed in range(trials):
        model, l, class_id, merge_id = _mergear_trial(1000 + seed)
        res = mergear.decode_raster(model, class_id, merge_id, l, "compensated", None)
        mask = mergear.build_causal_mask(mergear.token_source(res.tokens))
        for i in range(l):
            kept = res.stats.kept_keys(i)
            _require(mask.keys_for(i).tolist() == kept, f"seed {seed}: step {i} mask/cache disagree")
    return f"{trials} traces"


SAMPLER_SUPPORTS = (("R", 36), ("G+R", 144), ("G", 256))


def sampler_fidelity(draws: int = 100_000) -> str:
    worst = 0.0
    for i, (version, at_zero) in enumerate(SAMPLER_SUPPORTS):
        for kind in sampler.KINDS:
            smp = sampler.MergeRatioSampler(kind=kind, version=version)
            _require(sampler.kept_tokens(smp, 0) == at_zero, f"{version}: T=0 gives {smp.kept(0)}")
            table = sampler.distribution_table(smp)
            _require(abs(sum(p for _, p in table) - 1.0) <= 1e-9, f"{version}/{kind}: table not normalized")
            hist = sampler.histogram(smp, RandomStream(707, i), draws)
            worst = max(worst, hist["tv_distance"])
            _require(hist["tv_distance"] <= 0.02, f"{version}/{kind}: TV {hist['tv_distance']:.4f}")
            lo, hi = smp.kept_range
            for t, _ in table:
                kept = sampler.kept_tokens(smp, t)
                _require(math.isqrt(kept) ** 2 == kept and lo <= kept <= hi,
                         f"{version}/{kind}: kept {kept} not a square in [{lo}, {hi}]")
    return f"6 samplers, max TV = {worst:.4f}"


def incremental_decode(trials: int = 100) -> str:
    worst = 0.0
    for seed in range(trials):
        rng = RandomStream(seed, 9)
        model = toymodel.init_model(seed, vocab=32, embed_dim=32, layers=2 + seed % 3, l_max=80,
                                    content_kv=bool(seed % 2))
        n = 2 + int(rng.integers(60, 1)[0])
        kinds = ["class", "merge"] + [("image", "pos")[int(u < 0.2)] for u in rng.uniform(n - 2)]
        inputs = []
        for kind in kinds:
            high = model.table(kind).shape[0]
            inputs.append((kind, int(rng.integers(high, 1)[0])))
        cache = toymodel.KvCache(model)
        steps = np.stack([toymodel.forward_step(model, ident, p, cache, kind=kind)
                          for p, (kind, ident) in enumerate(inputs)])
        d = float(np.max(np.abs(steps - toymodel.full_forward(model, inputs))))
        worst = max(worst, d)
        _require(d <= 1e-5, f"seed {seed}: step vs full differ by {d:.3g}")
    return f"{trials} trials, max |dlogit| = {worst:.1e}"


def bench_sanity() -> str:
    report = bench.run_bench(seed=11, length=64, densities=(0.0, 0.5))
    zero, half = report["workloads"][0], report["workloads"][1]
    _require(zero["compression_ratio"] == 1.0, f"zero-duplicate ratio {zero['compression_ratio']}")
    _require(abs(half["final_cache_len"] - 32) <= 2, f"50% duplicates left cache {half['final_cache_len']}")
    json.dumps(report)
    return f"ratio(0%) = 1.0, cache(50%) = {half['final_cache_len']}/64"


def golden_path() -> Path:
    return Path(str(resources.files("mergevq") / "data" / "golden.json"))


def golden_values() -> dict:
    """Recompute every value frozen in the golden file."""
    rng = RandomStream(0)
    return {
        "rng_seed0_normal8": [float.hex(float(v)) for v in rng.normal(8)],
        "rng_seed0_stream1_uniform4": [float.hex(float(v)) for v in RandomStream(0, 1).uniform(4)],
        "square_schedule_256_144_12": list(tome.square_schedule(256, 144, 12).counts),
        "exponential_R_table": [[t, round(p, 12)] for t, p in
                                sampler.distribution_table(sampler.MergeRatioSampler("exponential", "R"))],
        "gaussian_GR_table": [[t, round(p, 12)] for t, p in
                              sampler.distribution_table(sampler.MergeRatioSampler("gaussian", "G+R"))],
    }


def fixtures(path: Path | None = None) -> str:
    path = Path(path) if path is not None else golden_path()
    try:
        frozen = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise CriterionFailed(f"cannot read {path}: {exc}") from None
    _require(isinstance(frozen, dict), f"{path}: not a JSON object")
    current = golden_values()
    missing = sorted(set(current) - set(frozen))
    _require(not missing, f"{path}: missing {missing}")
    drift = [key for key in current if json.loads(json.dumps(current[key])) != frozen[key]]
    _require(not drift, f"{path}: values drifted for {drift}")
    return f"{len(current)} frozen values match"


CRITERIA = (
    Criterion("merge-arith", "tome", "K = L - rN over the L/N grid", 1.0, merge_arithmetic),
    Criterion("partition", "tome", "source partition invariants, 1000 encodes", 30.0, partition_invariants),
    Criterion("dup-attention", "tome", "log-s attention = expanded duplicates", 30.0, duplicate_attention_identity),
    Criterion("lfq-bijection", "lfq", "code bijection d<=12, quantize idempotent", 10.0, lfq_bijection),
    Criterion("round-trip", "recovery", "encode -> quantize -> recover bitwise", 30.0, recovery_round_trip),
    Criterion("loss-grads", "recovery", "losses vs naive loops, gradients vs FD", 30.0, loss_gradients),
    Criterion("mergear-equiv", "mergear", "compensated decode = full decode", 120.0, mergear_equivalence),
    Criterion("mask-duality", "mergear", "dedup mask = retained cache keys", 30.0, mask_duality),
    Criterion("sampler", "sampler", "sampler TV <= 0.02, kept counts square", 30.0, sampler_fidelity),
    Criterion("incremental", "toymodel", "step decode = full masked forward", 60.0, incremental_decode),
    Criterion("bench", "cli", "bench compression sanity", 60.0, bench_sanity),
    Criterion("fixtures", "numerics", "frozen golden values", 10.0, fixtures),
)


def select(only=None) -> list[Criterion]:
    if not only:
        return list(CRITERIA)
    wanted = set(only)
    chosen = [c for c in CRITERIA if c.module in wanted or c.key in wanted]
    unknown = wanted - {c.module for c in CRITERIA} - {c.key for c in CRITERIA}
    if unknown:
        raise ValueError(f"unknown criteria filter: {sorted(unknown)}")
    return chosen


def run_criterion(c: Criterion, **kwargs) -> CriterionResult:
    start = time.perf_counter()
    try:
        detail = c.run(**kwargs)
        passed = True
    except CriterionFailed as exc:
        detail, passed = str(exc), False
    seconds = time.perf_counter() - start
    if passed and seconds > c.budget_s:
        passed, detail = False, f"{detail}; over time budget"
    return CriterionResult(c, passed, detail, seconds)
