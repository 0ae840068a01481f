"""``mergevq`` command-line interface.

Every subcommand prints a JSON document on stdout (human-oriented notes go
to stderr). Settings come from an optional ``--config`` JSON file with
command-line flags taking precedence.

Exit codes: 0 success, 1 invalid configuration or input, 2 runtime error,
3 acceptance failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import acceptance, align, bench, formats, lfq, mergear, randgen, recovery, sampler, tome, toymodel
from .numerics import RandomStream

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ACCEPTANCE = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    l: int = 64
    n_layers: int = 4
    schedule: str = "square"
    k: int = 16
    embed_dim: int = 32
    code_dim: int = lfq.DEFAULT_CODE_DIM
    recovery_hidden: int = recovery.DEFAULT_HIDDEN
    classes: int = 10
    sampler_kind: str = "exponential"
    sampler_version: str = "R"
    lam: float = 1.0
    mu: float = 0.0
    sigma: float = 1.0
    n_samples: int = 100_000
    mode: str = "compensated"
    window: int | None = None
    length: int = 64
    vocab: int = 64
    model_dim: int = 64
    model_layers: int = 4
    out_dir: str = "out"

    def validate(self) -> "RunConfig":
        positive = ("l", "n_layers", "k", "embed_dim", "code_dim", "recovery_hidden", "classes",
                    "n_samples", "length", "vocab", "model_dim", "model_layers")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.k > self.l:
            raise ConfigError(f"k={self.k} exceeds l={self.l}")
        if self.schedule not in ("square", "linear", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.mode not in mergear.MODES:
            raise ConfigError(f"mode must be one of {mergear.MODES}")
        if self.window is not None and self.window < 0:
            raise ConfigError("window must be >= 0")
        if self.sampler_kind not in sampler.KINDS:
            raise ConfigError(f"sampler_kind must be one of {sampler.KINDS}")
        if self.sampler_version not in sampler.VERSIONS:
            raise ConfigError(f"sampler_version must be one of {tuple(sampler.VERSIONS)}")
        if not 1 <= self.code_dim <= 62:
            raise ConfigError("code_dim must be in [1, 62]")
        return self


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value):
    kind = _FIELD_TYPES[name]
    if kind == "int | None":
        if value is None or value in ("inf", "none"):
            return None
        kind = "int"
    try:
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot use {value!r} as {kind}") from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(data) - set(_FIELD_TYPES))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        values.update(data)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**{k: _coerce(k, v) for k, v in values.items()}).validate()


def mvq_threads() -> int:
    raw = os.environ.get("MVQ_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"MVQ_THREADS must be an integer, got {raw!r}") from None


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_encode(cfg: RunConfig) -> dict:
    """Patch stub -> merging encoder -> LFQ -> token recovery, plus losses."""
    rng = RandomStream(cfg.seed)
    schedule = tome.make_schedule(cfg.schedule, cfg.l, cfg.k, cfg.n_layers)
    patches = rng.child(1).matrix(cfg.l, cfg.embed_dim)
    weights = tome.init_encoder(cfg.embed_dim, cfg.n_layers, rng.child(2))
    source, z_k = tome.encode(patches, schedule, weights)
    to_code = rng.child(3).matrix(cfg.embed_dim, cfg.code_dim, 1.0 / math.sqrt(cfg.embed_dim))
    z = (z_k.astype(np.float64) @ to_code.astype(np.float64)).astype(np.float32)
    indices, z_quant = lfq.quantize(z)
    z_l = recovery.recover_tokens(z_quant, source)
    model = recovery.RecoveryModel.init(cfg.l, cfg.code_dim, rng.child(4), hidden=cfg.recovery_hidden)
    logits = recovery.recovery_forward(model, z_quant)
    prediction = recovery.predict_source(logits)
    teacher = align.StubTeacher.init(cfg.embed_dim, cfg.classes, rng.child(5))
    student = rng.child(6).matrix(cfg.embed_dim, cfg.classes, 1.0 / math.sqrt(cfg.embed_dim))
    _, view = align.two_views(patches, rng.child(7))
    stats = lfq.record_usage(lfq.CodebookStats(cfg.code_dim), indices)

    out = _out_dir(cfg)
    formats.write_source(out / "source.mvqs", source)
    formats.write_tensor(out / "z_k.mvqt", z_k)
    formats.write_tensor(out / "z_l.mvqt", z_l)
    formats.write_codes(out / "tokens.codes", indices)
    summary = {
        "seed": cfg.seed,
        "L": cfg.l,
        "K": int(z_k.shape[0]),
        "N": cfg.n_layers,
        "schedule": cfg.schedule,
        "schedule_counts": list(schedule.counts),
        "schedule_sum": schedule.total,
        "code_dim": cfg.code_dim,
        "distinct_codes": stats.distinct,
        "usage": stats.usage,
        "losses": {
            "commitment": lfq.commitment_loss(z, z_quant),
            "entropy_penalty": lfq.entropy_penalty(z),
            "source": recovery.source_loss(logits, source),
            "align": align.align_loss(align.cls_distribution(z_k, student), teacher.distribution(view)),
        },
        "predicted_source_degenerate": prediction.degenerate,
        "files": ["source.mvqs", "z_k.mvqt", "z_l.mvqt", "tokens.codes", "summary.json"],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def run_recover(cfg: RunConfig, codes_path, source_path=None) -> dict:
    indices = formats.read_codes(codes_path)
    if indices.size == 0:
        raise ConfigError(f"{codes_path}: no codes")
    z_quant = lfq.index_codes(indices, cfg.code_dim)
    out = _out_dir(cfg)
    if source_path is not None:
        source, degenerate = formats.read_source(source_path), False
    else:
        model = recovery.RecoveryModel.init(cfg.l, cfg.code_dim, RandomStream(cfg.seed).child(4),
                                            hidden=cfg.recovery_hidden)
        prediction = recovery.predict_source(recovery.recovery_forward(model, z_quant))
        source, degenerate = prediction.source, prediction.degenerate
        formats.write_source(out / "predicted_source.mvqs", source)
    z_l = recovery.recover_tokens(z_quant, source)
    formats.write_tensor(out / "z_l.mvqt", z_l)
    return {"K": int(z_quant.shape[0]), "L": source.l, "predicted": source_path is None,
            "degenerate": degenerate, "output": str(out / "z_l.mvqt")}


def _model(cfg: RunConfig, l_max: int) -> toymodel.ToyARModel:
    return toymodel.init_model(cfg.seed, vocab=cfg.vocab, embed_dim=cfg.model_dim,
                               layers=cfg.model_layers, l_max=l_max)


def run_mergear(cfg: RunConfig) -> dict:
    model = _model(cfg, cfg.length + mergear.PREFIX)
    return mergear.simulate(model, cfg.seed, cfg.length, cfg.mode, cfg.window)


def run_randgen(cfg: RunConfig, k: int) -> dict:
    if cfg.vocab > 1 << cfg.code_dim:
        raise ConfigError(f"vocab {cfg.vocab} does not fit {cfg.code_dim}-bit codes")
    rng = RandomStream(cfg.seed)
    model = _model(cfg, 2 * k + 1)
    trace = randgen.random_order_decode(model, int(rng.integers(16, 1)[0]), k, rng.child(1))
    rec = recovery.RecoveryModel.init(cfg.l, cfg.code_dim, rng.child(4), hidden=cfg.recovery_hidden)
    result = randgen.generate_pipeline(trace, rec, cfg.code_dim, cfg.l)
    out = _out_dir(cfg)
    formats.write_tensor(out / "expanded.mvqt", result.output)
    formats.write_source(out / "predicted_source.mvqs", result.source)
    meta = {
        "seed": cfg.seed,
        "K": k,
        "L": cfg.l,
        "class_id": trace.class_id,
        "permutation": trace.permutation.tolist(),
        "tokens": trace.tokens,
        "raster_tokens": trace.raster_tokens(),
        "stream": [[kind, ident] for kind, ident in trace.stream],
        "degenerate": result.degenerate,
        "empty_clusters": list(result.prediction.empty_clusters),
        "output_shape": list(result.output.shape),
    }
    (out / "trace.json").write_text(json.dumps(meta, indent=2) + "\n")
    return meta


def run_sample(cfg: RunConfig) -> dict:
    smp = sampler.MergeRatioSampler(kind=cfg.sampler_kind, version=cfg.sampler_version,
                                    lam=cfg.lam, mu=cfg.mu, sigma=cfg.sigma)
    return sampler.histogram(smp, RandomStream(cfg.seed), cfg.n_samples)


def run_verify(only=None, fixtures=None, threads: int = 1) -> tuple[bool, list]:
    chosen = acceptance.select(only)

    def one(c):
        if c.key == "fixtures" and fixtures is not None:
            return acceptance.run_criterion(c, path=fixtures)
        return acceptance.run_criterion(c)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, chosen))
    else:
        results = [one(c) for c in chosen]
    return all(r.passed for r in results), results


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", dest="out_dir")

    parser = argparse.ArgumentParser(prog="mergevq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", parents=[common], help="run the tokenizer pipeline and write artifacts")
    p.add_argument("--length", "-L", dest="l", type=int)
    p.add_argument("--layers", dest="n_layers", type=int)
    p.add_argument("--k", type=int, help="target kept-token count")
    p.add_argument("--schedule", choices=("square", "linear", "constant"))
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--code-dim", dest="code_dim", type=int)
    p.add_argument("--recovery-hidden", dest="recovery_hidden", type=int)

    p = sub.add_parser("recover", parents=[common], help="expand a .codes file back to L tokens")
    p.add_argument("--codes", required=True)
    p.add_argument("--source", help="MVQS file; skips the recovery model")
    p.add_argument("--length", "-L", dest="l", type=int)
    p.add_argument("--code-dim", dest="code_dim", type=int)
    p.add_argument("--recovery-hidden", dest="recovery_hidden", type=int)

    p = sub.add_parser("mergear-sim", parents=[common], help="compressed vs full raster decode")
    p.add_argument("--length", type=int)
    p.add_argument("--mode", choices=mergear.MODES)
    p.add_argument("--window", help="look-back window (integer or 'inf')")
    p.add_argument("--vocab", type=int)

    p = sub.add_parser("randgen-sim", parents=[common], help="random-order decode plus token expansion")
    p.add_argument("--k", dest="randgen_k", type=int, default=16)
    p.add_argument("--l", dest="l", type=int)
    p.add_argument("--code-dim", dest="code_dim", type=int)
    p.add_argument("--recovery-hidden", dest="recovery_hidden", type=int)

    p = sub.add_parser("sample-ratios", parents=[common], help="merge-ratio histogram and exact table")
    p.add_argument("--version", dest="sampler_version", choices=tuple(sampler.VERSIONS))
    p.add_argument("--kind", dest="sampler_kind", choices=sampler.KINDS)
    p.add_argument("--n", dest="n_samples", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--sigma", type=float)

    sub.add_parser("align-demo", parents=[common], help="alignment loss on seeded fixtures")

    p = sub.add_parser("bench", parents=[common], help="timing and cache-size sweep")
    p.add_argument("--length", type=int)
    p.add_argument("--mode", choices=mergear.MODES)
    p.add_argument("--window", help="look-back window (integer or 'inf')")

    p = sub.add_parser("verify", help="run the acceptance criteria")
    p.add_argument("--only", action="append", help="module or criterion key (repeatable)")
    p.add_argument("--fixtures", help="golden values file to check instead of the packaged one")
    p.add_argument("--json", action="store_true", help="also print a JSON summary")
    return parser


def _overrides(args) -> dict:
    names = set(_FIELD_TYPES)
    return {k: v for k, v in vars(args).items() if k in names}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            threads = mvq_threads()
            ok, results = run_verify(args.only, args.fixtures, threads)
            for r in results:
                print(r.line)
            print(f"{sum(r.passed for r in results)}/{len(results)} criteria passed")
            if args.json:
                _emit({"passed": ok, "criteria": [
                    {"key": r.criterion.key, "passed": r.passed, "seconds": r.seconds, "detail": r.detail}
                    for r in results]})
            return EXIT_OK if ok else EXIT_ACCEPTANCE
        cfg = load_config(args.config, _overrides(args))
    except (ConfigError, formats.FormatError) as exc:
        _note(f"error: {exc}")
        return EXIT_CONFIG
    except ValueError as exc:
        _note(f"error: {exc}")
        return EXIT_CONFIG

    try:
        if args.command == "encode":
            result = run_encode(cfg)
            _note(f"wrote {cfg.out_dir}: K={result['K']} usage={result['usage']:.4g}")
        elif args.command == "recover":
            result = run_recover(cfg, args.codes, args.source)
        elif args.command == "mergear-sim":
            result = run_mergear(cfg)
        elif args.command == "randgen-sim":
            result = run_randgen(cfg, args.randgen_k)
        elif args.command == "sample-ratios":
            result = run_sample(cfg)
        elif args.command == "align-demo":
            result = align.align_demo(cfg.seed, embed_dim=cfg.embed_dim, classes=cfg.classes)
        elif args.command == "bench":
            result = bench.run_bench(seed=cfg.seed, length=cfg.length, window=cfg.window, mode=cfg.mode)
        else:  # pragma: no cover - argparse rejects unknown commands
            raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, formats.FormatError) as exc:
        _note(f"error: {exc}")
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported through the exit-code contract
        _note(f"runtime error: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    _emit(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
