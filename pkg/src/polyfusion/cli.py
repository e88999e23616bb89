"""Batch command-line front end.

Subcommands: ``params``, ``equiv``, ``checkgrad``, ``bench``, ``traintoy``.
Each prints an aligned text table and, with ``--out``, writes one JSON
report that echoes the validated run spec, the seed and the library version.

Exit codes: 0 success, 1 property failure (or no convergence), 2 invalid
input, 3 training diverged.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
import tracemalloc
from dataclasses import asdict, dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .fusion import (
    FACTORIZED,
    REFERENCE_DIMS,
    FusionConfig,
    Variant,
    forward,
    init_layer,
    reference_configs,
    param_count,
)
from .toy_harness import INIT_STD, generate_task, train
from .verify import DEFAULT_MAX_ENTRIES, MemoryCapExceeded, check_dense_cap, run_trials

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_INVALID = 2
EXIT_DIVERGED = 3

CHECKED_VARIANTS = (Variant.DENSE,) + FACTORIZED


class InvalidRun(ValueError):
    pass


@dataclass
class RunSpec:
    subcommand: str
    configs: Optional[list[dict]]
    seed: int
    out: Optional[str] = None
    trials: Optional[int] = None
    tol: Optional[float] = None
    h: Optional[float] = None
    parallel: int = 1
    extra: dict[str, Any] = field(default_factory=dict)


# --- config handling -----------------------------------------------------------


def expand_config(obj: Any, variants: Sequence[Variant]) -> list[FusionConfig]:
    """Configs from parsed JSON.

    A list is expanded element-wise. An object without ``variant`` stands for
    every variant in ``variants`` at those dims; Tucker then takes ``ranks``
    or, failing that, ``rank`` along all three modes.
    """
    if isinstance(obj, list):
        out = []
        for item in obj:
            out.extend(expand_config(item, variants))
        return out
    if not isinstance(obj, dict):
        raise InvalidRun("config must be a JSON object or a list of objects")
    if "variant" in obj:
        return [FusionConfig.from_dict(obj)]
    configs = []
    for v in variants:
        item = {key: obj[key] for key in ("m", "a", "d", "n") if key in obj}
        item["variant"] = v.value
        if v is Variant.TUCKER:
            ranks = obj.get("ranks") or ([obj["rank"]] * 3 if "rank" in obj else None)
            item["ranks"] = ranks
        elif v in (Variant.CP, Variant.CMF, Variant.CMF_SR):
            item["rank"] = obj.get("rank")
        elif v is Variant.CONCAT:
            item.pop("m", None)
        configs.append(FusionConfig.from_dict(item))
    return configs


def _read_config(path: Optional[str], variants: Sequence[Variant]) -> Optional[list[FusionConfig]]:
    if path is None:
        return None
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise InvalidRun(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InvalidRun(f"config {path} is not valid JSON: {exc}") from None
    try:
        return expand_config(obj, variants)
    except (ValueError, TypeError) as exc:
        raise InvalidRun(f"invalid config: {exc}") from None


# --- output ------------------------------------------------------------------


def format_table(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    cells = [[str(h) for h in headers]] + [[_fmt(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for j, row in enumerate(cells):
        lines.append("  ".join(c.rjust(w) if j and _numeric(c) else c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(x: Any) -> str:
    if x is None:
        return "-"
    if isinstance(x, bool):
        return "yes" if x else "no"
    if isinstance(x, int):
        return f"{x:,}"
    if isinstance(x, float):
        if x == 0 or 1e-3 <= abs(x) < 1e6:
            return f"{x:.4g}" if abs(x) < 1 else f"{x:,.1f}"
        return f"{x:.3e}"
    return str(x)


def _numeric(s: str) -> bool:
    try:
        float(s.replace(",", ""))
        return True
    except ValueError:
        return s == "-"


def _report(spec: RunSpec, **body) -> dict:
    return {"command": spec.subcommand, "version": __version__, "runspec": asdict(spec), **body}


def _emit(spec: RunSpec, report: dict, table: str, as_json: bool) -> None:
    if spec.out:
        with open(spec.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, allow_nan=False)
            fh.write("\n")
    if as_json:
        print(json.dumps(report, indent=2, allow_nan=False))
    else:
        print(table)


# --- subcommands -------------------------------------------------------------


def cmd_params(configs: Sequence[FusionConfig]) -> list[dict]:
    """Parameter count per config plus compression ratio against Dense at equal dims."""
    rows = []
    for cfg in configs:
        count = param_count(cfg)
        dense = param_count(FusionConfig(Variant.DENSE, cfg.m, cfg.a, cfg.d, cfg.n))
        rows.append({**cfg.to_dict(), "params": count, "ratio": dense / count if count else None})
    return rows


def _params(args, spec: RunSpec) -> int:
    configs = _read_config(args.config, list(Variant))
    configs = reference_configs() if configs is None else configs
    spec.configs = [c.to_dict() for c in configs]
    rows = cmd_params(configs)
    table = format_table(
        ["variant", "m", "a", "d", "rank", "params", "ratio vs Dense"],
        [[r["variant"], r["m"], r["a"], r["d"], _rank_str(r), r["params"], r["ratio"]] for r in rows],
    )
    _emit(spec, _report(spec, rows=rows), table, args.json)
    return EXIT_OK


def _rank_str(row: dict) -> Optional[str]:
    if "ranks" in row:
        return "(" + ",".join(str(k) for k in row["ranks"]) + ")"
    return str(row["rank"]) if "rank" in row else None


def _checks(kind: str, args, spec: RunSpec) -> int:
    variants = CHECKED_VARIANTS if kind == "equiv" else tuple(Variant)
    configs = _read_config(args.config, variants)
    if kind == "equiv" and configs and any(c.variant is Variant.CONCAT for c in configs):
        raise InvalidRun("Concat has no joint tensor to compare against")
    if configs is not None:
        for cfg in configs:
            try:
                check_dense_cap(cfg, args.max_entries)
            except MemoryCapExceeded as exc:
                raise InvalidRun(f"{cfg.variant}: {exc}") from None
    spec.configs = None if configs is None else [c.to_dict() for c in configs]
    spec.extra["max_entries"] = args.max_entries
    jobs = [(v, None) for v in variants] if configs is None else [(c.variant, c) for c in configs]

    results = []
    for variant, cfg in jobs:
        summary = run_trials(kind, variant, spec.trials, spec.seed, cfg, h=spec.h or 1e-5, parallel=spec.parallel)
        entry = summary.to_dict()
        entry["config"] = None if cfg is None else cfg.to_dict()
        entry["passed"] = summary.worst <= spec.tol
        results.append(entry)
    passed = all(r["passed"] for r in results)

    if kind == "equiv":
        table = format_table(
            ["variant", "dims", "trials", "max rel err", "pass"],
            [[r["variant"], _dims(r["config"]), r["trials"], r["max_rel_err"], r["passed"]] for r in results],
        )
    else:
        rows = []
        for r in results:
            for name, err in r.get("per_array", {}).items():
                rows.append([r["variant"], _dims(r["config"]), name, err, err <= spec.tol])
        table = format_table(["variant", "dims", "array", "worst rel err", "pass"], rows)
    table += f"\n\n{'PASS' if passed else 'FAIL'} (tolerance {spec.tol:g})"
    _emit(spec, _report(spec, results=results, passed=passed), table, args.json)
    return EXIT_OK if passed else EXIT_FAIL


def _dims(cfg: Optional[dict]) -> str:
    if cfg is None:
        return "random"
    return f"{cfg['m']}x{cfg['a']}x{cfg['d']}"


def bench_forward(config: FusionConfig, iterations: int, seed: int = 0, warmup: int = 5) -> dict:
    """Time single-sample forwards and measure the peak allocation of one call."""
    rng = np.random.default_rng(seed)
    layer = init_layer(config, rng, std=INIT_STD)
    za = rng.standard_normal(config.a)
    zd = rng.standard_normal(config.d)
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base, _ = tracemalloc.get_traced_memory()
        forward(layer, za, zd)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    times = []
    if iterations > 0:
        for _ in range(warmup):
            forward(layer, za, zd)
        for _ in range(iterations):
            t0 = time.perf_counter_ns()
            forward(layer, za, zd)
            times.append(time.perf_counter_ns() - t0)
    return {
        "config": config.to_dict(),
        "iterations": iterations,
        "median_ns": float(np.median(times)) if times else None,
        "p95_ns": float(np.percentile(times, 95)) if times else None,
        "peak_bytes": int(peak - base),
        "joint_tensor_bytes": 8 * config.m * (config.a + 1) * (config.d + 1),
    }


def _bench(args, spec: RunSpec) -> int:
    if args.iterations < 0:
        raise InvalidRun("iterations must be non-negative")
    configs = _read_config(args.config, FACTORIZED + (Variant.CONCAT,))
    if configs is None:
        configs = [c for c in reference_configs() if c.variant is not Variant.DENSE]
    spec.configs = [c.to_dict() for c in configs]
    spec.extra.update(iterations=args.iterations, warmup=args.warmup)
    rows = [bench_forward(c, args.iterations, spec.seed, args.warmup) for c in configs]
    table = format_table(
        ["variant", "dims", "median ns", "p95 ns", "peak bytes", "joint tensor bytes"],
        [[r["config"]["variant"], _dims(r["config"]), r["median_ns"], r["p95_ns"], r["peak_bytes"],
          r["joint_tensor_bytes"]] for r in rows],
    )
    _emit(spec, _report(spec, results=rows), table, args.json)
    return EXIT_OK


def _traintoy(args, spec: RunSpec) -> int:
    configs = _read_config(args.config, ())
    if configs is None:
        configs = [FusionConfig(Variant.CP, 8, 8, 8, 0, 2)]
    if len(configs) != 1:
        raise InvalidRun("traintoy takes exactly one config with a variant")
    config = configs[0]
    for name in ("epochs", "samples"):
        if getattr(args, name) < (0 if name == "epochs" else 1):
            raise InvalidRun(f"invalid --{name}: {getattr(args, name)}")
    if args.batch_size is not None and args.batch_size < 1:
        raise InvalidRun("batch size must be positive")
    if args.sigma < 0 or args.lr < 0 or args.lambda2 < 0:
        raise InvalidRun("sigma, lr and lambda2 must be non-negative")
    spec.configs = [config.to_dict()]
    spec.extra.update(epochs=args.epochs, samples=args.samples, sigma=args.sigma, lr=args.lr,
                      lambda2=args.lambda2, batch_size=args.batch_size)

    task = generate_task(config, args.samples, args.sigma, spec.seed)
    student = init_layer(config, np.random.default_rng([spec.seed, 1]), std=INIT_STD)
    _, report = train(student, task, args.epochs, args.batch_size, args.lr, args.lambda2, spec.seed)
    final = report.final_train_mse
    converged = (not report.diverged) and final <= spec.tol
    body = report.to_dict()
    body.update(converged=converged, final_train_mse=final if math.isfinite(final) else None)
    for key in ("train_mse", "val_mse", "objective"):
        body[key] = [x if math.isfinite(x) else None for x in body[key]]
    table = format_table(
        ["variant", "epochs", "initial mse", "final mse", "final val mse", "penalty", "status", "converged"],
        [[config.variant.value, args.epochs, report.train_mse[0], final, report.val_mse[-1],
          report.final_penalty, report.status, converged]],
    )
    _emit(spec, _report(spec, report=body), table, args.json)
    if report.diverged:
        return EXIT_DIVERGED
    return EXIT_OK if converged else EXIT_FAIL


# --- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polyfusion", description="Polynomial fusion layer toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, tol=None):
        p.add_argument("--config", help="JSON config file: object or list of {variant, m, a, d, n, rank|ranks}")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="write the JSON report here")
        p.add_argument("--json", action="store_true", help="print the JSON report instead of a table")
        if tol is not None:
            p.add_argument("--tol", type=float, default=tol)

    p = sub.add_parser("params", help="parameter counts and compression ratios")
    common(p)

    for name, trials, tol, helptext in (
        ("equiv", 1000, 1e-10, "factorized forward vs dense joint-tensor evaluation"),
        ("checkgrad", 100, 1e-6, "analytic gradients vs central finite differences"),
    ):
        p = sub.add_parser(name, help=helptext)
        common(p, tol)
        p.add_argument("--trials", "--seeds", dest="trials", type=int, default=trials)
        p.add_argument("--parallel", type=int, default=1, help="worker threads for trials")
        p.add_argument("--max-entries", type=int, default=DEFAULT_MAX_ENTRIES,
                       help="refuse configs whose dense joint tensor exceeds this many entries")
        if name == "checkgrad":
            p.add_argument("--h", type=float, default=1e-5)

    p = sub.add_parser("bench", help="forward-pass timing and peak allocation")
    common(p)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=10)

    p = sub.add_parser("traintoy", help="teacher-student training run")
    common(p, 1e-3)
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--lambda2", type=float, default=0.0)
    p.add_argument("--batch-size", type=int, default=None)
    return parser


def _spec_from_args(args) -> RunSpec:
    spec = RunSpec(args.command, None, args.seed, args.out, getattr(args, "trials", None),
                   getattr(args, "tol", None), getattr(args, "h", None), getattr(args, "parallel", 1))
    if spec.seed < 0 or spec.seed >= 2**64:
        raise InvalidRun("seed must be an unsigned 64-bit integer")
    if spec.trials is not None and spec.trials < 1:
        raise InvalidRun("trials must be positive")
    if spec.tol is not None and not (spec.tol >= 0 and math.isfinite(spec.tol)):
        raise InvalidRun("tolerance must be a finite non-negative number")
    if spec.h is not None and not (spec.h > 0 and math.isfinite(spec.h)):
        raise InvalidRun("h must be positive")
    if spec.parallel < 1:
        raise InvalidRun("parallel must be at least 1")
    return spec


COMMANDS = {
    "params": _params,
    "equiv": lambda args, spec: _checks("equiv", args, spec),
    "checkgrad": lambda args, spec: _checks("grad", args, spec),
    "bench": _bench,
    "traintoy": _traintoy,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = _spec_from_args(args)
        return COMMANDS[args.command](args, spec)
    except InvalidRun as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
