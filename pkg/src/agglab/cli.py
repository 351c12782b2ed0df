"""Benchmark front end: run sweeps from a spec file, report CSVs, verify.

Spec files are flat ``key = value`` lines; ``#`` starts a comment and
commas separate list entries:

    protocols = LightSecAgg, SecAgg, SecAggPlus
    N = 20, 40
    p = 0.0, 0.3
    d = 1000
    q = 2147483647
    U = auto                  # or fixed:<k>
    training_delay_ms = 0
    pipelines = NonOverlapped, Overlapped
    repeats = 1
    seed = bench
    transport = inprocess     # or tcp
    out = results

Every key is optional.  The environment variables ``AGGLAB_SEED`` and
``AGGLAB_OUT`` override the spec's seed and output directory, and the
``--seed`` / ``--out`` flags override both.  All randomness flows from
the resolved seed, so two runs of one spec write identical CSVs apart
from the measured ``wall_ms`` column.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from .config import choose_recovery_quorum
from .costs import write_cost_csv
from .errors import AgglabError, ConfigError
from .field import DEFAULT_MODULUS
from .harness import (
    PIPELINE_NONOVERLAPPED,
    PIPELINES,
    PROTOCOLS,
    InProcessTransport,
    TcpLoopbackTransport,
    save_round_bundle,
    sweep,
    verify_bundle,
)
from .report import render_report

TRANSPORTS = ("inprocess", "tcp")


@dataclass(frozen=True)
class SweepSpec:
    """Parsed experiment description with defaults for omitted keys."""

    protocols: tuple = PROTOCOLS
    sizes: tuple = (20,)
    rates: tuple = (0.0,)
    model_len: int = 1000
    modulus: int = DEFAULT_MODULUS
    quorum: str = "auto"
    training_delay_ms: float = 0.0
    pipelines: tuple = (PIPELINE_NONOVERLAPPED,)
    repeats: int = 1
    seed: str = "agglab"
    transport: str = "inprocess"
    out: str | None = None


def _split_list(value: str) -> list[str]:
    return [part.strip() for part in value.split(",") if part.strip()]


def _parse_value(key: str, value: str) -> dict:
    try:
        if key == "protocols":
            return {"protocols": tuple(_split_list(value))}
        if key == "N":
            return {"sizes": tuple(int(v) for v in _split_list(value))}
        if key == "p":
            return {"rates": tuple(float(v) for v in _split_list(value))}
        if key == "d":
            return {"model_len": int(value)}
        if key == "q":
            return {"modulus": int(value)}
        if key == "U":
            return {"quorum": value}
        if key == "training_delay_ms":
            return {"training_delay_ms": float(value)}
        if key == "pipelines":
            return {"pipelines": tuple(_split_list(value))}
        if key == "repeats":
            return {"repeats": int(value)}
        if key == "seed":
            return {"seed": value}
        if key == "transport":
            return {"transport": value}
        if key == "out":
            return {"out": value}
    except ValueError:
        raise ConfigError(key, f"cannot parse value {value!r}")
    raise ConfigError(key, "unknown spec key")


def parse_spec_text(text: str) -> SweepSpec:
    spec = SweepSpec()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(
                "spec", f"line {lineno}: expected 'key = value', got {raw!r}"
            )
        key, value = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ConfigError(key, f"line {lineno}: key given twice")
        seen.add(key)
        spec = replace(spec, **_parse_value(key, value))
    _validate_spec(spec)
    return spec


def parse_spec_file(path) -> SweepSpec:
    return parse_spec_text(Path(path).read_text())


def _validate_spec(spec: SweepSpec) -> None:
    unknown = [p for p in spec.protocols if p not in PROTOCOLS]
    if unknown:
        raise ConfigError(
            "protocols", f"unknown protocols {unknown}; choose from {PROTOCOLS}"
        )
    if not spec.protocols:
        raise ConfigError("protocols", "need at least one protocol")
    if not spec.sizes or any(n < 2 for n in spec.sizes):
        raise ConfigError("N", f"need population sizes >= 2, got {spec.sizes}")
    if not spec.rates or any(not 0.0 <= p < 1.0 for p in spec.rates):
        raise ConfigError("p", f"need dropout rates in [0, 1), got {spec.rates}")
    if spec.model_len < 1:
        raise ConfigError("d", f"need a positive model length, got {spec.model_len}")
    bad = [m for m in spec.pipelines if m not in PIPELINES]
    if bad or not spec.pipelines:
        raise ConfigError(
            "pipelines", f"unknown pipeline modes {bad}; choose from {PIPELINES}"
        )
    if spec.repeats < 1:
        raise ConfigError("repeats", f"need at least one repeat, got {spec.repeats}")
    if spec.transport not in TRANSPORTS:
        raise ConfigError(
            "transport",
            f"unknown transport {spec.transport!r}; choose from {TRANSPORTS}",
        )
    if spec.quorum == "auto":
        for n in spec.sizes:
            for p in spec.rates:
                quorum = choose_recovery_quorum(n, p)
                if quorum <= n // 2:
                    raise ConfigError(
                        "U",
                        f"auto quorum {quorum} is infeasible at cell N={n}, "
                        f"p={p:g}: need privacy threshold {n // 2} < U; "
                        f"give fixed:<k> or a larger N",
                    )
    else:
        _fixed_quorum(spec)


def _fixed_quorum(spec: SweepSpec):
    """None for the auto policy, else a constant quorum checked per cell."""
    if spec.quorum == "auto":
        return None
    if not spec.quorum.startswith("fixed:"):
        raise ConfigError("U", f"expected 'auto' or 'fixed:<k>', got {spec.quorum!r}")
    try:
        quorum = int(spec.quorum.split(":", 1)[1])
    except ValueError:
        raise ConfigError("U", f"expected 'auto' or 'fixed:<k>', got {spec.quorum!r}")
    for n in spec.sizes:
        for p in spec.rates:
            threshold = n // 2
            if not threshold < quorum <= n:
                raise ConfigError(
                    "U",
                    f"fixed quorum {quorum} is infeasible at cell N={n}, "
                    f"p={p:g}: need privacy threshold {threshold} < U <= {n}",
                )
    return lambda n, rate: quorum


def _resolve(flag_value, env_name: str, spec_value, default):
    if flag_value:
        return flag_value
    env_value = os.environ.get(env_name)
    if env_value:
        return env_value
    if spec_value:
        return spec_value
    return default


def cmd_run(args) -> int:
    spec = parse_spec_file(args.spec)
    seed = _resolve(args.seed, "AGGLAB_SEED", spec.seed, "agglab")
    out_dir = Path(_resolve(args.out, "AGGLAB_OUT", spec.out, "agglab-out"))
    transport_factory = (
        InProcessTransport
        if spec.transport == "inprocess"
        else lambda: TcpLoopbackTransport(timeout=30.0)
    )
    results = sweep(
        protocols=spec.protocols,
        sizes=spec.sizes,
        rates=spec.rates,
        model_len=spec.model_len,
        seed=seed,
        modulus=spec.modulus,
        transport_factory=transport_factory,
        training_delay_ms=spec.training_delay_ms,
        pipelines=spec.pipelines,
        repeats=spec.repeats,
        quorum_for=_fixed_quorum(spec),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "costs.csv"
    write_cost_csv(csv_path, [r.report for r in results])
    flagged = 0
    for result in results:
        meta = result.report.metadata
        label = (
            f"{result.protocol} n={meta['n']} p={meta['p']:g} "
            f"{meta['pipeline']} rep={meta['repeat']}"
        )
        if result.ok:
            print(f"{label}: ok ({meta['survivor_count']} survivors)")
        else:
            flagged += 1
            print(f"{label}: FAILED {result.failure}")
    if args.save_transcripts:
        bundles = out_dir / "transcripts"
        bundles.mkdir(exist_ok=True)
        for result in results:
            meta = result.report.metadata
            name = (
                f"{result.protocol}_n{meta['n']}_p{meta['p']:g}_"
                f"{meta['pipeline']}_rep{meta['repeat']}.bundle"
            )
            save_round_bundle(result, bundles / name)
        print(f"wrote {len(results)} transcript bundles to {bundles}")
    rows = sum(len(r.report.rows) for r in results)
    print(f"wrote {rows} rows to {csv_path}")
    if flagged:
        print(f"flagged {flagged} cell(s) with recovery failures")
    return 0


def cmd_report(args) -> int:
    default_dir = str(Path(args.csv[0]).parent)
    out_dir = _resolve(args.out, "AGGLAB_OUT", None, default_dir)
    rendered = render_report(args.csv, out_dir, figures=not args.no_figures)
    print(rendered["table"])
    print()
    print(rendered["note"])
    for path in rendered["paths"]:
        print(f"wrote {path}")
    return 0


def cmd_verify(args) -> int:
    report = verify_bundle(args.transcript)
    print(report.summary())
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agglab",
        description="Secure-aggregation benchmark laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the sweep described by a spec file")
    run.add_argument("--spec", required=True, help="path to the spec file")
    run.add_argument("--out", help="output directory (overrides AGGLAB_OUT)")
    run.add_argument("--seed", help="master seed (overrides AGGLAB_SEED)")
    run.add_argument(
        "--save-transcripts", action="store_true",
        help="also write one verifiable transcript bundle per cell",
    )
    run.set_defaults(func=cmd_run)

    report = sub.add_parser("report", help="summarize cost CSVs")
    report.add_argument(
        "--csv", required=True, nargs="+", help="cost CSV files to fold"
    )
    report.add_argument(
        "--out", help="directory for plot data and figures "
        "(default: next to the first CSV)",
    )
    report.add_argument(
        "--no-figures", action="store_true",
        help="write plot data only, skip figure rendering",
    )
    report.set_defaults(func=cmd_report)

    verify = sub.add_parser("verify", help="replay and audit a round bundle")
    verify.add_argument(
        "--transcript", required=True, help="path to a saved round bundle"
    )
    verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AgglabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
