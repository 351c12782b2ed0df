"""Comparison tables, plot-ready series and figures from cost CSV files.

The input is one or more CSV files in the pinned cost layout (see
``agglab.costs``).  Rows are folded per sweep cell (n, p, protocol):
rounds in a cell are counted from its server Recovery rows, so repeats
and pipeline variants average cleanly.  The headline comparison metric
is the server-side Recovery field-operation count; wall-clock columns
are carried along but treated as indicative only (see
``WALL_CLOCK_SUBSTITUTION_NOTE``).
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import pandas as pd

from .costs import CSV_COLUMNS, PHASE_RECOVERY, PHASES, SERVER_PARTY
from .errors import SchemaError
from .harness import PROTOCOL_LIGHTSECAGG, PROTOCOLS

WALL_CLOCK_SUBSTITUTION_NOTE = """\
Note on wall-clock columns: wall_ms values come from a single-process
simulation on whatever machine produced the CSV, so absolute times and
time-based speedup multipliers are not reproducible claims and are shown
for orientation only.  Cross-protocol comparisons here rest on the
deterministic counters instead: the trailing ratio column divides each
protocol's server Recovery field-operation count by the reference
protocol's, and the plot-data files carry the same counter series.
Re-run the sweep on the target hardware if deployment-specific
wall-clock numbers are needed."""

PLOT_DATA_FILES = (
    "plotdata_recovery_ops.csv",
    "plotdata_round_wall.csv",
    "plotdata_phase_wall.csv",
)

FIGURE_FILES = (
    "recovery_ops_vs_n.png",
    "round_time_vs_n.png",
    "phase_breakdown.png",
)

_SUMMARY_COLUMNS = (
    "n",
    "p",
    "protocol",
    "rounds",
    "recovery_ops",
    "wall_ms",
    "vs_reference",
    "reference",
)


def _protocol_rank(name: str) -> tuple:
    try:
        return (PROTOCOLS.index(name), name)
    except ValueError:
        return (len(PROTOCOLS), name)


def load_cost_rows(paths: Iterable) -> pd.DataFrame:
    """Read and validate cost CSVs, returning one concatenated frame."""
    frames = []
    for path in paths:
        try:
            frame = pd.read_csv(path)
        except pd.errors.EmptyDataError:
            raise SchemaError(f"{path}: file holds no CSV header")
        missing = [col for col in CSV_COLUMNS if col not in frame.columns]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        for col in ("n", "u", "field_ops", "prg_elems", "bytes_out",
                    "bytes_in", "p", "wall_ms"):
            values = pd.to_numeric(frame[col], errors="coerce")
            if values.isna().any():
                bad = int(values.isna().idxmax()) + 2
                raise SchemaError(
                    f"{path}: column {col!r} holds a non-numeric value "
                    f"near line {bad}"
                )
            frame[col] = values
        frames.append(frame[list(CSV_COLUMNS)])
    if not frames:
        raise SchemaError("no CSV paths given")
    return pd.concat(frames, ignore_index=True)


def reference_protocol(frame: pd.DataFrame) -> str:
    """The ratio baseline: one-shot recovery if present, else first seen."""
    seen = list(dict.fromkeys(frame["protocol"]))
    if PROTOCOL_LIGHTSECAGG in seen:
        return PROTOCOL_LIGHTSECAGG
    return seen[0]


def cell_summary(frame: pd.DataFrame) -> pd.DataFrame:
    """One row per (n, p, protocol): per-round means and reference ratios."""
    if frame.empty:
        return pd.DataFrame(columns=_SUMMARY_COLUMNS)
    ref = reference_protocol(frame)
    server_rec = frame[
        (frame["party"] == SERVER_PARTY) & (frame["phase"] == PHASE_RECOVERY)
    ]
    records = []
    for (n, p), cell in frame.groupby(["n", "p"], sort=True):
        stats = {}
        for protocol, rows in cell.groupby("protocol"):
            rec = server_rec[
                (server_rec["n"] == n)
                & (server_rec["p"] == p)
                & (server_rec["protocol"] == protocol)
            ]
            if rec.empty:
                raise SchemaError(
                    f"no server Recovery row for protocol {protocol!r} "
                    f"at n={n}, p={p}; cannot count rounds"
                )
            rounds = len(rec)
            stats[protocol] = (
                rounds,
                float(rec["field_ops"].mean()),
                float(rows["wall_ms"].sum()) / rounds,
            )
        ref_ops = stats[ref][1] if ref in stats else 0.0
        for protocol in sorted(stats, key=_protocol_rank):
            rounds, ops, wall = stats[protocol]
            records.append(
                {
                    "n": int(n),
                    "p": float(p),
                    "protocol": protocol,
                    "rounds": rounds,
                    "recovery_ops": ops,
                    "wall_ms": wall,
                    "vs_reference": ops / ref_ops if ref_ops else float("nan"),
                    "reference": ref,
                }
            )
    return pd.DataFrame.from_records(records, columns=_SUMMARY_COLUMNS)


def phase_summary(frame: pd.DataFrame) -> pd.DataFrame:
    """Per-round wall time summed over parties, per cell and phase."""
    summary = cell_summary(frame)
    rounds = {
        (row.n, row.p, row.protocol): row.rounds
        for row in summary.itertuples()
    }
    records = []
    groups = frame.groupby(["n", "p", "protocol", "phase"], sort=False)
    for (n, p, protocol, phase), rows in groups:
        key = (int(n), float(p), protocol)
        records.append(
            {
                "n": key[0],
                "p": key[1],
                "protocol": protocol,
                "phase": phase,
                "value": float(rows["wall_ms"].sum()) / rounds[key],
            }
        )
    records.sort(
        key=lambda r: (
            r["n"], r["p"], _protocol_rank(r["protocol"]),
            PHASES.index(r["phase"]),
        )
    )
    return pd.DataFrame.from_records(
        records, columns=("n", "p", "protocol", "phase", "value")
    )


def comparison_table(frame: pd.DataFrame) -> str:
    """Fixed-width text table, one row per (n, p, protocol)."""
    summary = cell_summary(frame)
    if summary.empty:
        return "no cost rows loaded"
    ref = summary["reference"].iloc[0]
    head = (
        f"{'n':>5}  {'p':>5}  {'protocol':<12}  {'rounds':>6}  "
        f"{'recovery_ops':>13}  {'wall_ms':>12}  {'vs ' + ref:>15}"
    )
    lines = [head, "-" * len(head)]
    for row in summary.itertuples():
        if pd.isna(row.vs_reference):
            ratio = "n/a"
        else:
            ratio = f"{row.vs_reference:.2f}×"
        lines.append(
            f"{row.n:>5d}  {row.p:>5.2f}  {row.protocol:<12}  "
            f"{row.rounds:>6d}  {row.recovery_ops:>13,.0f}  "
            f"{row.wall_ms:>12.3f}  {ratio:>15}"
        )
    return "\n".join(lines)


def write_plot_data(frame: pd.DataFrame, out_dir) -> list[Path]:
    """Tidy (x=n, y=value) series per protocol and rate, one file a metric."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = cell_summary(frame)
    recovery = summary[["n", "p", "protocol", "recovery_ops"]].rename(
        columns={"recovery_ops": "value"}
    )
    wall = summary[["n", "p", "protocol", "wall_ms"]].rename(
        columns={"wall_ms": "value"}
    )
    tables = dict(
        zip(PLOT_DATA_FILES, (recovery, wall, phase_summary(frame)))
    )
    paths = []
    for name, table in tables.items():
        path = out / name
        table.to_csv(path, index=False)
        paths.append(path)
    return paths


def render_figures(frame: pd.DataFrame, out_dir) -> list[Path]:
    """Render the three comparison figures next to the plot data."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    summary = cell_summary(frame)
    if summary.empty:
        return []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    line_specs = (
        (FIGURE_FILES[0], "recovery_ops", "server Recovery field ops", True),
        (FIGURE_FILES[1], "wall_ms", "summed wall per round (ms)", False),
    )
    for name, column, ylabel, loglog in line_specs:
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for (protocol, p), series in summary.groupby(["protocol", "p"]):
            series = series.sort_values("n")
            ax.plot(
                series["n"], series[column],
                marker="o", label=f"{protocol} (p={p:g})",
            )
        if loglog:
            ax.set_xscale("log")
            ax.set_yscale("log")
        ax.set_xlabel("users")
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out / name
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    phases = phase_summary(frame)
    n_pick = int(phases["n"].max())
    p_pick = float(phases[phases["n"] == n_pick]["p"].max())
    cell = phases[(phases["n"] == n_pick) & (phases["p"] == p_pick)]
    protocols = sorted(cell["protocol"].unique(), key=_protocol_rank)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    bottoms = [0.0] * len(protocols)
    for phase in PHASES:
        heights = []
        for protocol in protocols:
            sel = cell[
                (cell["protocol"] == protocol) & (cell["phase"] == phase)
            ]
            heights.append(float(sel["value"].iloc[0]) if len(sel) else 0.0)
        ax.bar(protocols, heights, bottom=bottoms, label=phase)
        bottoms = [b + h for b, h in zip(bottoms, heights)]
    ax.set_ylabel("summed wall per round (ms)")
    ax.set_title(f"phase breakdown at n={n_pick}, p={p_pick:g}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out / FIGURE_FILES[2]
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)
    return paths


def render_report(
    csv_paths: Sequence, out_dir=None, figures: bool = True
) -> dict:
    """Load CSVs, format the table, optionally write series and figures."""
    frame = load_cost_rows(csv_paths)
    written: list[Path] = []
    if out_dir is not None:
        written.extend(write_plot_data(frame, out_dir))
        if figures:
            written.extend(render_figures(frame, out_dir))
    return {
        "table": comparison_table(frame),
        "note": WALL_CLOCK_SUBSTITUTION_NOTE,
        "paths": written,
    }
