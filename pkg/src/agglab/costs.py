"""Cost counters: per-party, per-phase tallies and the round cost report.

Counting convention: ``field_ops`` counts field elements processed by each
protocol primitive, one per element touched per primitive application.
That is the unit the protocols' complexity claims are stated in (a PRG
mask stream of length d applied into an aggregate costs d; a decode that
produces d elements costs d).  The multiply-accumulate detail of the
quadratic Lagrange decoder is recorded separately under the ``extras``
keys ``decode_madds`` / ``encode_madds`` so the gap between the
implemented decoder and a fast O(U log U) one stays visible.

CSV rows follow a pinned column order so downstream tooling can rely on
it: protocol, n, p, u, pipeline, party, phase, field_ops, prg_elems,
bytes_out, bytes_in, wall_ms.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping

PHASE_OFFLINE = "Offline"
PHASE_TRAINING = "Training"
PHASE_UPLOAD = "Upload"
PHASE_RECOVERY = "Recovery"
PHASES = (PHASE_OFFLINE, PHASE_TRAINING, PHASE_UPLOAD, PHASE_RECOVERY)

CSV_COLUMNS = (
    "protocol",
    "n",
    "p",
    "u",
    "pipeline",
    "party",
    "phase",
    "field_ops",
    "prg_elems",
    "bytes_out",
    "bytes_in",
    "wall_ms",
)

SERVER_PARTY = "server"


def user_party(user_id: int) -> str:
    return f"user:{user_id}"


@dataclass
class PhaseTally:
    field_ops: int = 0
    prg_elements: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    wall_ms: float = 0.0


class CostMeter:
    """Mutable accumulator owned by one party for the duration of a round."""

    __slots__ = ("party", "phases", "extras")

    def __init__(self, party: str):
        self.party = party
        self.phases: dict[str, PhaseTally] = {p: PhaseTally() for p in PHASES}
        self.extras: dict[str, int] = {}

    def tally(self, phase: str) -> PhaseTally:
        return self.phases[phase]

    def add_field_ops(self, phase: str, count: int) -> None:
        self.phases[phase].field_ops += int(count)

    def add_prg_elements(self, phase: str, count: int) -> None:
        self.phases[phase].prg_elements += int(count)

    def add_bytes_sent(self, phase: str, count: int) -> None:
        self.phases[phase].bytes_sent += int(count)

    def add_bytes_received(self, phase: str, count: int) -> None:
        self.phases[phase].bytes_received += int(count)

    def add_wall_ms(self, phase: str, ms: float) -> None:
        self.phases[phase].wall_ms += float(ms)

    def bump(self, key: str, count: int = 1) -> None:
        self.extras[key] = self.extras.get(key, 0) + int(count)


@dataclass
class CostReport:
    """Counters for one simulated round plus free-form metadata.

    ``metadata`` always carries the cell coordinates (protocol, n, p, u,
    pipeline) used to prefix CSV rows; everything else in it is
    informational (decoder gap notes, storage accounting, timeline).
    """

    metadata: dict
    rows: list = field(default_factory=list)

    @classmethod
    def from_meters(
        cls, metadata: Mapping, meters: Iterable[CostMeter]
    ) -> "CostReport":
        meta = dict(metadata)
        rows = []
        extras: dict[str, int] = {}
        for meter in meters:
            for phase in PHASES:
                t = meter.phases[phase]
                rows.append(
                    {
                        "protocol": meta["protocol"],
                        "n": meta["n"],
                        "p": meta["p"],
                        "u": meta["u"],
                        "pipeline": meta["pipeline"],
                        "party": meter.party,
                        "phase": phase,
                        "field_ops": t.field_ops,
                        "prg_elems": t.prg_elements,
                        "bytes_out": t.bytes_sent,
                        "bytes_in": t.bytes_received,
                        "wall_ms": round(t.wall_ms, 3),
                    }
                )
            for key, val in meter.extras.items():
                extras[key] = extras.get(key, 0) + val
        if extras:
            meta.setdefault("counter_extras", {}).update(extras)
        return cls(metadata=meta, rows=rows)

    def row(self, party: str, phase: str) -> dict:
        for r in self.rows:
            if r["party"] == party and r["phase"] == phase:
                return r
        raise KeyError((party, phase))

    def phase_total(self, phase: str, column: str, party_prefix: str = "") -> int:
        """Sum one counter over all parties whose label has the prefix."""
        return sum(
            r[column]
            for r in self.rows
            if r["phase"] == phase and r["party"].startswith(party_prefix)
        )


def write_cost_csv(path, reports: Iterable[CostReport], append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        if not append:
            writer.writeheader()
        for report in reports:
            for row in report.rows:
                writer.writerow(row)


def read_cost_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for col in ("n", "field_ops", "prg_elems", "bytes_out", "bytes_in"):
            row[col] = int(row[col])
        for col in ("p", "wall_ms"):
            row[col] = float(row[col])
        row["u"] = int(row["u"])
    return rows
