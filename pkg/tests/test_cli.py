"""Command-line front end: spec parsing, run, report, verify."""

import json

import pytest

from agglab.cli import SweepSpec, main, parse_spec_text
from agglab.costs import read_cost_csv
from agglab.errors import ConfigError
from agglab.harness import (
    PIPELINE_NONOVERLAPPED,
    PIPELINE_OVERLAPPED,
    PROTOCOL_LIGHTSECAGG,
    PROTOCOL_SECAGG,
    PROTOCOLS,
)
from agglab.report import WALL_CLOCK_SUBSTITUTION_NOTE

SMALL_SPEC = """\
# tiny smoke sweep
protocols = LightSecAgg, SecAgg
N = 6
p = 0.25
d = 16
seed = cli-test
"""


def write_spec(tmp_path, text, name="spec.txt"):
    path = tmp_path / name
    path.write_text(text)
    return path


# ---- spec parsing ---------------------------------------------------------


def test_spec_parser_reads_every_key():
    spec = parse_spec_text(
        """
        protocols = SecAgg , LightSecAgg
        N = 8, 12   # two sizes
        p = 0.0, 0.25
        d = 32
        q = 257
        U = fixed:7
        training_delay_ms = 12.5
        pipelines = NonOverlapped, Overlapped
        repeats = 2
        seed = deep
        transport = tcp
        out = results
        """
    )
    assert spec.protocols == (PROTOCOL_SECAGG, PROTOCOL_LIGHTSECAGG)
    assert spec.sizes == (8, 12)
    assert spec.rates == (0.0, 0.25)
    assert spec.model_len == 32
    assert spec.modulus == 257
    assert spec.quorum == "fixed:7"
    assert spec.training_delay_ms == 12.5
    assert spec.pipelines == (PIPELINE_NONOVERLAPPED, PIPELINE_OVERLAPPED)
    assert spec.repeats == 2
    assert spec.seed == "deep"
    assert spec.transport == "tcp"
    assert spec.out == "results"


def test_spec_parser_defaults_match_dataclass():
    assert parse_spec_text("") == SweepSpec()
    assert parse_spec_text("# only comments\n\n") == SweepSpec()
    assert SweepSpec().protocols == PROTOCOLS


@pytest.mark.parametrize(
    "text,field",
    [
        ("colour = red", "colour"),
        ("N = twenty", "N"),
        ("p 0.3", "spec"),
        ("d = 8\nd = 9", "d"),
        ("protocols = TurboAgg", "protocols"),
        ("N = 1", "N"),
        ("p = 1.5", "p"),
        ("pipelines = Sideways", "pipelines"),
        ("repeats = 0", "repeats"),
        ("transport = pigeon", "transport"),
        ("U = sometimes", "U"),
    ],
)
def test_spec_parser_names_the_offending_key(text, field):
    with pytest.raises(ConfigError) as err:
        parse_spec_text(text)
    assert err.value.field == field


def test_fixed_quorum_errors_name_the_cell():
    with pytest.raises(ConfigError) as err:
        parse_spec_text("N = 12, 20\np = 0.3\nU = fixed:10")
    assert err.value.field == "U"
    assert "N=20" in str(err.value)
    assert "p=0.3" in str(err.value)
    parse_spec_text("N = 12\np = 0.3\nU = fixed:10")


def test_auto_quorum_collision_names_the_cell():
    with pytest.raises(ConfigError) as err:
        parse_spec_text("N = 6, 4\np = 0.0\nd = 8")
    assert err.value.field == "U"
    assert "N=4" in str(err.value)


# ---- run ------------------------------------------------------------------


def test_run_row_count_oracle(tmp_path, capsys):
    spec = write_spec(
        tmp_path,
        "protocols = LightSecAgg\nN = 20\np = 0.3\nd = 64\n"
        "pipelines = NonOverlapped, Overlapped\nseed = rowcount\n",
    )
    out = tmp_path / "out"
    assert main(["run", "--spec", str(spec), "--out", str(out)]) == 0
    rows = read_cost_csv(out / "costs.csv")
    # 2 cells (two pipeline modes), each (N + 1 parties) x 4 phases rows.
    assert len(rows) == 2 * (20 + 1) * 4
    printed = capsys.readouterr().out
    assert printed.count(": ok") == 2
    assert "168 rows" in printed


def test_run_is_deterministic_modulo_wall_clock(tmp_path):
    spec = write_spec(tmp_path, SMALL_SPEC)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["run", "--spec", str(spec), "--out", str(out)]) == 0
        rows = read_cost_csv(out / "costs.csv")
        outs.append(
            [{k: v for k, v in row.items() if k != "wall_ms"} for row in rows]
        )
    assert outs[0] == outs[1]


def test_run_flags_failed_cells_but_exits_zero(tmp_path, capsys):
    spec = write_spec(
        tmp_path,
        "protocols = LightSecAgg, SecAgg\nN = 6\np = 0.3\nd = 8\n"
        "U = fixed:6\nseed = doomed\n",
    )
    out = tmp_path / "out"
    assert main(["run", "--spec", str(spec), "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    # One victim leaves five survivors, short of the fixed quorum of six.
    assert "FAILED InsufficientSharesError" in printed
    assert "flagged 1 cell(s)" in printed
    assert (out / "costs.csv").exists()


def test_run_reports_spec_errors_with_exit_two(tmp_path, capsys):
    spec = write_spec(tmp_path, "N = nope\n")
    assert main(["run", "--spec", str(spec), "--out", str(tmp_path)]) == 2
    assert "error: N:" in capsys.readouterr().err


def bundle_seed(path):
    with open(path, "rb") as fh:
        return json.loads(fh.readline())["seed"]


def test_seed_resolution_flag_beats_env_beats_spec(tmp_path, monkeypatch):
    spec = write_spec(
        tmp_path,
        "protocols = LightSecAgg\nN = 6\np = 0.0\nd = 8\nseed = alpha\n",
    )
    name = "transcripts/LightSecAgg_n6_p0_NonOverlapped_rep0.bundle"
    seeds = {}
    for label, env, flags in (
        ("spec", None, []),
        ("env", "beta", []),
        ("flag", "beta", ["--seed", "alpha"]),
    ):
        if env is None:
            monkeypatch.delenv("AGGLAB_SEED", raising=False)
        else:
            monkeypatch.setenv("AGGLAB_SEED", env)
        out = tmp_path / label
        args = ["run", "--spec", str(spec), "--out", str(out),
                "--save-transcripts", *flags]
        assert main(args) == 0
        seeds[label] = bundle_seed(out / name)
    assert seeds["spec"] == seeds["flag"]
    assert seeds["spec"] != seeds["env"]


def test_out_dir_resolution_env_beats_spec(tmp_path, monkeypatch):
    spec_dir = tmp_path / "from-spec"
    spec = write_spec(
        tmp_path,
        "protocols = LightSecAgg\nN = 6\np = 0.0\nd = 8\n"
        f"out = {spec_dir}\n",
    )
    env_dir = tmp_path / "from-env"
    monkeypatch.setenv("AGGLAB_OUT", str(env_dir))
    assert main(["run", "--spec", str(spec)]) == 0
    assert (env_dir / "costs.csv").exists()
    assert not spec_dir.exists()
    monkeypatch.delenv("AGGLAB_OUT")
    assert main(["run", "--spec", str(spec)]) == 0
    assert (spec_dir / "costs.csv").exists()


# ---- report ---------------------------------------------------------------


def test_report_prints_table_and_substitution_note(tmp_path, capsys):
    spec = write_spec(tmp_path, SMALL_SPEC)
    out = tmp_path / "out"
    assert main(["run", "--spec", str(spec), "--out", str(out)]) == 0
    capsys.readouterr()
    csv_path = out / "costs.csv"
    assert main(["report", "--csv", str(csv_path)]) == 0
    printed = capsys.readouterr().out
    assert "vs LightSecAgg" in printed
    assert WALL_CLOCK_SUBSTITUTION_NOTE in printed
    # Default output directory is the CSV's own directory.
    assert (out / "plotdata_recovery_ops.csv").exists()
    assert (out / "recovery_ops_vs_n.png").exists()


def test_report_no_figures_writes_series_only(tmp_path, capsys):
    spec = write_spec(tmp_path, SMALL_SPEC)
    out = tmp_path / "out"
    assert main(["run", "--spec", str(spec), "--out", str(out)]) == 0
    dest = tmp_path / "series"
    code = main(
        ["report", "--csv", str(out / "costs.csv"), "--out", str(dest),
         "--no-figures"]
    )
    assert code == 0
    assert (dest / "plotdata_phase_wall.csv").exists()
    assert not (dest / "recovery_ops_vs_n.png").exists()


def test_report_rejects_malformed_csv_with_exit_two(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("protocol,n\nSecAgg,6\n")
    assert main(["report", "--csv", str(bad)]) == 2
    assert "missing columns" in capsys.readouterr().err
    assert main(["report", "--csv", str(tmp_path / "absent.csv")]) == 2


# ---- verify ---------------------------------------------------------------


def test_verify_round_trip_tamper_and_garbage(tmp_path, capsys):
    spec = write_spec(
        tmp_path,
        "protocols = SecAgg\nN = 6\np = 0.25\nd = 8\nseed = audit\n",
    )
    out = tmp_path / "out"
    args = ["run", "--spec", str(spec), "--out", str(out),
            "--save-transcripts"]
    assert main(args) == 0
    bundle = out / "transcripts" / "SecAgg_n6_p0.25_NonOverlapped_rep0.bundle"
    assert main(["verify", "--transcript", str(bundle)]) == 0
    assert "pass  transcript_replays" in capsys.readouterr().out

    data = bundle.read_bytes()
    bundle.write_bytes(data[:-1] + bytes([data[-1] ^ 1]))
    assert main(["verify", "--transcript", str(bundle)]) == 1
    assert "FAIL  transcript_replays" in capsys.readouterr().out

    bundle.write_bytes(b"scrambled\n")
    assert main(["verify", "--transcript", str(bundle)]) == 2
    assert "error:" in capsys.readouterr().err
