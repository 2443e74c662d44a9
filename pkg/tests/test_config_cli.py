import csv
import json
import os
import subprocess
import sys
import textwrap

import pytest

from repfed import cli
from repfed.config import RunConfig, parse_config, parse_config_text
from repfed.errors import ConfigurationError
from repfed.experiments import (
    client_modalities,
    execute,
    expected_comm_bytes,
    run_ablation,
    run_comm_sweep,
    run_experiment,
    seeded,
)
from repfed.metrics import read_log

from conftest import tiny_config

PROTOCOL_35 = """
[clients]
n_mm = 15
n_img = 10
n_txt = 10
dirichlet_alpha = 0.1

[run]
participation_fraction = 0.2857142857142857
"""


def tiny_ini(**overrides):
    """The tiny test federation written out as an INI file."""
    cfg = tiny_config(**overrides)
    d = cfg.to_dict()
    world = {k: v for k, v in d["world"].items() if k != "sizes"}
    world.update(d["world"]["sizes"])
    lines = []
    for section, values in (("world", world), ("clients", d["clients"]), ("server", d["server"]),
                            ("run", d["run"]), ("output", d["output"])):
        lines.append(f"[{section}]")
        for k, v in values.items():
            if isinstance(v, (tuple, list)):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def test_empty_config_is_all_defaults(tmp_path):
    path = tmp_path / "empty.ini"
    path.write_text("")
    assert parse_config(path) == RunConfig()


def test_zero_participation_names_the_field():
    with pytest.raises(ConfigurationError, match="participation_fraction"):
        parse_config_text("[run]\nparticipation_fraction = 0\n")


def test_35_client_protocol_parses_and_echoes(tmp_path, out_dir):
    cfg = parse_config_text(PROTOCOL_35)
    assert (cfg.clients.n_mm, cfg.clients.n_img, cfg.clients.n_txt) == (15, 10, 10)
    assert cfg.clients.dirichlet_alpha == 0.1
    from repfed.federation import select_clients
    assert len(select_clients(range(cfg.clients.total), cfg.run.participation_fraction, 0, 0)) == 10
    small = cfg.with_updates(run={"rounds": 0})
    execute(small, out_dir / "echo.jsonl")
    header, records = read_log(out_dir / "echo.jsonl")
    assert records == []
    assert header["config"]["clients"]["n_mm"] == 15 and header["config"]["clients"]["dirichlet_alpha"] == 0.1
    assert header["config"]["run"]["participation_fraction"] == cfg.run.participation_fraction


def test_unknown_keys_and_sections_rejected():
    with pytest.raises(ConfigurationError, match="learning_rate"):
        parse_config_text("[run]\nlearning_rate = 1\n")
    with pytest.raises(ConfigurationError, match="extras"):
        parse_config_text("[extras]\nx = 1\n")


def test_parse_error_reports_line():
    with pytest.raises(ConfigurationError, match="line"):
        parse_config_text("[run]\nrounds = 3\nthis line has no separator\n")
    with pytest.raises(ConfigurationError, match="rounds"):
        parse_config_text("[run]\nrounds = many\n")


def test_list_values_and_world_keys():
    cfg = parse_config_text("[server]\nserver_hidden_dims = 12, 7\n[world]\nn_test = 50\nseed = 4\n")
    assert cfg.server.server_hidden_dims == (12, 7)
    assert cfg.world.sizes.n_test == 50 and cfg.world.seed == 4


def test_tiny_ini_round_trips():
    assert parse_config_text(tiny_ini()) == tiny_config()


def test_zero_rounds_summary_uses_initial_metrics(out_dir):
    lines = []
    row = run_experiment(tiny_config(run={"rounds": 0}), echo=lines.append)
    assert row["rounds"] == 0 and row["total_comm_bytes"] == 0
    assert row["final_drift"] is not None
    with open(out_dir / "runs" / "summary.csv") as fh:
        (got,) = list(csv.DictReader(fh))
    assert got["rounds"] == "0" and float(got["final_r1_sum"]) == row["final_r1_sum"]
    assert lines and lines[0].startswith("final_r1_sum=")


def test_logs_are_byte_identical(tmp_path):
    cfg = tiny_config(run={"rounds": 2})
    execute(cfg, tmp_path / "a.jsonl")
    execute(cfg, tmp_path / "b.jsonl", workers=3)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    header, records = read_log(tmp_path / "a.jsonl")
    assert len(records) == 2 and len(header["world_hash"]) == 64


def test_degenerate_ablation_matches_single_run(out_dir):
    base = tiny_config()
    rows, pivot = run_ablation(base, ["mean+inter"], [3])
    single = execute(seeded(base, 3).with_updates(run={"aggregator": "mean", "regularizer": "inter"}))
    assert len(rows) == 1 and len(pivot) == 1
    for key in ("final_r1_sum", "final_drift", "total_comm_bytes", "world_hash"):
        assert rows[0][key] == single[key]


def test_ablation_variants_share_world(out_dir):
    rows, _ = run_ablation(tiny_config(), ["mean+none", "gca+none"], [0, 1])
    by_seed = {}
    for r in rows:
        by_seed.setdefault(r["seed"], set()).add(r["world_hash"])
    assert all(len(h) == 1 for h in by_seed.values())
    assert by_seed[0] != by_seed[1]
    for r in rows:
        header, _ = read_log(out_dir / "runs" / f"run_{r['variant']}_s{r['seed']}.jsonl")
        assert header["world_hash"] == r["world_hash"]


def test_ablation_matrix_shape(out_dir):
    variants = ["mean+none", "sample_count+none", "iot_boost+none", "gca+none", "gca+both"]
    cfg = tiny_config(run={"rounds": 1})
    rows, pivot = run_ablation(cfg, variants, [0, 1, 2])
    assert len(rows) == 15 and len(pivot) == 5
    with open(out_dir / "runs" / "summary.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 15
    with open(out_dir / "runs" / "summary_pivot.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 5


def test_ablation_records_failures_and_continues(out_dir):
    rows, pivot = run_ablation(tiny_config(run={"rounds": 1}), ["mean+none", "median+none"], [0])
    assert rows[0]["error"] == "" and "ConfigurationError" in rows[1]["error"]


def test_sweep_single_values_give_twin_rows(out_dir):
    rows = run_comm_sweep(tiny_config(), [16], [4], [0])
    assert [r["axis"] for r in rows] == ["num", "dim"]
    # the value column holds 16 rows on one axis and d = 4 on the other; both describe the same run
    strip = [{k: v for k, v in r.items() if k not in ("axis", "value")} for r in rows]
    assert strip[0] == strip[1]


def test_sweep_records_invalid_values(out_dir):
    rows = run_comm_sweep(tiny_config(run={"rounds": 1}), [8, 500], [4], [0])
    assert [bool(r["error"]) for r in rows] == [False, True, False]
    assert "public_subset" in rows[1]["error"]


def test_sweep_bytes_match_closed_form_and_scale(out_dir):
    base = tiny_config(run={"rounds": 2})
    rows = run_comm_sweep(base, [8, 16], [2, 4, 8], [0])
    clients = client_modalities(base)
    for r in rows:
        key = {"num": "public_subset"}.get(r["axis"])
        cfg = seeded(base, r["seed"])
        cfg = cfg.with_updates(run={key: r["value"]}) if key else cfg.with_updates(server={"rep_dim": r["value"]})
        _, records = read_log(out_dir / "runs" / f"run_sweep_{r['axis']}{r['value']}_s{r['seed']}.jsonl")
        assert r["total_comm_bytes"] == expected_comm_bytes(cfg, records, clients)
    num = [r["total_comm_bytes"] for r in rows if r["axis"] == "num"]
    dim = [r["total_comm_bytes"] for r in rows if r["axis"] == "dim"]
    assert num[1] == 2 * num[0]
    assert dim[1] == 2 * dim[0] and dim[2] == 2 * dim[1]


def test_cli_gradcheck(capsys):
    assert cli.main(["gradcheck", "--seeds", "0"]) == 0
    out = capsys.readouterr().out
    assert "inter" in out and "kernel backend" in out


def test_cli_run_and_errors(tmp_path, out_dir, capsys):
    path = tmp_path / "tiny.ini"
    path.write_text(tiny_ini())
    assert cli.main(["run", str(path)]) == 0
    assert "final_r1_sum=" in capsys.readouterr().out
    assert (out_dir / "runs" / "run.jsonl").exists()
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nparticipation_fraction = 0\n")
    assert cli.main(["run", str(bad)]) == 2
    assert "participation_fraction" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "absent.ini")]) == 2


def test_cli_ablate_and_sweep(tmp_path, out_dir, capsys):
    path = tmp_path / "tiny.ini"
    path.write_text(tiny_ini(run={"rounds": 1}))
    assert cli.main(["ablate", str(path), "--variants", "gca+both,mean", "--seeds", "0"]) == 0
    out = capsys.readouterr().out
    assert "gca+both" in out and "mean+none" in out
    assert cli.main(["sweep", str(path), "--batches", "8", "--dims", "4"]) == 0
    out = capsys.readouterr().out
    assert "num=8" in out and "dim=4" in out
    with open(out_dir / "runs" / "sweep.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2


def test_console_script_entry(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(tiny_ini(run={"rounds": 1}))
    env = {**os.environ, "REPFED_OUTPUT_DIR": str(tmp_path / "out")}
    proc = subprocess.run([sys.executable, "-m", "repfed.cli", "run", str(path)], capture_output=True,
                          text=True, env=env, timeout=120)
    assert proc.returncode == 0, proc.stderr
    header, records = read_log(tmp_path / "out" / "runs" / "run.jsonl")
    assert len(records) == 1 and header["variant"] == "gca+both"
    json.dumps(header)


def test_pure_python_backend_matches(tmp_path):
    script = textwrap.dedent("""
        import sys
        from repfed import kernels
        from repfed.experiments import execute
        sys.path.insert(0, sys.argv[2])
        from conftest import tiny_config
        execute(tiny_config(), sys.argv[1])
        print(kernels.BACKEND)
    """)
    env = {**os.environ, "REPFED_PURE_PYTHON": "1"}
    tests_dir = os.path.dirname(__file__)
    proc = subprocess.run([sys.executable, "-c", script, str(tmp_path / "py.jsonl"), tests_dir],
                          capture_output=True, text=True, env=env, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip() == "python"
    execute(tiny_config(), tmp_path / "native.jsonl")
    _, py_records = read_log(tmp_path / "py.jsonl")
    _, native_records = read_log(tmp_path / "native.jsonl")
    for a, b in zip(py_records, native_records):
        assert a.selected == b.selected and a.comm_up == b.comm_up
        assert abs(a.drift - b.drift) < 1e-9 and a.r1_sum == b.r1_sum
