import json
import math
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilevel_pd.cli import (EXIT_CHECK, EXIT_CONFIG, EXIT_OK, TRAJECTORY_COLUMNS,
                            check_problem, main, read_trajectory, write_trajectory)
from bilevel_pd.problems import make_toy1

TOY1_FLAGS = ["--problem", "toy1", "--T", "1000", "--N", "5", "--dual-step", "0.1",
              "--primal-step", "0.2", "--theta", "0", "--lambda0", "2", "--x0", "2",
              "--y0", "0.5,0.5"]


def without_time(path):
    rows = read_trajectory(path)
    return [{k: v for k, v in r.items() if k != "wall_time_s"} for r in rows]


def same_rows(a, b):
    # NaN-aware equality of parsed rows
    if len(a) != len(b):
        return False
    for ra, rb in zip(a, b):
        for k in ra:
            x, y = ra[k], rb[k]
            if not (x == y or (isinstance(x, float) and math.isnan(x) and math.isnan(y))):
                return False
    return True


def test_run_toy1_pdbo(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--method", "pdbo", *TOY1_FLAGS, "--out", str(out)]) == EXIT_OK
    rows = read_trajectory(out / "trajectory.csv")
    assert len(rows) == 1000 and rows[-1]["t"] == 999
    assert rows[-1]["dist_x"] <= 1e-2
    summary = json.loads((out / "summary.json").read_text())
    assert summary["method"] == "pdbo" and summary["grad_calls"]["total"] == 1000 * 8
    assert "pdbo seed=0" in capsys.readouterr().out


def test_run_aid_fp_stalls(tmp_path):
    out = tmp_path / "aid"
    assert main(["run", "--method", "aid-fp", *TOY1_FLAGS, "--out", str(out)]) == EXIT_OK
    assert read_trajectory(out / "trajectory.csv")[-1]["dist_y"] > 0.1


@pytest.mark.parametrize("argv", [
    ["run", "--problem", "toy1"],
    ["run", "--method", "pdbo"],
    ["run", "--problem", "toy1", "--method", "newton"],
    ["run", "--problem", "toy1", "--method", "pdbo", "--T", "0"],
    ["run", "--problem", "toy1", "--method", "pdbo", "--x0", "1,2"],
    ["run", "--problem", "nope", "--method", "pdbo"],
    ["run", "--problem", "toy1", "--method", "pdbo", "--alpha", "0"],
    ["run", "--problem", "toy1", "--method", "pdbo", "--bogus"],
])
def test_config_errors_write_nothing(tmp_path, argv, capsys):
    out = tmp_path / "o"
    assert main([*argv, "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()


def test_json_manifest_and_flag_override(tmp_path):
    cfg = tmp_path / "m.json"
    cfg.write_text(json.dumps({"problem": "toy1", "method": "itd-r", "T": 7, "seeds": [3]}))
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg), "--T", "5", "--out", str(out)]) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["outer_steps"] == 5 and summary["seed"] == 3
    cfg.write_text(json.dumps({"problem": "toy1", "method": "itd-r", "speed": 1}))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "p")]) == EXIT_CONFIG
    cfg.write_text("[1, 2]")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "p")]) == EXIT_CONFIG


def test_repeated_runs_are_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    flags = ["run", "--method", "proximal-pdbo", "--problem", "toy1", "--K", "3",
             "--T-sub", "20", "--seed", "4"]
    assert main([*flags, "--out", str(a)]) == EXIT_OK
    assert main([*flags, "--out", str(b)]) == EXIT_OK
    assert same_rows(without_time(a / "trajectory.csv"), without_time(b / "trajectory.csv"))
    sa = json.loads((a / "summary.json").read_text())
    sb = json.loads((b / "summary.json").read_text())
    sa["config"].pop("out"), sb["config"].pop("out")
    assert sa == sb and 1 <= sa["k_hat"] <= 3


def test_csv_format(tmp_path):
    out = tmp_path / "o"
    main(["run", "--method", "pdbo", "--problem", "toy1", "--T", "3", "--out", str(out)])
    raw = (out / "trajectory.csv").read_bytes()
    assert b"\r" not in raw
    assert raw.decode().splitlines()[0] == ",".join(TRAJECTORY_COLUMNS)


finite = st.floats(allow_nan=False, allow_infinity=False)


@given(rows=st.lists(st.fixed_dictionaries({
    **{c: finite | st.just(math.nan) for c in TRAJECTORY_COLUMNS},
    "t": st.integers(0, 10 ** 9), "grad_calls": st.integers(0, 10 ** 12)}), max_size=5))
@settings(max_examples=40)
def test_trajectory_round_trip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("rt") / "t.csv"
    write_trajectory(path, rows)
    assert same_rows(read_trajectory(path), rows)


def test_read_trajectory_rejects_foreign_header(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_trajectory(p)


def test_compare_layout_and_table(tmp_path, capsys):
    out = tmp_path / "cmp"
    code = main(["compare", "--problem", "toy1", "--methods", "pdbo,itd-r,bigsam-itd",
                 "--T", "100", "--out", str(out)])
    assert code == EXIT_OK
    for method in ("pdbo", "itd-r", "bigsam-itd"):
        assert (out / method / "seed-0" / "trajectory.csv").exists()
    table = (out / "summary.md").read_text()
    assert table.count("\n") == 5 and table == capsys.readouterr().out
    budget = 100 * 8
    for method in ("itd-r", "bigsam-itd"):
        s = json.loads((out / method / "seed-0" / "summary.json").read_text())
        assert s["grad_calls"]["total"] <= budget
    lines = (out / "compare.csv").read_text().splitlines()
    assert lines[0].startswith("method,seed,t,")


def test_single_method_compare_matches_run(tmp_path, capsys):
    flags = ["--problem", "toy1", "--T", "50"]
    assert main(["run", "--method", "pdbo", *flags, "--out", str(tmp_path / "r")]) == EXIT_OK
    assert main(["compare", "--methods", "pdbo", *flags, "--out", str(tmp_path / "c")]) == EXIT_OK
    assert same_rows(without_time(tmp_path / "r" / "trajectory.csv"),
                     without_time(tmp_path / "c" / "pdbo" / "seed-0" / "trajectory.csv"))
    assert (tmp_path / "c" / "summary.md").exists()


def test_parallel_jobs_match_sequential(tmp_path):
    flags = ["compare", "--problem", "toy1", "--methods", "pdbo,aid-fp", "--T", "40",
             "--seed", "0", "--seed", "1"]
    assert main([*flags, "--out", str(tmp_path / "s")]) == EXIT_OK
    assert main([*flags, "--jobs", "2", "--out", str(tmp_path / "p")]) == EXIT_OK
    for method in ("pdbo", "aid-fp"):
        for seed in (0, 1):
            rel = Path(method) / f"seed-{seed}" / "trajectory.csv"
            assert same_rows(without_time(tmp_path / "s" / rel), without_time(tmp_path / "p" / rel))


def test_multi_seed_run_layout(tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--problem", "toy1", "--method", "pdbo", "--T", "2",
                 "--seed", "1", "--seed", "2", "--out", str(out)]) == EXIT_OK
    assert (out / "seed-1" / "summary.json").exists() and (out / "seed-2" / "summary.json").exists()


def test_csv_problem_argument(tmp_path):
    from bilevel_pd.problems import bundled_paths
    tr, va = bundled_paths()
    out = tmp_path / "o"
    assert main(["run", "--problem", f"csv:{tr},{va}", "--method", "itd-r", "--T", "2",
                 "--out", str(out)]) == EXIT_OK
    assert "val_accuracy" in json.loads((out / "summary.json").read_text())["final"]
    assert main(["run", "--problem", f"csv:{tr}", "--method", "itd-r",
                 "--out", str(tmp_path / "q")]) == EXIT_CONFIG


# -- check -------------------------------------------------------------------------------

def test_check_toy1_passes(capsys):
    assert main(["check", "toy1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and "grad_g" in out


def test_check_toy2_skips_inner_convexity(capsys):
    assert main(["check", "toy2"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "SKIPPED(nonconvex-flag)" in out
    assert all("PASS" in line for line in out.splitlines() if line.startswith("grad_"))


def test_check_reports_corrupted_gradient(capsys):
    toy1 = make_toy1()

    def wrong(x, y):
        gx, gy = toy1.f_grad(x, y)
        return gx * 1.01, gy

    assert check_problem(replace(toy1, f_grad=wrong)) == EXIT_CHECK
    assert "FAILED: grad_f" in capsys.readouterr().out


def test_check_unknown_problem():
    assert main(["check", "toy9"]) == EXIT_CONFIG


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "bilevel_pd", "--version"],
                          capture_output=True, text=True)
    assert done.returncode == 0 and "0.1.0" in done.stdout
