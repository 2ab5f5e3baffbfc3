import json
import subprocess
import sys

import numpy as np
import pytest

from wavestack.cli import main
from wavestack.config import build_config
from wavestack.runner import ExperimentError, aggregate, run, seed_result_or_raise


def report_without_timestamp(path):
    data = json.loads(path.read_text())
    data.pop("timestamp")
    return data


def fast_diversity(**kw):
    raw = {"kind": "fim-diversity", "fim.trials": "300", "fim.ranges_wl": "0,0.1,0.4"}
    raw.update(kw)
    return build_config(raw)


def test_rerun_gives_identical_report(tmp_path):
    cfg = fast_diversity(seeds="0,1")
    run(cfg, 1, tmp_path / "a")
    run(cfg, 1, tmp_path / "b")
    a = (tmp_path / "a" / "report.json").read_text().splitlines()
    b = (tmp_path / "b" / "report.json").read_text().splitlines()
    differ = [(x, y) for x, y in zip(a, b) if x != y]
    assert len(a) == len(b)
    assert all('"timestamp"' in x for x, _ in differ)


def test_parallelism_does_not_change_outputs(tmp_path):
    cfg = build_config({"kind": "papr", "seeds": "3,1,2", "papr.stream_counts": "1,2,4,8"})
    run(cfg, 1, tmp_path / "serial")
    run(cfg, 8, tmp_path / "parallel")
    assert report_without_timestamp(tmp_path / "serial" / "report.json") == \
        report_without_timestamp(tmp_path / "parallel" / "report.json")
    for name in ("trace.csv", "matrices/papr_curve_seed2.csv"):
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "parallel" / name).read_bytes()


def test_rigid_range_aggregates_to_zero():
    rec = run(fast_diversity(seeds="1,2,3", **{"fim.ranges_wl": "0"}))
    assert rec.aggregate["gain_db"] == {"mean": [0.0], "std": [0.0]}
    assert rec.seeds == [1, 2, 3]


def test_seeds_are_sorted_and_deduplicated():
    rec = run(fast_diversity(seeds="2,0,2"))
    assert rec.seeds == [0, 2] and list(rec.per_seed) == [0, 2]


def test_aggregate_statistics():
    agg = aggregate({0: {"x": 1.0, "v": [1, 2], "s": "text"}, 1: {"x": 3.0, "v": [3, 2], "s": "t"}})
    assert agg["x"] == {"mean": 2.0, "std": 1.0}
    assert agg["v"] == {"mean": [2.0, 2.0], "std": [1.0, 0.0]}
    assert "s" not in agg


def test_report_layout(tmp_path):
    rec = run(fast_diversity(seeds="0"), 1, tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["schema_version"] == 1 and data["kind"] == "fim-diversity"
    assert data["config_hash"] == fast_diversity(seeds="0").hash()
    for rel in data["artifacts"]:
        assert (tmp_path / rel).exists()
    M = np.loadtxt(tmp_path / "matrices" / "diversity_gain_seed0.csv", delimiter=",")
    assert M.shape == (3, 2) and M[0, 1] == 0.0
    assert rec.ok


def test_failures_are_reported_per_seed(tmp_path):
    rec = run(build_config({"kind": "semantic", "seeds": "0,1"}), 1, tmp_path)
    assert not rec.ok and sorted(rec.failures) == [0, 1]
    assert "semantic.images" in rec.failures[0]
    with pytest.raises(ExperimentError, match="seed 4"):
        seed_result_or_raise(build_config({"kind": "semantic"}), 4)


def test_cli_runs_experiment(tmp_path, capsys):
    cfg = tmp_path / "div.cfg"
    cfg.write_text("kind = fim-diversity\nfim.trials = 200\nfim.ranges_wl = 0, 0.2\n")
    code = main(["fim-diversity", "--config", str(cfg), "--seeds", "4,5", "--out", str(tmp_path / "o")])
    assert code == 0
    data = json.loads((tmp_path / "o" / "report.json").read_text())
    assert data["seeds"] == [4, 5]
    assert "config.effective.txt" in data["artifacts"]


def test_cli_nonzero_exit_on_seed_failure(tmp_path):
    assert main(["semantic", "--out", str(tmp_path)]) == 1


def test_cli_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("kind = doa\ngeometry.thickness_wl = -1\n")
    assert main(["doa", "--config", str(bad)]) == 2
    assert "geometry.thickness_wl" in capsys.readouterr().err
    assert main(["papr", "--config", str(bad)]) == 2
    assert main(["papr", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_cli_kind_mismatch(tmp_path, capsys):
    cfg = tmp_path / "p.cfg"
    cfg.write_text("kind = papr\n")
    assert main(["doa", "--config", str(cfg)]) == 2
    assert "does not match" in capsys.readouterr().err


def test_validate_config_echoes_effective_config(tmp_path, capsys):
    cfg = tmp_path / "m.cfg"
    cfg.write_text("kind = mimo-diag\n")
    assert main(["validate-config", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "geometry.grid_nx = 10" in out and "optimizer.max_iters = 1000" in out
    assert main(["validate-config", "--config", str(cfg), "--defaults"]) == 0
    assert "# " in capsys.readouterr().out


def test_invalid_seed_list_is_rejected():
    with pytest.raises(SystemExit):
        main(["papr", "--seeds", "1,x"])


def test_console_script_entry_point(tmp_path):
    cfg = tmp_path / "p.cfg"
    cfg.write_text("kind = papr\n")
    out = subprocess.run([sys.executable, "-m", "wavestack.cli", "validate-config",
                          "--config", str(cfg)], capture_output=True, text=True, check=True)
    assert out.stdout.startswith("# effective configuration for papr")
