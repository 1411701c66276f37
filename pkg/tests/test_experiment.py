import json

import pytest

from nudge_ns.main import main
from nudge_ns.services.config import parse_config, parse_config_text
from nudge_ns.services.errors import ConfigError
from nudge_ns.services.experiment import (
	MANIFEST_FILE, RESULTS_FILE, THREADS_ENV, mesh_info, prepare, reference_run, run_experiment, run_sweep,
	sweep_workers, variant_dir,
)
from nudge_ns.services.metrics import read_csv
from nudge_ns.services.mesh import unit_square_mesh
from nudge_ns.services.storage import DB_URL_ENV, RunRegistry


RUN = """# small nudged projection run
[mesh]
generator = unit_square
n = 4

[scheme]
scheme = proj_be
dt = 0.1
end_time = 0.2

[cda]
mu = 10
N = 2
override_guard = {override}

[output]
directory = {out}
"""


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch):
	monkeypatch.delenv(DB_URL_ENV, raising=False)
	monkeypatch.delenv(THREADS_ENV, raising=False)


def write_config(tmp_path, override="true", extra=""):
	path = tmp_path / "run.cfg"
	path.write_text(RUN.format(override=override, out=tmp_path / "out") + extra)
	return path


def test_single_run_artifacts(tmp_path):
	spec = parse_config(write_config(tmp_path))
	result = run_experiment(spec)
	assert result.ok, result.message
	out = tmp_path / "out"

	lines = (out / RESULTS_FILE).read_text().splitlines()
	assert lines[0] == "time,l2_error,h1_error,u_l2,divergence"
	assert len(lines) == 3
	series = read_csv(out / RESULTS_FILE)
	assert series.times == pytest.approx([0.1, 0.2])
	assert result.final_l2_error == series.last("l2_error")

	manifest = (out / MANIFEST_FILE).read_text()
	assert manifest.startswith("# nudge_ns ")
	assert f"# mesh_hash {unit_square_mesh(4).fingerprint()}" in manifest
	assert parse_config_text(manifest) == spec

	events = [json.loads(line) for line in (out / "events.log").read_text().splitlines()]
	assert [e["stage"] for e in events] == ["setup", "step", "step", "run"]
	assert not (out / "errors.log").exists()

	registry = RunRegistry.for_output(out)
	try:
		(row,) = registry.list_runs()
	finally:
		registry.dispose()
	assert row["status"] == "finished"
	assert row["scheme"] == "proj_be" and row["mu"] == 10.0
	assert row["final_l2_error"] == pytest.approx(result.final_l2_error)


def test_guard_refuses_without_override(tmp_path):
	spec = parse_config(write_config(tmp_path, override="false"))
	result = run_experiment(spec)
	assert result.status == "failed"
	assert "override_guard" in result.message
	assert not (tmp_path / "out" / RESULTS_FILE).exists()
	assert (tmp_path / "out" / "errors.log").exists()


def test_rerun_is_byte_identical(tmp_path):
	spec = parse_config(write_config(tmp_path))
	run_experiment(spec, tmp_path / "a")
	run_experiment(spec, tmp_path / "b")
	for name in (RESULTS_FILE, MANIFEST_FILE):
		assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_prepare_builds_nudging(tmp_path):
	setup = prepare(parse_config(write_config(tmp_path)))
	assert setup.cfg.mu == 10.0
	assert setup.cfg.nudge.interpolant.size == 4
	assert setup.space.num_velocity == 2 * 81


def test_sequential_sweep(tmp_path):
	spec = parse_config(write_config(tmp_path, extra="\n[sweep]\nmu = 0, 10\n"))
	results = run_sweep(spec, workers=1)
	assert [r.status for r in results] == ["finished", "finished"]
	for mu in ("0", "10"):
		assert (tmp_path / "out" / f"mu={mu}" / RESULTS_FILE).exists()
	registry = RunRegistry.for_output(tmp_path / "out")
	try:
		assert len(registry.list_runs()) == 2
	finally:
		registry.dispose()


def test_variant_dir(tmp_path):
	assert variant_dir(tmp_path, "n=2,mu=10") == tmp_path / "n=2" / "mu=10"
	assert variant_dir(tmp_path, "") == tmp_path


def test_sweep_workers(monkeypatch):
	assert sweep_workers() == 1
	monkeypatch.setenv(THREADS_ENV, "3")
	assert sweep_workers() == 3
	monkeypatch.setenv(THREADS_ENV, "many")
	with pytest.raises(ConfigError):
		sweep_workers()


def test_reference_then_stored_truth(tmp_path):
	archive = tmp_path / "ref"
	reference = tmp_path / "reference.cfg"
	reference.write_text(
		"[mesh]\ngenerator = unit_square\nn = 2\n\n"
		"[scheme]\nscheme = coupled_be\ndt = 0.1\nend_time = 0.2\n\n"
		f"[truth]\nsource = none\npath = {archive}\n\n"
		f"[output]\ndirectory = {tmp_path / 'reference_run'}\n"
	)
	path, series = reference_run(parse_config(reference))
	assert path == archive
	assert len(series) == 2
	assert (archive / "meta").exists()

	nudged = parse_config_text(
		"[mesh]\ngenerator = unit_square\nn = 2\n\n"
		"[scheme]\nscheme = proj_be\ndt = 0.1\nend_time = 0.2\n\n"
		"[cda]\nmu = 1\nN = 1\noverride_guard = true\n\n"
		f"[truth]\nsource = stored\npath = {archive}\n\n"
		f"[output]\ndirectory = {tmp_path / 'nudged'}\nmetrics = l2_error, u_l2\n"
	)
	result = run_experiment(nudged)
	assert result.ok, result.message
	assert result.final_l2_error is not None and result.final_l2_error >= 0.0


def test_reference_needs_archive_path(tmp_path):
	spec = parse_config(write_config(tmp_path))
	with pytest.raises(ConfigError):
		reference_run(spec)


def test_mesh_info():
	info = mesh_info(unit_square_mesh(2))
	assert info["cells"] == 8 and info["vertices"] == 9
	assert info["velocity_dofs"] == 50 and info["pressure_dofs"] == 9
	assert info["tags"] == ["WALL"]


def test_cli_dry_run(tmp_path, capsys):
	assert main(["run", str(write_config(tmp_path)), "--dry-run"]) == 0
	out = capsys.readouterr().out
	assert out.startswith("# run proj_be-mu10")
	assert "[scheme]" in out
	assert not (tmp_path / "out" / RESULTS_FILE).exists()


def test_cli_run_and_list(tmp_path, capsys):
	assert main(["run", str(write_config(tmp_path))]) == 0
	assert "finished" in capsys.readouterr().out
	assert main(["runs", "list", "--output", str(tmp_path / "out")]) == 0
	assert "proj_be" in capsys.readouterr().out


def test_cli_failed_run_exits_one(tmp_path, capsys):
	assert main(["run", str(write_config(tmp_path, override="false"))]) == 1
	assert "failed" in capsys.readouterr().out


def test_cli_config_error(tmp_path, capsys):
	bad = tmp_path / "bad.cfg"
	bad.write_text("[mesh]\ngenerator = unit_square\nn = 4\n[scheme]\nscheme = proj_be\ndt = -1\nend_time = 1\n")
	assert main(["run", str(bad)]) == 1
	assert "error: line 6: scheme.dt" in capsys.readouterr().err


def test_cli_mesh_commands(tmp_path, capsys):
	target = tmp_path / "square.mesh"
	assert main(["mesh", "gen", str(write_config(tmp_path)), "-o", str(target)]) == 0
	assert main(["mesh", "info", str(target)]) == 0
	info = json.loads(capsys.readouterr().out)
	assert info["cells"] == 32


def test_cli_usage_errors():
	with pytest.raises(SystemExit) as err:
		main(["bogus"])
	assert err.value.code == 2
	with pytest.raises(SystemExit) as err:
		main(["run"])
	assert err.value.code == 2
