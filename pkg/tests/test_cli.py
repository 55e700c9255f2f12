"""CLI harness tests: config resolution, artifacts, determinism, rendering."""

import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from clegasket import __version__, cli
from clegasket.cli import ExperimentConfig, main, render_svg
from clegasket.errors import ConfigError, RenderError
from clegasket.lattice import SELF_DUAL_P, LatticeConfig, write_config_rle


def run_command(out_dir, command, seed=0, **params):
    config = ExperimentConfig.from_dict(
        {"command": command, "params": params, "seed": seed, "output_dir": str(out_dir)}
    )
    manifest = cli.run(config)
    result = json.loads((Path(out_dir) / "result.json").read_text())
    return manifest, result


def write_square_csv(path, ccw=True):
    corners = [0.5 + 0.5j, -0.5 + 0.5j, -0.5 - 0.5j, 0.5 - 0.5j]
    if not ccw:
        corners = corners[::-1]
    pts = corners + [corners[0]]
    lines = ["t,re,im"] + [f"{t},{z.real},{z.imag}" for t, z in enumerate(pts)]
    path.write_text("\n".join(lines) + "\n")
    return path


def hole_config():
    colors = np.zeros((5, 5), dtype=bool)
    colors[2, 2] = True
    return LatticeConfig(size=5, colors=colors, boundary_color=False)


# -- config resolution -------------------------------------------------------


def test_config_fills_defaults():
    config = ExperimentConfig.from_dict({"command": "sle-trace"})
    assert config.params["horizon"] == 3.0
    assert config.params["stride"] == 10
    assert config.seed == 0
    assert config.workers == 1
    assert config.output_dir == Path("runs") / "sle-trace"


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"command": "sle-trace", "bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"command": "sle-trace", "params": {"zeta": 1}})


def test_config_rejects_bad_command():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"command": "explore"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({})


def test_config_requires_declared_params():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"command": "theta-exponent"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"command": "dim-fit"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"command": "render"})


def test_config_seed_and_worker_validation():
    base = {"command": "sle-trace"}
    for bad in (-1, 2**64, True, "7", 1.5):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({**base, "seed": bad})
    for bad in (0, -2, True, "3"):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({**base, "workers": bad})


# -- runs and manifests ------------------------------------------------------


def test_sle_trace_artifacts(tmp_path):
    manifest, result = run_command(
        tmp_path / "run", "sle-trace", seed=3, horizon=1.0, stride=20
    )
    out = tmp_path / "run"
    lines = (out / "trace.csv").read_text().splitlines()
    assert lines[0] == "t,re,im"
    assert len(lines) - 1 == result["metrics"]["n_points"]
    assert (out / "trace.png").exists()
    assert result["pass"] is None
    assert manifest.version == __version__


def test_manifest_hashes_cover_outputs(tmp_path):
    manifest, _ = run_command(tmp_path / "run", "sle-trace", seed=3, horizon=0.5)
    out = tmp_path / "run"
    listed = set(manifest.outputs)
    assert "manifest.json" not in listed
    assert {p.name for p in out.iterdir()} == listed | {"manifest.json"}
    for name, digest in manifest.outputs.items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    payload = json.loads((out / "manifest.json").read_text())
    assert payload["outputs"] == manifest.outputs
    assert payload["wall_time_s"] >= 0.0
    assert payload["config"]["seed"] == 3
    assert payload["version"] == __version__


def test_result_json_shape(tmp_path):
    _, result = run_command(tmp_path / "run", "render", kind="circle")
    assert set(result) == {"command", "params", "metrics", "pass"}
    assert result["command"] == "render"


def test_theta_exponent_pass_flag(tmp_path):
    _, result = run_command(
        tmp_path / "run",
        "theta-exponent",
        seed=1,
        kappa=6.0,
        n_paths=4000,
        dt=0.01,
        horizons=[2.0, 4.0, 6.0, 8.0, 10.0],
        fit_window=[2.0, 10.0],
    )
    metrics = result["metrics"]
    assert result["pass"] is True
    assert metrics["alpha_formula"] == pytest.approx(5.0 / 48.0)
    assert abs(metrics["alpha_hat"] - metrics["alpha_formula"]) <= 0.1 * metrics["alpha_formula"]
    lines = (tmp_path / "run" / "survival.csv").read_text().splitlines()
    assert lines[0] == "T,p,stderr,n"
    assert len(lines) == 6


def test_theta_lemmas_outputs(tmp_path):
    _, result = run_command(
        tmp_path / "run",
        "theta-lemmas",
        seed=1,
        n_paths=2000,
        dt=0.01,
        horizons=[0.5, 1.0],
    )
    rows = result["metrics"]["rows"]
    assert [r["T"] for r in rows] == [0.5, 1.0]
    assert result["pass"] is True
    for name in ("below_pi.csv", "band.csv"):
        assert (tmp_path / "run" / name).read_text().startswith("T,p,stderr,n\n")
    # an absurd band threshold must flip the flag
    _, strict = run_command(
        tmp_path / "strict",
        "theta-lemmas",
        seed=1,
        n_paths=2000,
        dt=0.01,
        horizons=[0.5],
        p0=0.999,
    )
    assert strict["pass"] is False


def test_event_prob_metrics(tmp_path):
    _, result = run_command(
        tmp_path / "run",
        "event-prob",
        seed=11,
        betas=[0.8, 1.2],
        n_trials=1000,
        dt=0.005,
        t_margin=8.0,
    )
    metrics = result["metrics"]
    assert [r["beta"] for r in metrics["rows"]] == [0.8, 1.2]
    assert metrics["monotone"] is True
    assert metrics["slope"] < 0.0
    assert isinstance(result["pass"], bool)
    # shared-seed populations keep the undecidable count tame at this dt
    assert all(r["n_undecidable"] <= 60 for r in metrics["rows"])


def test_event_prob_rejects_unsorted_betas(tmp_path):
    with pytest.raises(ConfigError):
        run_command(tmp_path / "run", "event-prob", betas=[2.0, 1.0], n_trials=1000)


def test_outermost_loop_run(tmp_path):
    _, result = run_command(
        tmp_path / "run", "outermost-loop", seed=705, horizon=40.0, stride=5
    )
    assert result["metrics"]["winding"] == 1
    lines = (tmp_path / "run" / "loop.csv").read_text().splitlines()
    assert lines[1].split(",")[1:] == lines[-1].split(",")[1:]
    svg = (tmp_path / "run" / "loop.svg").read_text()
    assert "winding +1" in svg
    assert ' Z"' in svg


def test_perc_gasket_trivial_mask_skips_fit(tmp_path):
    _, result = run_command(tmp_path / "run", "perc-gasket", n=64, p=0.0)
    metrics = result["metrics"]
    assert metrics["skip_reason"] == "trivial mask"
    assert metrics["fit"] is None
    assert metrics["dimension_mean"] is None
    assert metrics["gasket_fraction"] == 1.0
    assert result["pass"] is None
    assert not (tmp_path / "run" / "boxcount.csv").exists()
    assert (tmp_path / "run" / "mask.pbm").exists()


def test_perc_gasket_fit(tmp_path):
    _, result = run_command(tmp_path / "run", "perc-gasket", seed=0, n=256, p=0.5)
    metrics = result["metrics"]
    assert metrics["window"] == [4.0, 32.0]
    assert 1.6 <= metrics["dimension_mean"] <= 2.0
    assert isinstance(result["pass"], bool)
    assert (tmp_path / "run" / "boxcount.csv").read_text().startswith("scale,count\n")
    assert (tmp_path / "run" / "config.rle").exists()


def test_perc_gasket_seed_average(tmp_path):
    _, result = run_command(
        tmp_path / "run", "perc-gasket", seed=0, n=64, p=0.5, seeds=3
    )
    per_seed = result["metrics"]["per_seed"]
    assert [r["seed"] for r in per_seed] == [0, 1, 2]
    dims = [r["dimension"] for r in per_seed]
    assert result["metrics"]["dimension_mean"] == pytest.approx(float(np.mean(dims)))


def test_fk_gasket_run(tmp_path):
    _, result = run_command(tmp_path / "run", "fk-gasket", seed=2, n=16)
    metrics = result["metrics"]
    assert metrics["q"] == 2.0
    assert metrics["p"] == pytest.approx(SELF_DUAL_P)
    assert metrics["sweeps"] == 160
    assert isinstance(result["pass"], bool)


def test_dim_fit_matches_source_run(tmp_path):
    _, first = run_command(tmp_path / "a", "perc-gasket", seed=0, n=128, p=0.5)
    source = str(tmp_path / "a" / "config.rle")
    _, refit = run_command(tmp_path / "b", "dim-fit", config=source)
    assert refit["metrics"]["fit"]["dimension"] == first["metrics"]["per_seed"][0]["dimension"]
    assert (tmp_path / "a" / "boxcount.csv").read_bytes() == (
        tmp_path / "b" / "boxcount.csv"
    ).read_bytes()
    assert refit["pass"] is None
    _, checked = run_command(
        tmp_path / "c",
        "dim-fit",
        config=source,
        target=refit["metrics"]["fit"]["dimension"],
        tolerance=0.01,
    )
    assert checked["pass"] is True


def test_rerun_byte_identity(tmp_path):
    base = {"command": "perc-gasket", "params": {"n": 128, "p": 0.55}, "seed": 7}
    first = cli.run(
        ExperimentConfig.from_dict({**base, "output_dir": str(tmp_path / "a")})
    )
    second = cli.run(
        ExperimentConfig.from_dict(
            {**base, "output_dir": str(tmp_path / "b"), "workers": 4}
        )
    )
    assert first.outputs == second.outputs
    for name in first.outputs:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# -- rendering ---------------------------------------------------------------


def test_render_circle_only(tmp_path):
    _, result = run_command(tmp_path / "run", "render", kind="circle")
    svg = (tmp_path / "run" / "figure.svg").read_text()
    assert svg.count("<circle") == 1
    assert "<path" not in svg
    assert "<polygon" not in svg
    assert result["pass"] is None


def test_render_mask_with_hole_draws_24_hexes(tmp_path):
    source = write_config_rle(hole_config(), tmp_path / "hole.rle")
    _, result = run_command(tmp_path / "run", "render", kind="mask", source=str(source))
    svg = (tmp_path / "run" / "figure.svg").read_text()
    assert svg.count("<polygon") == 24
    assert "<circle" not in svg
    assert result["metrics"]["cells"] == 24


def test_render_interfaces_hexagon(tmp_path):
    source = write_config_rle(hole_config(), tmp_path / "hole.rle")
    _, result = run_command(
        tmp_path / "run", "render", kind="interfaces", source=str(source)
    )
    svg = (tmp_path / "run" / "figure.svg").read_text()
    assert svg.count("<path") == 1
    assert ' Z"' in svg
    assert result["metrics"]["n_loops"] == 1
    assert result["metrics"]["n_edges"] == 6


def test_render_loop_winding_sign(tmp_path):
    ccw = write_square_csv(tmp_path / "ccw.csv", ccw=True)
    _, result = run_command(tmp_path / "a", "render", kind="loop", source=str(ccw))
    assert result["metrics"]["winding"] == 1
    assert "winding +1" in (tmp_path / "a" / "figure.svg").read_text()
    cw = write_square_csv(tmp_path / "cw.csv", ccw=False)
    _, result = run_command(tmp_path / "b", "render", kind="loop", source=str(cw))
    assert result["metrics"]["winding"] == -1
    assert "winding -1" in (tmp_path / "b" / "figure.svg").read_text()


def test_render_open_trace(tmp_path):
    path = tmp_path / "open.csv"
    path.write_text("t,re,im\n0,0.1,0.0\n1,0.3,0.2\n2,0.5,0.1\n")
    _, result = run_command(tmp_path / "run", "render", kind="trace", source=str(path))
    svg = (tmp_path / "run" / "figure.svg").read_text()
    assert svg.count("<circle") == 1
    assert svg.count("<path") == 1
    assert ' Z"' not in svg
    assert result["metrics"]["points"] == 3


def test_render_loop_rejects_open_trace(tmp_path):
    path = tmp_path / "open.csv"
    path.write_text("t,re,im\n0,0.1,0.0\n1,0.3,0.2\n2,0.5,0.1\n")
    with pytest.raises(RenderError):
        run_command(tmp_path / "run", "render", kind="loop", source=str(path))


def test_render_empty_mask_is_an_error(tmp_path):
    colors = np.ones((4, 4), dtype=bool)  # nothing matches the white boundary
    source = write_config_rle(
        LatticeConfig(size=4, colors=colors, boundary_color=False), tmp_path / "full.rle"
    )
    with pytest.raises(RenderError):
        run_command(tmp_path / "run", "render", kind="mask", source=str(source))


def test_render_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        run_command(tmp_path / "a", "render", kind="blob")
    with pytest.raises(ConfigError):
        run_command(tmp_path / "b", "render", kind="mask")
    path = tmp_path / "bad.csv"
    path.write_text("x,y\n1,2\n")
    with pytest.raises(ConfigError):
        run_command(tmp_path / "c", "render", kind="trace", source=str(path))


def test_render_svg_rejects_junk(tmp_path):
    with pytest.raises(RenderError):
        render_svg(3.14, tmp_path / "x.svg")
    with pytest.raises(RenderError):
        render_svg((), tmp_path / "y.svg")


# -- entry point -------------------------------------------------------------


def test_main_exit_codes(tmp_path):
    assert main(["render", "--override", "kind=circle", "--out", str(tmp_path / "a")]) == 0
    assert main(["--config", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert main(["--config", str(bad)]) == 2
    assert main(
        ["dim-fit", "--override", "config=nowhere.rle", "--out", str(tmp_path / "b")]
    ) == 2
    colors = np.ones((4, 4), dtype=bool)
    source = write_config_rle(
        LatticeConfig(size=4, colors=colors, boundary_color=False), tmp_path / "full.rle"
    )
    assert main(
        [
            "render",
            "--override",
            "kind=mask",
            "--override",
            f"source={source}",
            "--out",
            str(tmp_path / "c"),
        ]
    ) == 3


def test_seed_precedence(tmp_path, monkeypatch):
    def seed_of(run_dir):
        return json.loads((run_dir / "manifest.json").read_text())["config"]["seed"]

    with_seed = tmp_path / "cfg.json"
    with_seed.write_text(
        json.dumps({"command": "render", "params": {"kind": "circle"}, "seed": 3})
    )
    without_seed = tmp_path / "cfg2.json"
    without_seed.write_text(json.dumps({"command": "render", "params": {"kind": "circle"}}))
    monkeypatch.setenv(cli.SEED_ENV, "9")

    assert main(["--config", str(with_seed), "--out", str(tmp_path / "a")]) == 0
    assert seed_of(tmp_path / "a") == 3  # config beats environment
    assert main(["--config", str(without_seed), "--out", str(tmp_path / "b")]) == 0
    assert seed_of(tmp_path / "b") == 9  # environment fills the gap
    assert main(
        ["--config", str(with_seed), "--override", "seed=4", "--out", str(tmp_path / "c")]
    ) == 0
    assert seed_of(tmp_path / "c") == 4  # override beats config
    assert main(
        [
            "--config",
            str(with_seed),
            "--override",
            "seed=4",
            "--seed",
            "5",
            "--out",
            str(tmp_path / "d"),
        ]
    ) == 0
    assert seed_of(tmp_path / "d") == 5  # the dedicated flag wins


def test_override_values_parse_as_json(tmp_path):
    assert main(
        [
            "perc-gasket",
            "--override",
            "n=32",
            "--override",
            "p=0.0",
            "--out",
            str(tmp_path / "run"),
        ]
    ) == 0
    result = json.loads((tmp_path / "run" / "result.json").read_text())
    assert result["params"]["n"] == 32
    assert result["params"]["p"] == 0.0
    assert result["metrics"]["skip_reason"] == "trivial mask"


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [
            sys.executable,
            "-m",
            "clegasket.cli",
            "render",
            "--override",
            "kind=circle",
            "--out",
            str(tmp_path / "run"),
        ],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "run" / "figure.svg").exists()
    assert "render: done" in proc.stdout
