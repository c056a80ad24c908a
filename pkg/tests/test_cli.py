import subprocess
import sys

import numpy as np
import pytest

from rotslam import io
from rotslam.cli import EXIT_INPUT, EXIT_NONCONVERGED, EXIT_OK, main
from rotslam.config import SCHEMA
from rotslam.geometry import axis_angle
from rotslam.simulate import SceneSpec, simulate_scene


@pytest.fixture
def scene_dir(tmp_path):
    out = tmp_path / "scene"
    assert main(["simulate", "-o", str(out), "--set", "simulate.frames=61",
                 "--set", "simulate.direction_noise_deg=0.1", "--set", "simulate.seed=4"]) == EXIT_OK
    return out


def test_run_valid_input(scene_dir, tmp_path, capsys):
    out = tmp_path / "traj.txt"
    code = main(["run", str(scene_dir / "graph.g2o"), "-o", str(out)])
    assert code == EXIT_OK
    assert out.exists() and len(out.read_text().splitlines()) == 61
    report = out.with_suffix(".report.txt").read_text()
    assert "\nWINDOW index=0" in report and "SUMMARY" in report and "converged=true" in report
    assert "converged true" in capsys.readouterr().out


def test_run_on_correspondences(tmp_path):
    out = tmp_path / "scene"
    assert main(["simulate", "-o", str(out), "--set", "simulate.level=frontend",
                 "--set", "simulate.frames=31", "--set", "simulate.seed=2"]) == EXIT_OK
    traj = tmp_path / "traj.txt"
    assert main(["run", str(out / "correspondences.txt"), "-o", str(traj)]) in (EXIT_OK, EXIT_NONCONVERGED)
    assert len(traj.read_text().splitlines()) == 31


def test_malformed_line_exit_1(tmp_path, capsys):
    path = tmp_path / "m.txt"
    path.write_text("CORRS v1 640 480\nMATCH 0 1 1 2 3 4 0.5\nMATCH 0 1 oops 2 3 4 0.5\n")
    code = main(["run", str(path), "-o", str(tmp_path / "t.txt")])
    assert code == EXIT_INPUT
    assert f"{path}:3:" in capsys.readouterr().err


def test_missing_file_exit_1(tmp_path, capsys):
    assert main(["evaluate", str(tmp_path / "nope.txt"), str(tmp_path / "nope.txt")]) == EXIT_INPUT
    assert "error" in capsys.readouterr().err


def test_forced_nonconvergence_exit_2(scene_dir, tmp_path):
    out = tmp_path / "traj.txt"
    code = main(["run", str(scene_dir / "graph.g2o"), "-o", str(out), "--set", "transavg.max_iters=1"])
    assert code == EXIT_NONCONVERGED
    assert out.exists()
    assert "converged=false" in out.with_suffix(".report.txt").read_text()


def test_evaluate_identical_prints_zero(scene_dir, tmp_path, capsys):
    gt = scene_dir / "groundtruth.txt"
    aligned = tmp_path / "aligned.txt"
    assert main(["evaluate", str(gt), str(gt), "--aligned", str(aligned)]) == EXIT_OK
    assert "RMSE 0.000000" in capsys.readouterr().out.splitlines()
    assert aligned.exists()


def test_simulate_byte_identical(tmp_path):
    for level in ("backend", "frontend"):
        outs = []
        for k in range(2):
            d = tmp_path / f"{level}{k}"
            assert main(["simulate", "-o", str(d), "--set", f"simulate.level={level}",
                         "--set", "simulate.frames=20", "--set", "simulate.seed=9",
                         "--set", "simulate.outlier_fraction=0.1"]) == EXIT_OK
            outs.append({p.name: p.read_bytes() for p in d.iterdir()})
        assert outs[0] == outs[1]


def test_rotavg_k4_corrupted_edge(tmp_path, capsys):
    scene = simulate_scene(SceneSpec(n_frames=4, covis_span=3, seed=0))
    edges = scene.edges
    assert len(edges) == 6
    for e in edges:
        if (e.i, e.j) == (1, 3):
            e.rotation = axis_angle([0.2, 1.0, -0.4], np.pi / 2) @ e.rotation
    graph = tmp_path / "k4.g2o"
    io.write_g2o(graph, {k: (scene.positions[k], scene.rotations[k]) for k in range(4)}, edges)
    report = tmp_path / "k4.report"
    assert main(["rotavg", str(graph), "-o", str(tmp_path / "rots.txt"), "--report", str(report)]) == EXIT_OK
    text = report.read_text()
    assert [ln for ln in text.splitlines() if ln.startswith("REPLACED")] == \
        [ln for ln in text.splitlines() if ln.startswith("REPLACED edge=1-3")]
    assert "replaced=1 " in text.splitlines()[-1]
    assert len(io.read_rotations(tmp_path / "rots.txt")) == 4


def test_transavg_subcommand(scene_dir, tmp_path, capsys):
    out = tmp_path / "t.txt"
    assert main(["transavg", str(scene_dir / "graph.g2o"), "-o", str(out)]) == EXIT_OK
    assert "ADMM iterations=" in capsys.readouterr().out
    assert len(out.read_text().splitlines()) == 61


def test_run_idempotent(scene_dir, tmp_path):
    blobs = []
    for k in range(2):
        out = tmp_path / f"t{k}.txt"
        assert main(["run", str(scene_dir / "graph.g2o"), "-o", str(out), "--no-timing"]) == EXIT_OK
        blobs.append((out.read_bytes(), out.with_suffix(".report.txt").read_bytes()))
    assert blobs[0] == blobs[1]


def test_help_lists_every_key_with_default():
    out = subprocess.run([sys.executable, "-m", "rotslam", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for key, (default, *_rest) in SCHEMA.items():
        line = next(ln for ln in out.stdout.splitlines() if ln.split()[:1] == [key])
        assert "default" in line


def test_print_config(capsys):
    assert main(["run", "x", "-o", "y", "--print-config", "--set", "rotavg.prune_rounds=1"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "rotavg.prune_rounds = 1" in text
    assert len(text.splitlines()) == len(SCHEMA)


def test_unknown_override_rejected(capsys):
    assert main(["simulate", "-o", "x", "--set", "simulate.colour=red"]) == EXIT_INPUT
    assert "simulate.colour" in capsys.readouterr().err


def test_plots_written(scene_dir, tmp_path):
    pytest.importorskip("matplotlib")
    out = tmp_path / "traj.txt"
    assert main(["run", str(scene_dir / "graph.g2o"), "-o", str(out), "--plot",
                 "--groundtruth", str(scene_dir / "groundtruth.txt")]) == EXIT_OK
    for name in ("traj.trajectory.png", "traj.timing.png"):
        data = (tmp_path / name).read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"
    fig = tmp_path / "eval.png"
    assert main(["evaluate", str(out), str(scene_dir / "groundtruth.txt"), "--plot", str(fig)]) == EXIT_OK
    assert fig.stat().st_size > 0
