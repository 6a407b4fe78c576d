import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from splat4d import cli
from splat4d.rasterizer.io import read_png

GOLDEN = Path(__file__).parent / "golden"
COMMANDS = [None] + list(cli.HANDLERS)


def run(argv, capsys):
    rc = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return rc, out.out, out.err


@pytest.mark.parametrize("cmd", COMMANDS)
def test_help_matches_golden(cmd, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    rc, out, _ = run(["--help"] if cmd is None else [cmd, "--help"], capsys)
    assert rc == 0
    name = "help_main.txt" if cmd is None else f"help_{cmd}.txt"
    assert out == (GOLDEN / name).read_text()


@pytest.mark.parametrize("cmd", list(cli.HANDLERS))
def test_every_flag_documents_a_default(cmd):
    sp = cli._subparser(cli.build_parser(), cmd)
    for action in sp._actions:
        if action.dest == "help" or not action.option_strings:
            continue
        assert action.help, f"{cmd} {action.option_strings} lacks help"


def test_usage_errors_exit_2(capsys, tmp_path):
    rc, _, err = run(["train", "--data", tmp_path], capsys)
    assert rc == 2 and "--out" in err
    rc, _, _ = run(["bogus"], capsys)
    assert rc == 2
    rc, _, err = run(["attn-demo", "--alphas", "0,1.5"], capsys)
    assert rc == 2 and "--alphas" in err
    rc, _, err = run(["synth-gen", "--out", tmp_path / "d", "--gain", "2"], capsys)
    assert rc == 2 and "gain" in err


def test_config_file_unknown_key_and_override(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"alphas": "0,0.5", "warp_drive": 1}))
    rc, _, err = run(["attn-demo", "--config", cfg], capsys)
    assert rc == 2 and "warp_drive" in err
    cfg.write_text(json.dumps({"alphas": "0,0.5", "steps": 4}))
    rc, out, _ = run(["attn-demo", "--config", cfg], capsys)
    assert rc == 0 and len(out.strip().splitlines()) == 3
    rc, out, _ = run(["attn-demo", "--config", cfg, "--alphas", "0,0.5,1"], capsys)
    assert rc == 0 and len(out.strip().splitlines()) == 4
    rc, _, err = run(["attn-demo", "--config", tmp_path / "nope.json"], capsys)
    assert rc == 2 and "nope.json" in err


def test_runtime_failure_exit_1_names_file(capsys, tmp_path):
    rc, _, err = run(["eval", "--ckpt", tmp_path / "missing.ckpt", "--data", tmp_path], capsys)
    assert rc == 1 and "missing.ckpt" in err
    rc, _, err = run(["synth-gen", "--out", tmp_path / "d", "--script", tmp_path / "s.json"], capsys)
    assert rc == 1 and "s.json" in err


def test_attn_demo_csv_nonincreasing(capsys, tmp_path):
    rc, out, _ = run(["attn-demo", "--alphas", "0,0.25,0.5,0.75,1", "--out", tmp_path / "a"], capsys)
    assert rc == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    scores = [float(r["consistency_score"]) for r in rows]
    assert [float(r["alpha"]) for r in rows] == [0, 0.25, 0.5, 0.75, 1]
    assert all(a >= b for a, b in zip(scores, scores[1:]))
    shape = tuple(int(s) for s in (tmp_path / "a" / "outputs_shape.txt").read_text().split())
    arr = np.fromfile(tmp_path / "a" / "outputs_alpha0.500.f32", dtype="<f4")
    assert arr.size == np.prod(shape)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, ckpt = root / "data", root / "model.ckpt"
    assert cli.main(["synth-gen", "--out", str(data), "--views", "16", "--frames", "3", "--size", "32",
                     "--seed", "1"]) == 0
    assert cli.main(["train", "--data", str(data), "--out", str(ckpt), "--iters", "20", "--eval-every", "10",
                     "--runs-root", str(root / "runs")]) == 0
    return root, data, ckpt


def test_train_writes_run_directory(pipeline):
    root, _, ckpt = pipeline
    runs = list((root / "runs").iterdir())
    assert len(runs) == 1 and runs[0].name.endswith("-train")
    assert json.loads((runs[0] / "config.json").read_text())["iters"] == 20
    assert (runs[0] / "metrics.csv").read_text().startswith("iteration,train_psnr")
    assert ckpt.exists()


def test_eval_one_row_per_held_out_view(pipeline, capsys, tmp_path):
    _, data, ckpt = pipeline
    rc, out, _ = run(["eval", "--ckpt", ckpt, "--data", data], capsys)
    assert rc == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [int(r["view"]) for r in rows] == [5, 10, 15]
    rc, _, _ = run(["eval", "--ckpt", ckpt, "--data", data, "--out", tmp_path / "e.csv"], capsys)
    assert rc == 0
    assert (tmp_path / "e.csv").read_text().replace("\r\n", "\n") == out.replace("\r\n", "\n")


def test_render_with_and_without_dataset(pipeline, capsys, tmp_path):
    _, data, ckpt = pipeline
    rc, _, _ = run(["render", "--ckpt", ckpt, "--time", 0.5, "--view", 3, "--out", tmp_path / "a.png"], capsys)
    assert rc == 0
    rc, _, _ = run(["render", "--ckpt", ckpt, "--time", 0.5, "--view", 3, "--data", data,
                    "--out", tmp_path / "b.png"], capsys)
    assert rc == 0
    a, b = read_png(tmp_path / "a.png"), read_png(tmp_path / "b.png")
    assert a.shape == (32, 32, 3)
    np.testing.assert_array_equal(a, b)
    rc, _, err = run(["render", "--ckpt", ckpt, "--view", 99, "--out", tmp_path / "c.png"], capsys)
    assert rc == 2 and "--view" in err


def test_refine_runs(pipeline, capsys, tmp_path):
    root, data, ckpt = pipeline
    rc, out, _ = run(["refine", "--data", data, "--ckpt", ckpt, "--out", tmp_path / "r.ckpt", "--iters", 8,
                      "--eval-every", 4, "--runs-root", tmp_path / "runs"], capsys)
    assert rc == 0 and "cached targets" in out
    assert (tmp_path / "r.ckpt").exists()
