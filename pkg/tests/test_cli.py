import csv
import io as stdio
import json

import numpy as np
import pytest

from stnn import cli, io
from stnn.training import chronological_split


def run(argv, capsys):
    """Run the CLI in-process; return (exit code, stdout, stderr)."""
    try:
        code = cli.main([str(a) for a in argv])
    except SystemExit as exc:
        code = exc.code
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    argv_sim = ["simulate", "--out", root / "a", "--rows", 1, "--cols", 2, "--steps", 160, "--seed", 3]
    assert cli.main([str(a) for a in argv_sim]) == 0
    argv_b = ["simulate", "--out", root / "b", "--rows", 1, "--cols", 3, "--steps", 60, "--seed", 4]
    assert cli.main([str(a) for a in argv_b]) == 0
    ckpt = root / "m.npz"
    argv_train = ["train", "--manifest", root / "a" / "manifest.json", "--checkpoint", ckpt,
                  "--alpha", 4, "--epochs", 1, "--subsample", 0.05, "--horizon-steps", "1,3", "--seed", 7]
    assert cli.main([str(a) for a in argv_train]) == 0
    return root, ckpt


def test_train_writes_checkpoint_and_log(workspace):
    root, ckpt = workspace
    model, meta = io.load_checkpoint(ckpt)
    assert model.config.alpha == 4 and model.config.T_r == 3
    assert meta["extra"]["horizons"] == [1, 3]
    lines = (root / "m.log.jsonl").read_text().splitlines()
    assert len(lines) == 1 and {"epoch", "train_loss", "val_mae", "wall_time"} <= set(json.loads(lines[0]))


def test_evaluate_report(workspace, capsys):
    root, ckpt = workspace
    code, out, _ = run(["evaluate", "--manifest", root / "a" / "manifest.json", "--checkpoint", ckpt,
                        "--horizon-steps", "1,3", "--out", root / "report.json"], capsys)
    assert code == 0
    report = json.loads((root / "report.json").read_text())
    assert set(report["baselines"]) == {"ha", "persistence"}
    for block in [report["stnn"], *report["baselines"].values()]:
        assert [h["step"] for h in block["horizons"]] == [1, 3]
        assert np.isfinite(block["overall"]["mae"])
    # evaluation draws only from the test split, which starts after training and validation
    tr, va, te = chronological_split(160, 12, 3)
    assert report["split"] == [te.start, te.stop] and te.start >= va.stop >= tr.stop
    assert report["exclude_zero_truth"] is True


def test_predict_transfers_to_other_network(workspace, capsys):
    root, ckpt = workspace
    code, out, _ = run(["predict", "--manifest", root / "b" / "manifest.json", "--checkpoint", ckpt,
                        "--targets", "s000,s005"], capsys)
    assert code == 0
    rows = list(csv.reader(stdio.StringIO(out)))
    assert rows[0] == ["target", "t+1", "t+2", "t+3"]
    assert [r[0] for r in rows[1:]] == ["s000", "s005"]
    assert all(np.isfinite(float(v)) for r in rows[1:] for v in r[1:])


def test_predict_threads_agree(workspace, capsys, monkeypatch):
    root, ckpt = workspace
    argv = ["predict", "--manifest", root / "a" / "manifest.json", "--checkpoint", ckpt, "--start", 20]
    _, one, _ = run(argv, capsys)
    monkeypatch.setenv("SF_THREADS", "3")
    _, three, _ = run(argv, capsys)
    assert one == three and len(one.splitlines()) == 15
    monkeypatch.setenv("SF_THREADS", "many")
    code, _, err = run(argv, capsys)
    assert code != 0 and "SF_THREADS" in json.loads(err)["message"]


def test_explain_map(workspace, capsys):
    root, ckpt = workspace
    code, out, _ = run(["explain", "--manifest", root / "a" / "manifest.json", "--checkpoint", ckpt,
                        "--targets", "s003"], capsys)
    assert code == 0
    rows = list(csv.reader(stdio.StringIO(out)))
    assert len(rows) == 1 + 4 and len(rows[0]) == 1 + 12
    assert rows[1][0] == "s003"
    weights = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    assert np.all(weights >= 0) and np.isclose(weights.sum(), 1.0)


def test_seed_reproducible(workspace, tmp_path):
    root, ckpt = workspace
    again = tmp_path / "again.npz"
    argv = ["train", "--manifest", root / "a" / "manifest.json", "--checkpoint", again, "--alpha", 4,
            "--epochs", 1, "--subsample", 0.05, "--horizon-steps", "1,3", "--seed", 7]
    assert cli.main([str(a) for a in argv]) == 0
    a, _ = io.load_checkpoint(ckpt)
    b, _ = io.load_checkpoint(again)
    for p, q in zip(a.parameters(), b.parameters()):
        assert np.array_equal(p.data, q.data)


def test_simulate_deterministic(tmp_path, capsys):
    for name in ("x", "y"):
        code, _, _ = run(["simulate", "--out", tmp_path / name, "--rows", 1, "--cols", 2, "--steps", 30,
                          "--seed", 9], capsys)
        assert code == 0
    assert (tmp_path / "x" / "series.csv").read_bytes() == (tmp_path / "y" / "series.csv").read_bytes()
    assert (tmp_path / "x" / "distances.txt").read_bytes() == (tmp_path / "y" / "distances.txt").read_bytes()


@pytest.mark.parametrize("argv, kind", [
    (["evaluate", "--manifest", "nowhere.json", "--checkpoint", "x.npz"], "ManifestError"),
    (["frobnicate"], "UsageError"),
    (["simulate", "--out", "unused", "--rows", 1, "--cols", 1], "ValueError"),
    (["train", "--manifest", "m.json"], "UsageError"),
])
def test_errors_are_one_json_line(argv, kind, capsys):
    code, out, err = run(argv, capsys)
    assert code != 0 and out == ""
    lines = err.strip().splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["error"] == kind


def test_bad_target_and_checkpoint(workspace, capsys, tmp_path):
    root, ckpt = workspace
    man = root / "a" / "manifest.json"
    code, _, err = run(["predict", "--manifest", man, "--checkpoint", ckpt, "--targets", "nope"], capsys)
    assert code != 0 and "nope" in json.loads(err)["message"]
    code, _, err = run(["explain", "--manifest", man, "--checkpoint", ckpt], capsys)
    assert code != 0 and "exactly one" in json.loads(err)["message"]
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a checkpoint")
    code, _, err = run(["predict", "--manifest", man, "--checkpoint", bad], capsys)
    assert code != 0 and json.loads(err)["error"] == "CheckpointError"
