import csv
import math

import numpy as np
import pytest

from fcan import checkpoint, cli
from fcan import tensor as tn
from fcan.classifier import build_model
from fcan.data import load_ppm, save_ppm
from fcan.rng import Rng

TINY = """
task.n_train = 160
task.n_test = 80
task.image_size = 32
task.glyph_size = 6
task.class_bits = 16
train.epochs_backbone = 2
train.epochs_attention = 2
train.epochs_parts = 2
train.rounds = 1
train.samples = 2
train.part_size = 16
train.channels = 4 8
train.hidden = 8
train.region_sizes = 1x1 2x2 2x2
ablate.parts = 0 1
ablate.arms = attention center
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert cli.main(["generate", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def read_csv(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_generate_layout(work):
    data = work / "data"
    assert (data / "task.cfg").exists()
    assert len((data / "train.txt").read_text().splitlines()) == 160
    assert len(list((data / "test").iterdir())) == 80


def test_non_empty_out_needs_force(work, capsys):
    args = ["generate", "--config", str(work / "tiny.cfg"), "--out", str(work / "data")]
    assert cli.main(args) == cli.EXIT_USAGE
    assert "--force" in capsys.readouterr().err
    before = (work / "data" / "train.txt").read_text()
    assert cli.main(args + ["--force", "--seed", "4"]) == 0
    assert (work / "data" / "train.txt").read_text() != before
    assert cli.main(args + ["--force"]) == 0
    assert (work / "data" / "train.txt").read_text() == before


def test_failed_command_leaves_no_partial_output(work, tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise ValueError("diverged")
    monkeypatch.setattr(cli, "train", broken)
    out = tmp_path / "run"
    code = cli.main(["train", "--config", str(work / "tiny.cfg"), "--data", str(work / "data"), "--out", str(out)])
    assert code == cli.EXIT_DATA
    assert not out.exists()
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".run")]


def test_train_outputs(work):
    run = work / "run"
    names = sorted(p.name for p in (run / "checkpoints").iterdir())
    assert names == ["final.fcan", "round0_step1.fcan", "round0_step2.fcan", "round0_step3.fcan"]
    rows = read_csv(run / "metrics.csv")
    assert rows[0][:3] == ["epoch", "step", "round"] and "wall_ms" not in rows[0]
    assert {r[1] for r in rows[1:]} == {"1", "2", "3"}
    assert "train.reward = greedy" in (run / "config.cfg").read_text()


def test_train_is_reproducible(work, tmp_path):
    out = tmp_path / "again"
    assert cli.main(["train", "--config", str(work / "tiny.cfg"), "--data", str(work / "data"),
                     "--out", str(out)]) == 0
    for rel in ("checkpoints/final.fcan", "checkpoints/round0_step2.fcan", "metrics.csv"):
        assert (out / rel).read_bytes() == (work / "run" / rel).read_bytes()


def test_reward_flag_recorded(work, tmp_path):
    out = tmp_path / "delayed"
    assert cli.main(["train", "--config", str(work / "tiny.cfg"), "--data", str(work / "data"),
                     "--out", str(out), "--reward", "delayed", "--parts", "1"]) == 0
    log = (out / "log.jsonl").read_text()
    assert '"reward": "delayed"' in log and '"greedy"' not in log
    assert "train.parts = 1" in (out / "config.cfg").read_text()


def test_eval_csv(work, tmp_path):
    out = tmp_path / "ev"
    assert cli.main(["eval", "--checkpoint", str(work / "run/checkpoints/final.fcan"),
                     "--data", str(work / "data"), "--arms", "attention,center,random", "--out", str(out)]) == 0
    rows = read_csv(out / "eval.csv")
    assert rows[0] == ["arm", "accuracy", "n"]
    assert [r[0] for r in rows[1:]] == ["attention", "center", "random"]
    assert all(r[2] == "80" and 0.0 <= float(r[1]) <= 1.0 for r in rows[1:])


def test_eval_random_weights_is_chance(work, tmp_path, capsys):
    m = build_model(Rng(11), 10, (32, 32), (16, 16), 1, (4, 8), ((1, 1),), hidden=8)
    ck = tmp_path / "random.fcan"
    checkpoint.save(ck, m.state())
    assert cli.main(["eval", "--checkpoint", str(ck), "--data", str(work / "data"), "--split", "train"]) == 0
    acc = float(capsys.readouterr().out.split("accuracy ")[1].split()[0])
    assert abs(acc - 0.1) < 3.29 * math.sqrt(0.09 / 160)


def test_eval_class_count_mismatch(work, tmp_path, capsys):
    m = build_model(Rng(1), 6, (32, 32), (16, 16), 1, (4, 8), ((1, 1),), hidden=8)
    ck = tmp_path / "six.fcan"
    checkpoint.save(ck, m.state())
    assert cli.main(["eval", "--checkpoint", str(ck), "--data", str(work / "data")]) == cli.EXIT_DATA
    assert "classes" in capsys.readouterr().err


def test_eval_bad_arm_is_usage_error(work):
    assert cli.main(["eval", "--checkpoint", str(work / "run/checkpoints/final.fcan"),
                     "--data", str(work / "data"), "--arms", "left"]) == cli.EXIT_USAGE


def test_visualize_writes_one_overlay_per_step(work, tmp_path):
    out = tmp_path / "vis"
    img = work / "data" / "test" / "000000.pgm"
    assert cli.main(["visualize", "--checkpoint", str(work / "run/checkpoints/final.fcan"),
                     "--image", str(img), "--out", str(out)]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == ["attention_t1.ppm", "attention_t2.ppm"]
    over = load_ppm(out / files[0])
    assert over.shape == (3, 32, 32)


def test_visualize_unreadable_image(work, tmp_path):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P5\n32 32\n255\n")
    code = cli.main(["visualize", "--checkpoint", str(work / "run/checkpoints/final.fcan"),
                     "--image", str(bad), "--out", str(tmp_path / "v")])
    assert code == cli.EXIT_DATA


def test_overlay_one_hot_single_bright_cell():
    probs = np.zeros((4, 4))
    probs[1, 2] = 1.0
    img = np.zeros((1, 32, 32))
    rgb = cli.overlay(img, probs, (8, 16, 8, 8), alpha=0.5)
    assert rgb.shape == (3, 32, 32)
    inside = rgb[1, 9:15, 17:23]
    assert np.all(inside == 0.5)
    mask = np.ones((32, 32), bool)
    mask[8:16, 16:24] = False
    assert np.all(rgb[1][mask] == 0.0)
    assert rgb[0, 8, 16] == 1.0 and rgb[1, 8, 16] == 0.0


def test_gradcheck_passes(capsys, tmp_path):
    assert cli.main(["gradcheck", "--out", str(tmp_path / "gc")]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "reinforce_vs_enumeration" in out
    assert (tmp_path / "gc" / "gradcheck.txt").exists()


def test_gradcheck_names_corrupted_rule(monkeypatch, capsys):
    good = tn.BACKWARD["relu"]
    monkeypatch.setitem(tn.BACKWARD, "relu", lambda ctx, g: (0.5 * good(ctx, g)[0],))
    assert cli.main(["gradcheck"]) == cli.EXIT_CHECK
    out = capsys.readouterr().out
    assert "FAIL  relu " in out
    assert "failing: relu" in out


def test_usage_errors(capsys):
    assert cli.main(["train", "--parts", "x"]) == cli.EXIT_USAGE
    assert cli.main(["launch"]) == cli.EXIT_USAGE
    assert cli.main(["--help"]) == 0
    assert cli.main(["generate"]) == cli.EXIT_USAGE


def test_ablate_tables(work, tmp_path):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", str(work / "tiny.cfg"), "--data", str(work / "data"),
                     "--out", str(out)]) == 0
    regions = read_csv(out / "regions.csv")
    assert [r[0] for r in regions] == ["arm", "baseline", "attention", "center"]
    assert [r[0] for r in read_csv(out / "parts.csv")] == ["parts", "0", "1"]
    reward = read_csv(out / "reward.csv")
    assert [r[0] for r in reward[1:]] == ["greedy", "delayed"]
    assert (out / "localization.csv").exists()
    assert (out / "runs" / "attention_T2_greedy" / "final.fcan").exists()
