import csv
import io
import json
import socket
import subprocess
import sys

import numpy as np
import pytest

from hitm import attack as atk
from hitm import detector as det
from hitm.cli import main, number

W = det.PINNED_WEIGHTS


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out)
    return code, out.getvalue()


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scenes")
    assert run("gen-scenes", "--family", 1, "--count", 3, "--seed", 5, "--out", d)[0] == 0
    return d


def test_number_accepts_fractions():
    assert number("8/255") == 8 / 255
    assert number("0.5") == 0.5


def test_gen_scenes_is_deterministic(scene_dir, tmp_path):
    assert run("gen-scenes", "--family", 1, "--count", 3, "--seed", 5, "--out", tmp_path)[0] == 0
    for name in ("frame_0000.ppm", "frame_0002.ppm", "truth.json"):
        assert (tmp_path / name).read_bytes() == (scene_dir / name).read_bytes()
    truth = json.loads((tmp_path / "truth.json").read_text())
    assert len(truth) == 3 and {"file", "family", "objects"} <= set(truth[0])


def test_train_writes_weights(scene_dir, tmp_path):
    code, out = run("train", "--scenes", scene_dir, "--epochs", 2, "--lr", "1e-2", "--out", tmp_path / "w.pcbw")
    assert code == 0
    assert out.splitlines()[0].startswith("epoch 1 loss ")
    det.load_weights(tmp_path / "w.pcbw")


def test_attack_then_eval_reproduces_final_row(scene_dir, tmp_path):
    img = scene_dir / "frame_0001.ppm"
    code, _ = run("attack", "--weights", W, "--image", img, "--loss", "pcb", "--mode", "fab",
                  "--eps", "8/255", "--alpha", "8/255", "--decay", 0.98, "--iters", 15,
                  "--init", "zero", "--out", tmp_path / "d.pcbu", "--metrics", tmp_path / "a.csv")
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert len(rows) == 15 and rows[-1]["iteration"] == "15"
    code, _ = run("eval", "--weights", W, "--image", img, "--uap", tmp_path / "d.pcbu",
                  "--metrics", tmp_path / "e.csv")
    assert code == 0
    (ev,) = list(csv.DictReader(open(tmp_path / "e.csv")))
    assert int(ev["num_boxes"]) == int(rows[-1]["num_boxes"])
    assert abs(float(ev["adv_loss"]) - float(rows[-1]["adv_loss"])) <= 1e-9
    # zero init: per-step variations telescope to the clean-vs-attacked value
    total = sum(float(r["mean_conf_variation"]) for r in rows)
    assert abs(float(ev["mean_conf_variation"]) - total) <= 1e-9


def test_train_uap_and_eval_folder(scene_dir, tmp_path):
    code, out = run("train-uap", "--weights", W, "--scenes", scene_dir, "--iters", 3,
                    "--out", tmp_path / "u.pcbu", "--metrics", tmp_path / "u.csv")
    assert code == 0 and "epochs=3" in out
    pert = atk.load_perturbation(tmp_path / "u.pcbu")
    assert np.max(np.abs(pert.delta)) <= 8 / 255
    code, out = run("eval", "--weights", W, "--scenes", scene_dir, "--uap", tmp_path / "u.pcbu",
                    "--metrics", tmp_path / "e.csv")
    assert code == 0 and "mAP clean=" in out
    assert len(list(csv.DictReader(open(tmp_path / "e.csv")))) == 3


def test_config_file_sets_defaults_and_rejects_unknown_keys(scene_dir, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"attack": {"iterations": 4, "loss": "pc"}}))
    img = scene_dir / "frame_0000.ppm"
    code, out = run("--config", cfg, "attack", "--weights", W, "--image", img, "--out", tmp_path / "d.pcbu")
    assert code == 0 and "iterations=4" in out
    assert atk.load_perturbation(tmp_path / "d.pcbu").config.loss == "pc"
    cfg.write_text(json.dumps({"attack": {"iterations": 4, "colour": 1}}))
    assert run("--config", cfg, "attack", "--weights", W, "--image", img, "--out", tmp_path / "x")[0] == 1
    cfg.write_text(json.dumps({"extras": {}}))
    assert run("--config", cfg, "gen-scenes", "--out", tmp_path / "s")[0] == 1
    cfg.write_text(json.dumps({"attack": {"epsilon": -1}}))
    assert run("--config", cfg, "gen-scenes", "--out", tmp_path / "s")[0] == 1


def test_exit_codes(scene_dir, tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["attack", "--weights", W])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["attack", "--weights", W, "--image", "x", "--out", "y", "--loss", "l2"])
    assert info.value.code == 2
    assert run("attack", "--weights", tmp_path / "missing.pcbw", "--image", scene_dir / "frame_0000.ppm",
               "--out", tmp_path / "d")[0] == 1
    assert run("eval", "--weights", W, "--uap", tmp_path / "none.pcbu")[0] == 2
    assert run("stream", "source")[0] == 2


def test_stream_roles_over_pipes(scene_dir, tmp_path):
    uap = tmp_path / "zero.pcbu"
    atk.save_perturbation(atk.init_perturbation(atk.AttackConfig()), uap)
    py = [sys.executable, "-m", "hitm"]
    src = subprocess.Popen(py + ["stream", "source", "--scenes", str(scene_dir)],
                           stdout=subprocess.PIPE, stderr=subprocess.DEVNULL)
    inj = subprocess.Popen(py + ["stream", "inject", "--uap", str(uap)], stdin=src.stdout,
                           stdout=subprocess.PIPE, stderr=subprocess.DEVNULL)
    src.stdout.close()
    sink = subprocess.run(py + ["stream", "sink", "--weights", W], stdin=inj.stdout,
                          capture_output=True, text=True, timeout=120)
    inj.stdout.close()
    assert src.wait(60) == 0 and inj.wait(60) == 0 and sink.returncode == 0
    lines = sink.stdout.splitlines()
    assert [ln.split()[1] for ln in lines[:-1]] == ["0", "1", "2"]
    assert lines[-1].startswith("FPS report: frames=3")


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_stream_roles_over_tcp(scene_dir):
    py = [sys.executable, "-m", "hitm"]
    up, down = f"127.0.0.1:{free_port()}", f"127.0.0.1:{free_port()}"
    procs = []
    try:
        procs.append(subprocess.Popen(py + ["stream", "source", "--scenes", str(scene_dir), "--tcp", up],
                                      stderr=subprocess.DEVNULL))
        procs.append(subprocess.Popen(py + ["stream", "inject", "--online", "--weights", W, "--iters", "1",
                                            "--tcp", up, "--listen", down], stderr=subprocess.DEVNULL))
        sink = subprocess.run(py + ["stream", "sink", "--weights", W, "--tcp", down],
                              capture_output=True, text=True, timeout=120)
        assert [p.wait(60) for p in procs] == [0, 0] and sink.returncode == 0
        assert "frames=3" in sink.stdout.splitlines()[-1]
    finally:
        for p in procs:
            if p.poll() is None:
                p.kill()
