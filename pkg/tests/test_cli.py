import json

import numpy as np
import pytest

from aesq.cli import main
from aesq.data import dos_to_mos, read_embeddings, read_images
from aesq.qformer import ModelConfig, init_model
from aesq.training import Checkpoint, save_checkpoint


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--n", "60", "--test-n", "30", "--seed", "3", "--out", str(d),
                 "--embeddings"]) == 0
    return d


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(data_dir / "train.aqi"), "--eval-data",
                 str(data_dir / "test.aqi"), "--epochs", "2", "--out", str(out)]) == 0
    return out


# -- gen-data


def test_gen_data_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "gen-data", "--n", 100, "--seed", 7, "--out", tmp_path / name)[0] == 0
    assert (tmp_path / "a/train.aqi").read_bytes() == (tmp_path / "b/train.aqi").read_bytes()


def test_gen_data_rejects_zero(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--n", 0, "--out", tmp_path)
    assert code == 2 and "--n" in err


def test_gen_data_usage_error(capsys):
    code, _, err = run(capsys, "gen-data", "--n", "many", "--out", "x")
    assert code == 2 and "usage" in err


def test_generated_files_read_back(data_dir):
    emb = read_embeddings(data_dir / "train.aqe")
    img = read_images(data_dir / "train.aqi")
    assert len(emb) == len(img) == 60
    np.testing.assert_array_equal(emb.dos, img.dos)
    assert json.loads((data_dir / "manifest.json").read_text())["command"] == "gen-data"


# -- train


def test_train_outputs(trained):
    assert (trained / "model.aqck").exists()
    log = (trained / "log.csv").read_text().splitlines()
    assert log[0] == "epoch,lr,train_loss,srcc,plcc,eval_emd"
    assert len(log) == 3
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["config"]["model"]["m"] == 2
    assert manifest["seeds"] == {"model": 0, "train": 0}


def test_rerun_reproduces_log(trained, tmp_path, capsys):
    code, _, _ = run(capsys, "rerun", trained / "manifest.json", "--out", tmp_path / "again")
    assert code == 0
    assert (tmp_path / "again/log.csv").read_bytes() == (trained / "log.csv").read_bytes()
    assert (tmp_path / "again/model.aqck").read_bytes() == (trained / "model.aqck").read_bytes()


def test_seed_env_overrides_flag(data_dir, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("AESQ_SEED", "5")
    code, _, _ = run(capsys, "train", "--data", data_dir / "train.aqe", "--epochs", 1,
                     "--seed", 1, "--out", tmp_path)
    assert code == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seeds"]["train"] == 5
    assert manifest["argv"][manifest["argv"].index("--seed") + 1] == "5"


def test_lr_schedule_flag(capsys):
    code, out, _ = run(capsys, "train", "--lr-schedule", "--preset", "paper-shape")
    assert code == 0
    rows = dict(line.split(",") for line in out.splitlines()[1:])
    assert float(rows["0"]) == 3e-5 and float(rows["1"]) == 3e-5
    assert float(rows["2"]) == 3e-6


def test_train_missing_file(capsys):
    code, _, err = run(capsys, "train", "--data", "/nonexistent/x.aqi")
    assert code == 1 and "No such file" in err


def test_train_config_violation(data_dir, capsys):
    code, _, err = run(capsys, "train", "--data", data_dir / "train.aqi", "--blocks", 3)
    assert code == 2 and "even" in err


def test_train_corrupt_file(tmp_path, capsys):
    (tmp_path / "bad.aqi").write_bytes(b"AQI1\x01")
    code, _, err = run(capsys, "train", "--data", tmp_path / "bad.aqi")
    assert code == 1 and "byte offset" in err


# -- eval / predict


def test_eval_matches_final_log_row(trained, data_dir, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", trained / "model.aqck",
                       "--data", data_dir / "test.aqi")
    assert code == 0
    srcc_, plcc_, emd_ = out.splitlines()[-1].split(",")
    final = (trained / "log.csv").read_text().splitlines()[-1].split(",")
    assert [srcc_, plcc_, emd_] == final[3:]
    assert run(capsys, "eval", "--checkpoint", trained / "model.aqck",
               "--data", data_dir / "test.aqi")[1] == out


def test_eval_k_mismatch(trained, tmp_path, capsys):
    assert run(capsys, "gen-data", "--n", 10, "--k", 5, "--out", tmp_path)[0] == 0
    code, _, err = run(capsys, "eval", "--checkpoint", trained / "model.aqck",
                       "--data", tmp_path / "train.aqi")
    assert code == 1 and "K=5" in err


def test_predict_output_is_consistent(trained, data_dir, capsys):
    code, out, _ = run(capsys, "predict", "--checkpoint", trained / "model.aqck",
                       "--data", data_dir / "test.aqi", "--index", 4)
    assert code == 0
    lines = out.splitlines()
    dos = np.array([float(line.split(",")[1]) for line in lines[1:11]])
    mos = float(lines[11].split(",")[1])
    assert abs(dos.sum() - 1.0) < 1e-9
    assert mos == pytest.approx(dos_to_mos(dos / dos.sum()), abs=1e-12)


def test_predict_zero_head_is_uniform(tmp_path, capsys):
    cfg = ModelConfig(hv=4, n_patches=2)
    model = init_model(cfg)
    model["head.w"].data[...] = 0.0
    save_checkpoint(tmp_path / "z.aqck", Checkpoint.from_model(model))
    np.save(tmp_path / "e.npy", np.random.default_rng(0).normal(size=(3, 4)))
    code, out, _ = run(capsys, "predict", "--checkpoint", tmp_path / "z.aqck",
                       "--input", tmp_path / "e.npy")
    assert code == 0
    lines = out.splitlines()
    assert [float(line.split(",")[1]) for line in lines[1:11]] == [0.1] * 10
    assert float(lines[11].split(",")[1]) == pytest.approx(5.5, abs=1e-12)


def test_predict_malformed_input(trained, tmp_path, capsys):
    (tmp_path / "bad.npy").write_bytes(b"not numpy")
    code, _, _ = run(capsys, "predict", "--checkpoint", trained / "model.aqck",
                     "--input", tmp_path / "bad.npy")
    assert code == 1
    np.save(tmp_path / "wrong.npy", np.zeros((3, 5)))
    code, _, err = run(capsys, "predict", "--checkpoint", trained / "model.aqck",
                       "--input", tmp_path / "wrong.npy")
    assert code == 1 and "shape" in err


# -- ablate / gradcheck


def test_ablate_unknown_axis(data_dir, capsys):
    code, _, _ = run(capsys, "ablate", "--axis", "depth", "--data", data_dir / "train.aqi",
                     "--eval-data", data_dir / "test.aqi")
    assert code == 2


def test_ablate_augmentation_table(data_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "ablate", "--axis", "augmentation", "--data",
                       data_dir / "train.aqi", "--eval-data", data_dir / "test.aqi",
                       "--epochs", 1, "--out", tmp_path)
    assert code == 0
    rows = (tmp_path / "ablation_augmentation.csv").read_text().splitlines()
    assert rows[0] == "padding,augmentation,srcc,plcc"
    assert [tuple(r.split(",")[:2]) for r in rows[1:]] == [
        (p, a) for p in ("True", "False") for a in ("None", "HF", "RC", "HF + RC")]
    assert "augmentation" in out


def test_gradcheck_report(capsys):
    code, out, _ = run(capsys, "gradcheck", "--instances", 2)
    assert code == 0
    assert "max_rel_error" in out and "full_model" in out


def test_gradcheck_fault_injection(capsys):
    code, _, err = run(capsys, "gradcheck", "--instances", 2, "--corrupt", "softmax")
    assert code == 1 and "softmax" in err
