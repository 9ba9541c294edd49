"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line; conftest prints them in the terminal summary.
"""

import contextlib
import csv
import io
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from aesq import training
from aesq.cli import main
from aesq.data import (
    EncoderConfig,
    PseudoEncoder,
    SyntheticConfig,
    dos_to_mos,
    gen_synthetic,
    read_embeddings,
    read_images,
    validate_dos,
    write_embeddings,
    write_images,
)
from aesq.errors import FormatError
from aesq.gradcheck import TOLERANCE, run_gradcheck
from aesq.metrics import emd_loss
from aesq.qformer import EmbeddingMode, ModelConfig, aesthetic_embedding, forward, init_model, qformer_forward
from aesq.tensor import Tensor
from aesq.training import PRESETS, Trainer, TrainConfig, load_checkpoint, lr_at_epoch, save_checkpoint, train

RESULTS: dict[int, str] = {}

ENC = EncoderConfig(width=16, patch=8, hv=12)
MODEL = ModelConfig(m=2, hq=8, hv=12, num_blocks=2, num_heads=2, k=10, n_patches=4, seed=1)


@contextlib.contextmanager
def criterion(n, desc):
    try:
        yield
    except BaseException:
        RESULTS[n] = f"FAIL criterion {n}: {desc}"
        print(RESULTS[n])
        raise
    RESULTS[n] = f"PASS criterion {n}: {desc}"
    print(RESULTS[n])


def _cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("small")
    assert _cli("gen-data", "--n", 160, "--test-n", 80, "--width", 16, "--out", d)[0] == 0
    return d


def test_criterion_1_gradient_suite():
    with criterion(1, "gradient suite within 1e-4 relative in under 60 s"):
        t0 = time.perf_counter()
        code, out, _ = _cli("gradcheck")
        elapsed = time.perf_counter() - t0
        assert code == 0, out
        assert elapsed < 60, f"{elapsed:.1f}s"
        results = run_gradcheck(seed=0, instances=5)
        assert all(r.passed and r.max_rel_error < TOLERANCE for r in results)
        assert TOLERANCE == 1e-4


def test_criterion_2_emd_metric_properties():
    with criterion(2, "EMD identity, symmetry, non-negativity, triangle; hand value"):
        rng = np.random.default_rng(2024)
        a, b, c = (rng.dirichlet(np.ones(10), size=1000) for _ in range(3))
        ab, ba, bc, ac = emd_loss(a, b), emd_loss(b, a), emd_loss(b, c), emd_loss(a, c)
        assert np.all(emd_loss(a, a) == 0.0)
        np.testing.assert_array_equal(ab, ba)
        assert np.all(ab >= 0)
        assert np.all(ac <= ab + bc + 1e-15)
        v = emd_loss([1.0, 0.0], [0.0, 1.0])
        assert abs(v - math.sqrt(0.5)) < 1e-9
        assert round(v, 6) == 0.707107


def test_criterion_3_dos_mos():
    with criterion(3, "one-hot bin 7 gives 7.0, uniform gives 5.5, generated DOS validate"):
        one_hot = np.zeros(10)
        one_hot[6] = 1.0
        assert dos_to_mos(one_hot) == 7.0
        assert abs(dos_to_mos(np.full(10, 0.1)) - 5.5) < 1e-12
        ds = gen_synthetic(500, SyntheticConfig(width=16), seed=3)
        for row in ds.dos:
            validate_dos(row)


def test_criterion_4_architecture_contracts():
    with criterion(4, "cross-attention on even blocks, query-order invariance, valid DOS"):
        rng = np.random.default_rng(4)
        for blocks in (2, 4, 6):
            model = init_model(ModelConfig(num_blocks=blocks, n_patches=4))
            trace = []
            forward(model, rng.normal(size=(5, model.config.hv)), trace)
            assert trace == list(range(0, blocks, 2)) and len(trace) == blocks // 2

        cfg = ModelConfig(m=4, hq=8, hv=6, num_blocks=2, num_heads=2, k=10, n_patches=4)
        for _ in range(20):
            model = init_model(replace(cfg, seed=int(rng.integers(1 << 30))))
            for p in model.parameters():
                p.data = p.data + rng.normal(0, 0.3, size=p.shape)
            e_v = rng.normal(size=(1 + cfg.n_patches, cfg.hv))
            pooled = aesthetic_embedding(qformer_forward(model, e_v), None, "LQ").data
            model["q"].data = model["q"].data[rng.permutation(cfg.m)].copy()
            permuted = aesthetic_embedding(qformer_forward(model, e_v), None, "LQ").data
            assert np.abs(pooled - permuted).max() <= 1e-9
            d = forward(model, rng.normal(size=(8, 1 + cfg.n_patches, cfg.hv)) * 10).data
            assert np.all(d >= 0) and np.abs(d.sum(axis=1) - 1).max() <= 1e-12


def test_criterion_5_frozen_encoder(monkeypatch):
    with criterion(5, "encoder bit-identical after training, no gradient on e_v"):
        seen = []
        real_forward = training.forward

        def spy(model, e_v, trace=None):
            seen.append(e_v)
            return real_forward(model, e_v, trace)

        monkeypatch.setattr(training, "forward", spy)
        enc = PseudoEncoder(ENC)
        before = enc.digest()
        tr = gen_synthetic(32, SyntheticConfig(width=16), seed=5)
        cfg = TrainConfig(batch_size=8, epochs=2, base_lr=1e-3, hf=True, rc=True,
                          rc_resize=20, rc_crop=16)
        train(init_model(MODEL), tr, cfg, encoder=enc)
        assert enc.digest() == before == PseudoEncoder(ENC).digest()
        assert seen and all(isinstance(e, Tensor) for e in seen)
        assert all(e.grad is None and not e.requires_grad for e in seen)


def test_criterion_6_schedule_fidelity():
    with criterion(6, "paper-shape preset lr is 3e-5 * 0.1^floor(e/2) for epochs 0-9"):
        cfg = PRESETS["paper-shape"][2]
        for e in range(10):
            assert lr_at_epoch(cfg, e) == 3e-5 * 0.1 ** (e // 2)
        code, out, _ = _cli("train", "--lr-schedule", "--preset", "paper-shape")
        assert code == 0
        rows = [line.split(",") for line in out.splitlines()[1:]]
        assert [float(lr) for _, lr in rows] == [3e-5 * 0.1 ** (e // 2) for e in range(10)]


def test_criterion_7_end_to_end_learnability(tmp_path):
    with criterion(7, "toy preset reaches SRCC and PLCC >= 0.7 in 10 epochs under 10 min"):
        model_cfg, _, train_cfg = PRESETS["toy"]
        assert (model_cfg.m, model_cfg.hq, model_cfg.num_blocks, model_cfg.k) == (2, 16, 4, 10)
        assert train_cfg.epochs == 10
        t0 = time.perf_counter()
        assert _cli("gen-data", "--n", 2000, "--test-n", 500, "--out", tmp_path / "d")[0] == 0
        code, _, err = _cli("train", "--data", tmp_path / "d/train.aqi",
                            "--eval-data", tmp_path / "d/test.aqi", "--out", tmp_path / "r")
        elapsed = time.perf_counter() - t0
        assert code == 0, err
        ckpt = load_checkpoint(tmp_path / "r/model.aqck")
        assert ckpt.model_config.n_patches == 16
        with open(tmp_path / "r/log.csv") as fh:
            final = list(csv.DictReader(fh))[-1]
        assert int(final["epoch"]) == 9
        assert float(final["srcc"]) >= 0.7, final
        assert float(final["plcc"]) >= 0.7, final
        assert elapsed < 600, f"{elapsed:.1f}s"


def test_criterion_8_overfit_single_batch():
    with criterion(8, "single-sample batch, 50 epochs, mean EMD below 0.02"):
        model_cfg, enc_cfg, _ = PRESETS["toy"]
        batch = gen_synthetic(1, seed=8).with_embeddings(PseudoEncoder(enc_cfg))
        cfg = TrainConfig(batch_size=16, epochs=50, base_lr=2e-3, decay_factor=1.0)
        losses = [r.train_loss for r in train(init_model(model_cfg), batch, cfg).log]
        assert losses[-1] < 0.02, f"mean EMD {losses[-1]:.4f}"
        assert sum(b > a for a, b in zip(losses, losses[1:])) <= 2


def test_criterion_9_ablation_harness(small_data, tmp_path):
    with criterion(9, "query sweep over M=1,2,3,4,32 and CLS vs LQ patch sensitivity"):
        common = ["--data", small_data / "train.aqi", "--eval-data", small_data / "test.aqi",
                  "--out", tmp_path]
        code, _, err = _cli("ablate", "--axis", "queries", *common)
        assert code == 0, err
        with open(tmp_path / "ablation_queries.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["M", "srcc", "plcc"]
        assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4, 32]
        for r in rows[1:]:
            assert len(r) == 3 and all(-1 <= float(v) <= 1 for v in r[1:])

        code, _, err = _cli("ablate", "--axis", "embedding", *common)
        assert code == 0, err
        with open(tmp_path / "ablation_embedding.csv") as fh:
            table = {r["embeddings"]: r for r in csv.DictReader(fh)}
        assert set(table) == {m.value for m in EmbeddingMode}
        assert float(table["CLS"]["patch_sensitivity"]) <= 1e-12
        assert float(table["LQ"]["patch_sensitivity"]) > 1e-3


def test_criterion_10_determinism_and_persistence(small_data, tmp_path):
    with criterion(10, "bitwise logs, bitwise resume, exact file round-trips, corrupt headers rejected"):
        args = ["train", "--data", small_data / "train.aqi", "--eval-data",
                small_data / "test.aqi", "--epochs", 4, "--hf"]
        logs = []
        for name in ("a", "b"):
            assert _cli(*args, "--out", tmp_path / name)[0] == 0
            logs.append((tmp_path / name / "log.csv").read_bytes())
        assert logs[0] == logs[1]
        assert ((tmp_path / "a/model.aqck").read_bytes()
                == (tmp_path / "b/model.aqck").read_bytes())

        tr = read_images(small_data / "train.aqi")
        te = read_images(small_data / "test.aqi", "test")
        enc = PseudoEncoder(ENC)
        cfg = TrainConfig(batch_size=16, epochs=4, base_lr=1e-3, decay_every_epochs=2, hf=True)
        full = train(init_model(MODEL), tr, cfg, te, enc)
        first = Trainer(init_model(MODEL), tr, replace(cfg, epochs=2), te, enc)
        first.run()
        save_checkpoint(tmp_path / "half.aqck", first.checkpoint())
        second = Trainer.resume(load_checkpoint(tmp_path / "half.aqck"), tr, te, cfg)
        second.run()
        assert [r.as_row() for r in first.log + second.log] == [r.as_row() for r in full.log]
        for name, p in full.model.params.items():
            assert np.array_equal(p.data, second.model.params[name].data)

        emb = enc.encode(tr.images).astype(np.float32).astype(np.float64)
        write_embeddings(tmp_path / "e.aqe", emb, tr.dos)
        back = read_embeddings(tmp_path / "e.aqe")
        assert np.array_equal(back.embeddings, emb) and np.array_equal(back.dos, tr.dos)
        write_images(tmp_path / "i.aqi", tr.images, tr.dos)
        assert (tmp_path / "i.aqi").read_bytes() == (small_data / "train.aqi").read_bytes()
        again = tmp_path / "again.aqck"
        save_checkpoint(again, load_checkpoint(tmp_path / "half.aqck"))
        assert again.read_bytes() == (tmp_path / "half.aqck").read_bytes()

        for path, reader in ((tmp_path / "e.aqe", read_embeddings),
                             (tmp_path / "i.aqi", read_images),
                             (tmp_path / "half.aqck", load_checkpoint)):
            good = path.read_bytes()
            for bad in (b"ZZZZ" + good[4:], good[:3] + b"9" + good[4:], good[:6]):
                path.write_bytes(bad)
                with pytest.raises(FormatError):
                    reader(path)
            path.write_bytes(good)
