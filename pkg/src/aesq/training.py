"""Adam with step-decay learning rate, the epoch/batch loop, evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset, EncoderConfig, PseudoEncoder, dos_to_mos, hflip, prepare_image, resize_bilinear
from .errors import (
    AesqError,
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    UndefinedCorrelationError,
    ValidationError,
)
from .metrics import TRAIN_EPS, emd_loss, plcc, srcc
from .qformer import Model, ModelConfig, forward
from .tensor import Tensor, no_grad, tmean

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AQCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 10
    base_lr: float = 1e-3
    decay_factor: float = 0.1
    decay_every_epochs: int = 2
    seed: int = 0
    hf: bool = False
    hf_p: float = 0.5
    rc: bool = False
    rc_resize: int = 39
    rc_crop: int = 32
    padding: bool = False

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_every_epochs < 1:
            raise ConfigError("decay_every_epochs must be >= 1")
        if not 0 <= self.hf_p <= 1:
            raise ConfigError(f"hf_p must be a probability, got {self.hf_p}")
        if self.rc and self.rc_crop > self.rc_resize:
            raise ConfigError(f"rc_crop {self.rc_crop} exceeds rc_resize {self.rc_resize}")

    def to_dict(self) -> dict:
        return asdict(self)


# Presets: model dims, encoder dims and training protocol.
PRESETS: dict[str, tuple[ModelConfig, EncoderConfig, TrainConfig]] = {
    "toy": (ModelConfig(), EncoderConfig(), TrainConfig(decay_factor=0.5, decay_every_epochs=4)),
    "paper-shape": (
        ModelConfig(m=2, hq=768, hv=1408, num_blocks=12, num_heads=12, ffn_mult=4, k=10,
                    n_patches=256),
        EncoderConfig(width=224, patch=14, channels=3, hv=1408),
        TrainConfig(batch_size=128, epochs=10, base_lr=3e-5, hf=True, hf_p=0.5,
                    rc_resize=272, rc_crop=224),
    ),
}


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """``base_lr * decay_factor ** (epoch // decay_every_epochs)``."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return cfg.base_lr * cfg.decay_factor ** (epoch // cfg.decay_every_epochs)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor]) -> OptimizerState:
        return cls(
            m={k: np.zeros(p.shape) for k, p in params.items()},
            v={k: np.zeros(p.shape) for k, p in params.items()},
        )


def adam_step(params: Mapping[str, Tensor], state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update, in place, using each tensor's ``grad``."""
    if not lr > 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    for name, p in params.items():
        if not p.requires_grad:
            raise ContractError(f"{name} is frozen and cannot be optimised")
        if name not in state.m or state.m[name].shape != p.shape:
            raise ContractError(f"optimizer state does not match parameter {name} {p.shape}")
        if p.grad is not None and p.grad.shape != p.shape:
            raise ContractError(f"gradient shape {p.grad.shape} does not match {name} {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class EvalResult:
    srcc: float
    plcc: float
    emd: float


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    srcc: float = math.nan
    plcc: float = math.nan
    eval_emd: float = math.nan

    def as_row(self) -> list:
        return [self.epoch, self.lr, self.train_loss, self.srcc, self.plcc, self.eval_emd]


LOG_COLUMNS = ["epoch", "lr", "train_loss", "srcc", "plcc", "eval_emd"]


def dataset_embeddings(dataset: Dataset, encoder: PseudoEncoder | None,
                       padding: bool = False) -> np.ndarray:
    if dataset.images is not None and encoder is not None:
        size = encoder.config.width
        return encoder.encode(prepare_image(dataset.images, size, padding))
    if dataset.embeddings is not None:
        return dataset.embeddings
    raise ContractError("dataset has images but no encoder was supplied")


def predict(model: Model, embeddings: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Predicted DOS for every row of ``embeddings`` (no graph recorded)."""
    out = []
    with no_grad():
        for start in range(0, len(embeddings), batch_size):
            out.append(forward(model, Tensor(embeddings[start : start + batch_size])).data)
    return np.concatenate(out, axis=0)


def evaluate(model: Model, dataset: Dataset, encoder: PseudoEncoder | None = None,
             padding: bool = False) -> EvalResult:
    """SRCC and PLCC between predicted and true MOS, plus mean EMD."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    if dataset.k != model.config.k:
        raise DimensionError(f"dataset has K={dataset.k}, model predicts K={model.config.k}")
    pred = predict(model, dataset_embeddings(dataset, encoder, padding))
    pred_mos = dos_to_mos(pred)
    true_mos = dataset.mos
    return EvalResult(
        srcc=srcc(pred_mos, true_mos),
        plcc=plcc(pred_mos, true_mos),
        emd=float(np.mean(emd_loss(dataset.dos, pred))),
    )


class _AugmentedSource:
    """Produces each epoch's training embeddings, applying HF / RC per sample."""

    def __init__(self, dataset: Dataset, encoder: PseudoEncoder | None, cfg: TrainConfig):
        self.cfg = cfg
        self.augment = cfg.hf or cfg.rc
        if self.augment and (dataset.images is None or encoder is None):
            raise ContractError("augmentation needs an image dataset and an encoder")
        self.encoder = encoder
        if dataset.images is not None and encoder is not None:
            self.images = prepare_image(dataset.images, encoder.config.width, cfg.padding)
            self.plain = encoder.encode(self.images)
        else:
            self.images = None
            self.plain = dataset_embeddings(dataset, encoder)
        self._flipped = None
        self._resized = None

    def flipped(self) -> np.ndarray:
        if self._flipped is None:
            self._flipped = self.encoder.encode(hflip(self.images))
        return self._flipped

    def resized(self) -> tuple[np.ndarray, np.ndarray]:
        if self._resized is None:
            r = resize_bilinear(self.images, self.cfg.rc_resize, self.cfg.rc_resize)
            self._resized = (r, hflip(r))
        return self._resized

    def draw(self, rng: np.random.Generator, n: int):
        """Per-epoch random choices; consumed from ``rng`` in a fixed order."""
        flips = rng.random(n) < self.cfg.hf_p if self.cfg.hf else np.zeros(n, dtype=bool)
        offsets = None
        if self.cfg.rc:
            offsets = rng.integers(0, self.cfg.rc_resize - self.cfg.rc_crop + 1, size=(n, 2))
        return flips, offsets

    def batch(self, idx: np.ndarray, flips: np.ndarray, offsets) -> np.ndarray:
        if not self.augment:
            return self.plain[idx]
        if offsets is None:
            return np.where(flips[idx, None, None], self.flipped()[idx], self.plain[idx])
        resized, resized_flipped = self.resized()
        c = self.cfg.rc_crop
        crops = np.empty((len(idx), c, c, resized.shape[-1]))
        for j, i in enumerate(idx):
            src = resized_flipped[i] if flips[i] else resized[i]
            oy, ox = offsets[i]
            crops[j] = src[oy : oy + c, ox : ox + c]
        return self.encoder.encode(crops)


class Trainer:
    """Stateful training run; resumable from a :class:`Checkpoint`."""

    def __init__(
        self,
        model: Model,
        train_set: Dataset,
        cfg: TrainConfig,
        eval_set: Dataset | None = None,
        encoder: PseudoEncoder | None = None,
        opt_state: OptimizerState | None = None,
        rng: np.random.Generator | None = None,
        epoch: int = 0,
    ):
        cfg.validate()
        if len(train_set) == 0:
            raise ContractError("training set is empty")
        if train_set.k != model.config.k:
            raise DimensionError(f"dataset has K={train_set.k}, model predicts K={model.config.k}")
        self.model = model
        self.train_set = train_set
        self.eval_set = eval_set
        self.encoder = encoder
        self.cfg = cfg
        self.opt_state = opt_state or OptimizerState.for_params(model.params)
        self.rng = rng or np.random.default_rng(cfg.seed)
        self.epoch = epoch
        self.log: list[EpochLog] = []
        self._source = _AugmentedSource(train_set, encoder, cfg)

    def train_epoch(self) -> float:
        n = len(self.train_set)
        lr = lr_at_epoch(self.cfg, self.epoch)
        order = self.rng.permutation(n)
        flips, offsets = self._source.draw(self.rng, n)
        total = 0.0
        for b, start in enumerate(range(0, n, self.cfg.batch_size)):
            idx = order[start : start + self.cfg.batch_size]
            try:
                e_v = Tensor(self._source.batch(idx, flips, offsets))
                self.model.zero_grad()
                loss = tmean(emd_loss(self.train_set.dos[idx], forward(self.model, e_v),
                                      eps=TRAIN_EPS))
                loss.backward()
            except (DimensionError, ContractError, ValidationError) as exc:
                raise type(exc)(f"epoch {self.epoch} batch {b}: {exc}") from exc
            adam_step(self.model.params, self.opt_state, lr)
            total += loss.item() * len(idx)
        return total / n

    def run(self, on_epoch: Callable[[EpochLog], None] | None = None) -> list[EpochLog]:
        while self.epoch < self.cfg.epochs:
            lr = lr_at_epoch(self.cfg, self.epoch)
            train_loss = self.train_epoch()
            row = EpochLog(self.epoch, lr, train_loss)
            if self.eval_set is not None:
                row = self._with_eval(row)
            self.log.append(row)
            self.epoch += 1
            logger.info("epoch %d lr %.3g loss %.5f srcc %.4f plcc %.4f", row.epoch, row.lr,
                        row.train_loss, row.srcc, row.plcc)
            if on_epoch is not None:
                on_epoch(row)
        return self.log

    def _with_eval(self, row: EpochLog) -> EpochLog:
        try:
            res = evaluate(self.model, self.eval_set, self.encoder, self.cfg.padding)
        except UndefinedCorrelationError:
            logger.warning("epoch %d: predictions are constant, correlation undefined", row.epoch)
            pred = predict(self.model, dataset_embeddings(self.eval_set, self.encoder,
                                                          self.cfg.padding))
            return replace(row, eval_emd=float(np.mean(emd_loss(self.eval_set.dos, pred))))
        return replace(row, srcc=res.srcc, plcc=res.plcc, eval_emd=res.emd)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model_config=self.model.config,
            params=self.model.state_arrays(),
            encoder_config=self.encoder.config if self.encoder else None,
            train_config=self.cfg,
            opt_state=OptimizerState(
                m={k: v.copy() for k, v in self.opt_state.m.items()},
                v={k: v.copy() for k, v in self.opt_state.v.items()},
                t=self.opt_state.t, beta1=self.opt_state.beta1, beta2=self.opt_state.beta2,
                eps=self.opt_state.eps,
            ),
            epoch=self.epoch,
            rng_state=self.rng.bit_generator.state,
        )

    @classmethod
    def resume(cls, ckpt: Checkpoint, train_set: Dataset, eval_set: Dataset | None = None,
               cfg: TrainConfig | None = None) -> Trainer:
        cfg = cfg or ckpt.train_config
        if cfg is None:
            raise ContractError("checkpoint carries no training config")
        rng = np.random.default_rng()
        if ckpt.rng_state is not None:
            rng.bit_generator.state = ckpt.rng_state
        encoder = PseudoEncoder(ckpt.encoder_config) if ckpt.encoder_config else None
        return cls(ckpt.build_model(), train_set, cfg, eval_set, encoder, ckpt.opt_state, rng,
                   ckpt.epoch)


@dataclass
class TrainResult:
    model: Model
    log: list[EpochLog]
    trainer: Trainer

    @property
    def best_epoch(self) -> int | None:
        scored = [r for r in self.log if not math.isnan(r.srcc)]
        return max(scored, key=lambda r: r.srcc).epoch if scored else None


def train(model: Model, dataset: Dataset, cfg: TrainConfig, eval_set: Dataset | None = None,
          encoder: PseudoEncoder | None = None,
          on_epoch: Callable[[EpochLog], None] | None = None) -> TrainResult:
    """Train ``model`` in place on ``dataset``; returns it with the per-epoch log."""
    trainer = Trainer(model, dataset, cfg, eval_set, encoder)
    log = trainer.run(on_epoch)
    return TrainResult(model, log, trainer)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    encoder_config: EncoderConfig | None = None
    train_config: TrainConfig | None = None
    opt_state: OptimizerState | None = None
    epoch: int = 0
    rng_state: dict | None = None

    @classmethod
    def from_model(cls, model: Model, encoder: PseudoEncoder | None = None) -> Checkpoint:
        return cls(model.config, model.state_arrays(), encoder.config if encoder else None)

    def build_model(self) -> Model:
        from .qformer import init_model

        model = init_model(self.model_config)
        if list(self.params) != list(model.params):
            raise FormatError("checkpoint tensors do not match the model layout", 0)
        for name, arr in self.params.items():
            if arr.shape != model[name].shape:
                raise FormatError(f"tensor {name} has shape {arr.shape}, expected "
                                  f"{model[name].shape}", 0)
            model[name].data = arr.copy()
        return model


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    config = {
        "model": ckpt.model_config.to_dict(),
        "encoder": asdict(ckpt.encoder_config) if ckpt.encoder_config else None,
        "train": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "epoch": ckpt.epoch,
    }
    if ckpt.opt_state is not None:
        s = ckpt.opt_state
        config["adam"] = {"beta1": s.beta1, "beta2": s.beta2, "eps": s.eps}
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    blob = json.dumps(config, sort_keys=True).encode()
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(ckpt.params))]
    for name, arr in ckpt.params.items():
        raw = name.encode()
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.astype("<f8").tobytes()]
    if ckpt.opt_state is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts += [struct.pack("<B", 1), struct.pack("<Q", ckpt.opt_state.t)]
        for name in ckpt.params:
            parts.append(ckpt.opt_state.m[name].astype("<f8").tobytes())
            parts.append(ckpt.opt_state.v[name].astype("<f8").tobytes())
    rng_blob = json.dumps(ckpt.rng_state).encode() if ckpt.rng_state is not None else b""
    parts += [struct.pack("<I", len(rng_blob)), rng_blob]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", len(self.buf))
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def array(self, shape: tuple[int, ...], what: str) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic = r.take(4, "magic") if len(r.buf) >= 4 else r.buf
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    (version,) = r.unpack("<H", "version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (n,) = r.unpack("<I", "config length")
    start = r.pos
    try:
        config = json.loads(r.take(n, "config block"))
        model_cfg = ModelConfig.from_dict(config["model"])
        model_cfg.validate()
        enc_cfg = EncoderConfig(**config["encoder"]) if config.get("encoder") else None
        train_cfg = TrainConfig(**config["train"]) if config.get("train") else None
    except FormatError:
        raise
    except (ValueError, KeyError, TypeError, AesqError) as exc:
        raise FormatError(f"invalid config block: {exc}", start) from None
    (count,) = r.unpack("<I", "tensor count")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "tensor name length")
        name = r.take(name_len, "tensor name").decode()
        (ndim,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        params[name] = r.array(shape, f"data of {name}")
    (has_opt,) = r.unpack("<B", "optimizer flag")
    opt = None
    if has_opt:
        (t,) = r.unpack("<Q", "optimizer step")
        adam = config.get("adam", {})
        opt = OptimizerState(t=t, **adam)
        for name, arr in params.items():
            opt.m[name] = r.array(arr.shape, f"first moment of {name}").copy()
            opt.v[name] = r.array(arr.shape, f"second moment of {name}").copy()
    (rng_len,) = r.unpack("<I", "rng state length")
    rng_state = json.loads(r.take(rng_len, "rng state")) if rng_len else None
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after checkpoint", r.pos)
    return Checkpoint(model_cfg, {k: v.copy() for k, v in params.items()}, enc_cfg, train_cfg,
                      opt, config.get("epoch", 0), rng_state)
