"""Controlled sweeps over query count, embedding source and augmentation.

Every run in a sweep shares the dataset, the model seed and the training
seed, so rows differ only in the swept setting.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, EncoderConfig, PseudoEncoder
from .errors import ConfigError, UndefinedCorrelationError
from .qformer import EmbeddingMode, Model, ModelConfig, init_model
from .training import TrainConfig, dataset_embeddings, evaluate, predict, train

AXES = ("queries", "embedding", "augmentation")
QUERY_COUNTS = (1, 2, 3, 4, 32)
EMBEDDING_MODES = (EmbeddingMode.CLS, EmbeddingMode.CLS_P, EmbeddingMode.LQ)
AUGMENTATIONS = (("None", False, False), ("HF", True, False), ("RC", False, True),
                 ("HF + RC", True, True))


@dataclass
class AblationTable:
    axis: str
    columns: list[str]
    rows: list[list] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    def to_text(self) -> str:
        cells = [self.columns] + [[_fmt(v, 4) for v in row] for row in self.rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(self.columns))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def _fmt(v, digits: int | None = None) -> str:
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "undefined"
        return f"{v:.{digits}f}" if digits else repr(v)
    return str(v)


def _score(model: Model, test_set: Dataset, encoder: PseudoEncoder | None,
           padding: bool = False) -> tuple[float, float]:
    try:
        res = evaluate(model, test_set, encoder, padding)
    except UndefinedCorrelationError:
        return math.nan, math.nan
    return res.srcc, res.plcc


def patch_sensitivity(model: Model, embeddings: np.ndarray, seed: int = 0) -> float:
    """Max change in predicted DOS when every patch row (not CLS) is perturbed."""
    rng = np.random.default_rng(seed)
    perturbed = embeddings.copy()
    perturbed[:, 1:, :] += rng.normal(size=perturbed[:, 1:, :].shape)
    return float(np.abs(predict(model, perturbed) - predict(model, embeddings)).max())


def sweep_queries(train_set, test_set, model_cfg: ModelConfig, train_cfg: TrainConfig,
                  encoder=None, counts=QUERY_COUNTS) -> AblationTable:
    table = AblationTable("queries", ["M", "srcc", "plcc"])
    for m in counts:
        cfg = replace(model_cfg, m=m, mode=EmbeddingMode.LQ)
        model = train(init_model(cfg), train_set, train_cfg, encoder=encoder).model
        table.rows.append([m, *_score(model, test_set, encoder, train_cfg.padding)])
    return table


def sweep_embedding(train_set, test_set, model_cfg: ModelConfig, train_cfg: TrainConfig,
                    encoder=None, modes=EMBEDDING_MODES) -> AblationTable:
    table = AblationTable("embedding", ["embeddings", "srcc", "plcc", "patch_sensitivity"])
    test_emb = dataset_embeddings(test_set, encoder, train_cfg.padding)
    for mode in modes:
        cfg = replace(model_cfg, mode=EmbeddingMode(mode))
        model = train(init_model(cfg), train_set, train_cfg, encoder=encoder).model
        srcc_, plcc_ = _score(model, test_set, encoder, train_cfg.padding)
        table.rows.append([EmbeddingMode(mode).value, srcc_, plcc_,
                           patch_sensitivity(model, test_emb, train_cfg.seed)])
    return table


def sweep_augmentation(train_set, test_set, model_cfg: ModelConfig, train_cfg: TrainConfig,
                       encoder) -> AblationTable:
    if train_set.images is None or encoder is None:
        raise ConfigError("the augmentation sweep needs image data and an encoder")
    table = AblationTable("augmentation", ["padding", "augmentation", "srcc", "plcc"])
    for padding in (True, False):
        for label, hf, rc in AUGMENTATIONS:
            cfg = replace(train_cfg, hf=hf, rc=rc, padding=padding)
            model = train(init_model(model_cfg), train_set, cfg, encoder=encoder).model
            table.rows.append([padding, label, *_score(model, test_set, encoder, padding)])
    return table


def run_ablation(axis: str, train_set: Dataset, test_set: Dataset, model_cfg: ModelConfig,
                 train_cfg: TrainConfig, encoder_cfg: EncoderConfig | None) -> AblationTable:
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")
    encoder = PseudoEncoder(encoder_cfg) if encoder_cfg and train_set.images is not None else None
    if axis == "queries":
        return sweep_queries(train_set, test_set, model_cfg, train_cfg, encoder)
    if axis == "embedding":
        return sweep_embedding(train_set, test_set, model_cfg, train_cfg, encoder)
    return sweep_augmentation(train_set, test_set, model_cfg, train_cfg, encoder)
