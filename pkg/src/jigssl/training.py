"""Weighted losses and the alternating supervised / jigsaw training loop."""

from __future__ import annotations

import ast
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import DatasetManifest, SplitPlan, class_weights, load_images
from .metrics import EvaluationReport, evaluate_scores
from .model import DualHeadModel
from .permset import PermutationSet
from .shuffler import (ShuffledSample, TileGridSpec, augment_image, dump_samples, make_jigsaw_sample,
                       normalize, prepare_image)

log = logging.getLogger(__name__)

LOG_PROB_FLOOR = math.log(1e-12)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.005
    # Adam with an L2 term in the gradient; True switches to AdamW
    decoupled_weight_decay: bool = False
    lam: float = 1.0
    lam_ramp: bool = False
    lam_ramp_factor: float = 1.5
    lam_ramp_period: int = 5
    scramble_fraction: float = 0.6
    P: int = 30
    epochs: int = 30
    batch_size_supervised: int = 32
    batch_size_unsupervised: int = 32
    k_percent: float = 100.0
    seed: int = 0
    grid_size: int = 3
    image_side: int = 222
    crop_ratio_low: float = 0.75
    crop_ratio_high: float = 0.9
    identity_raw: bool = False
    augment: bool = True
    encoder: str = "tiny-cnn"
    perm_pool_size: int = 10_000
    eval_every: int = 1

    def __post_init__(self):
        if not 0 <= self.scramble_fraction <= 1:
            raise ValueError("scramble_fraction must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @property
    def tile_spec(self) -> TileGridSpec:
        return TileGridSpec(self.grid_size, self.image_side, (self.crop_ratio_low, self.crop_ratio_high),
                            identity_raw=self.identity_raw)

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, mapping: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**mapping)


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; values are Python literals or bare strings; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            out[key] = value
    return out


def load_config_file(path: str | Path) -> dict:
    return parse_config_text(Path(path).read_text())


# Per-k hyperparameters reported for the clinical experiments.
_BASELINE_WD = {100.0: 0.005, 50.0: 0.05, 25.0: 0.05, 12.5: 0.2, 6.25: 0.005}
_SSL_WD = {100.0: 0.005, 50.0: 0.05, 25.0: 0.07, 12.5: 0.07, 6.25: 0.2}
_SSL_LAM = {100.0: 1.0, 50.0: 1.0, 25.0: 2.0, 12.5: 1.5, 6.25: 1.5}


def preset(arm: str, k_percent: float, **overrides) -> TrainConfig:
    """Named per-k hyperparameter presets; ``arm`` is ``baseline`` or ``ssl``."""
    k = float(k_percent)
    if arm == "baseline":
        cfg = TrainConfig(learning_rate=1e-3 if k == 100.0 else 1e-4, weight_decay=_BASELINE_WD[k],
                          lam=0.0, k_percent=k)
    elif arm == "ssl":
        cfg = TrainConfig(learning_rate=1e-4, weight_decay=_SSL_WD[k], P=100 if k == 100.0 else 30,
                          lam=_SSL_LAM[k], lam_ramp=k in (12.5, 6.25), k_percent=k)
    else:
        raise ValueError(f"unknown arm {arm!r}")
    return replace(cfg, **overrides)


# --------------------------------------------------------------------------- losses


def weighted_cross_entropy(logits: torch.Tensor, targets: torch.Tensor, weights) -> torch.Tensor:
    """Batch mean of ``-w[y_i] * log p(y_i)``; log-probabilities floored at ``log(1e-12)``.

    Unlike ``F.cross_entropy(weight=...)`` this divides by the batch size, not
    by the summed weights.
    """
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    targets = torch.as_tensor(targets, dtype=torch.long)
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ValueError(f"targets outside 0..{logits.shape[1] - 1}")
    w = torch.as_tensor(weights, dtype=logits.dtype)
    if w.shape != (logits.shape[1],) or (w <= 0).any():
        raise ValueError("need one positive weight per class")
    logp = F.log_softmax(logits, dim=1).gather(1, targets[:, None])[:, 0]
    logp = logp.clamp_min(LOG_PROB_FLOOR)
    return -(w[targets] * logp).mean()


def supervised_loss(logits, labels, class_w) -> torch.Tensor:
    return weighted_cross_entropy(logits, labels, class_w)


def unsupervised_loss(logits, pseudo_labels, perm_w) -> torch.Tensor:
    return weighted_cross_entropy(logits, pseudo_labels, perm_w)


def jigsaw_class_weights(s: float, P: int) -> np.ndarray:
    """Inverse pseudo-label frequencies for frequency vector ``(1 - s, s/P, ..., s/P)``."""
    if P < 1:
        raise ValueError("P must be >= 1")
    if not 0 < s < 1:
        raise ZeroDivisionError(f"scramble fraction {s} gives a zero-frequency pseudo-label")
    return np.array([1.0 / (1.0 - s)] + [P / s] * P)


def scramble_count(batch_size: int, s: float) -> int:
    return math.floor(s * batch_size + 0.5)


def compose_batch_unsupervised(images: Sequence[torch.Tensor], permset: PermutationSet, spec: TileGridSpec,
                               s: float, rng: np.random.Generator) -> list[ShuffledSample]:
    """Exactly ``round(s * B)`` scrambled samples at random positions; the rest get label 0."""
    if not 0 <= s <= 1:
        raise ValueError("s must lie in [0, 1]")
    b = len(images)
    scrambled = rng.permutation(b) < scramble_count(b, s)
    return [make_jigsaw_sample(img, permset, spec, bool(flag), rng) for img, flag in zip(images, scrambled)]


def lambda_at(epoch: int, config: TrainConfig) -> float:
    if not config.lam_ramp:
        return config.lam
    return config.lam * config.lam_ramp_factor ** (epoch // config.lam_ramp_period)


# --------------------------------------------------------------------------- loop


@dataclass
class TrainData:
    """In-memory tensors for one training run. Images are raw floats in [0, 1]."""

    sup_images: torch.Tensor
    sup_labels: torch.Tensor
    unsup_images: torch.Tensor
    val_images: torch.Tensor | None = None
    val_labels: torch.Tensor | None = None
    class_w: np.ndarray | None = None

    def __post_init__(self):
        if self.class_w is None:
            self.class_w = class_weights(self.sup_labels.tolist())

    @classmethod
    def from_records(cls, manifest: DatasetManifest, supervised, unsupervised, validation=(),
                     cache: dict | None = None) -> TrainData:
        def imgs(recs):
            if cache is None:
                return load_images(manifest, recs)
            missing = [r for r in recs if r.image_path not in cache]
            if missing:
                for r, t in zip(missing, load_images(manifest, missing)):
                    cache[r.image_path] = t
            if not recs:
                return torch.zeros((0, 3, 1, 1))
            return torch.stack([cache[r.image_path] for r in recs])

        validation = tuple(validation)
        return cls(
            sup_images=imgs(supervised),
            sup_labels=torch.tensor([r.label for r in supervised]),
            unsup_images=imgs(unsupervised),
            val_images=imgs(validation) if validation else None,
            val_labels=torch.tensor([r.label for r in validation]) if validation else None,
        )

    @classmethod
    def from_plan(cls, manifest: DatasetManifest, plan: SplitPlan, cache: dict | None = None) -> TrainData:
        return cls.from_records(manifest, plan.supervised(manifest), plan.unsupervised(manifest),
                                plan.validation(manifest), cache)


@dataclass
class IterationRecord:
    iteration: int
    epoch: int
    supervised_loss: float
    unsupervised_loss: float | None
    lam: float

    @property
    def weighted_unsupervised_loss(self) -> float | None:
        return None if self.unsupervised_loss is None else self.lam * self.unsupervised_loss


@dataclass
class TrainHistory:
    iterations: list[IterationRecord] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "phase", "loss", "lambda"])
            for rec in self.iterations:
                w.writerow([rec.iteration, "supervised", repr(rec.supervised_loss), ""])
                if rec.unsupervised_loss is not None:
                    w.writerow([rec.iteration, "unsupervised", repr(rec.unsupervised_loss), repr(rec.lam)])


def _index_stream(n: int, rng: np.random.Generator):
    while True:
        yield from rng.permutation(n).tolist()


def _take(stream, k: int) -> list[int]:
    return [next(stream) for _ in range(k)]


def make_optimizer(model: DualHeadModel, config: TrainConfig) -> torch.optim.Optimizer:
    opt_cls = torch.optim.AdamW if config.decoupled_weight_decay else torch.optim.Adam
    return opt_cls(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)


def _prep(images: torch.Tensor, idx: list[int], config: TrainConfig, rng: np.random.Generator) -> list[torch.Tensor]:
    side = config.image_side
    if config.augment:
        return [normalize(augment_image(images[i], rng, side)) for i in idx]
    return [prepare_image(images[i], side) for i in idx]


def supervised_step(model: DualHeadModel, opt: torch.optim.Optimizer, x: torch.Tensor, y: torch.Tensor,
                    class_w) -> float:
    """One update of encoder + supervised head; the jigsaw head gets no gradient and is skipped."""
    model.train()
    opt.zero_grad(set_to_none=True)
    loss = supervised_loss(model.forward_supervised(x), y, class_w)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite supervised loss {loss.item()}")
    loss.backward()
    opt.step()
    return loss.item()


def unsupervised_step(model: DualHeadModel, opt: torch.optim.Optimizer, z: torch.Tensor, pseudo: torch.Tensor,
                      perm_w, lam: float) -> float:
    """One update of encoder + jigsaw head on ``lam * L_U``; returns the unscaled ``L_U``."""
    model.train()
    opt.zero_grad(set_to_none=True)
    loss = unsupervised_loss(model.forward_jigsaw(z), pseudo, perm_w)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite unsupervised loss {loss.item()}")
    (lam * loss).backward()
    opt.step()
    return loss.item()


@torch.no_grad()
def predict_proba(model: DualHeadModel, images: torch.Tensor, side: int, batch_size: int = 128) -> np.ndarray:
    """Positive-class posterior for raw [0, 1] images."""
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.stack([prepare_image(im, side) for im in images[i:i + batch_size]])
        out.append(torch.softmax(model.forward_supervised(x), dim=1)[:, 1])
    return torch.cat(out).numpy() if out else np.zeros(0)


def evaluate(model: DualHeadModel, images: torch.Tensor, labels, side: int) -> EvaluationReport:
    return evaluate_scores(predict_proba(model, images, side), np.asarray(labels))


def train(model: DualHeadModel, data: TrainData, permset: PermutationSet | None, config: TrainConfig,
          dump_shuffled: str | Path | None = None) -> tuple[DualHeadModel, TrainHistory]:
    """Alternate a supervised step and (if the model has a jigsaw head) a jigsaw step per iteration.

    An epoch is ``ceil(len(unsup_images) / batch_size_unsupervised)``
    iterations for both arms, so baseline and SSL take the same number of
    supervised steps.
    """
    ssl = model.has_jigsaw_head and permset is not None and config.lam > 0
    if model.has_jigsaw_head and permset is not None and model.jigsaw_head.out_features != permset.num_classes:
        raise ValueError(f"jigsaw head width {model.jigsaw_head.out_features} != {permset.num_classes} pseudo-labels")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    spec = config.tile_spec
    opt = make_optimizer(model, config)
    class_w = torch.as_tensor(data.class_w, dtype=torch.float32)
    perm_w = torch.as_tensor(jigsaw_class_weights(config.scramble_fraction, permset.P), dtype=torch.float32) \
        if ssl else None

    n_unsup = len(data.unsup_images)
    iters_per_epoch = math.ceil(max(n_unsup, len(data.sup_images)) / config.batch_size_unsupervised)
    sup_stream = _index_stream(len(data.sup_images), rng)
    unsup_stream = _index_stream(n_unsup, rng) if ssl else None
    history = TrainHistory()
    it = 0
    for epoch in range(config.epochs):
        lam = lambda_at(epoch, config)
        for _ in range(iters_per_epoch):
            idx = _take(sup_stream, min(config.batch_size_supervised, len(data.sup_images)))
            x = torch.stack(_prep(data.sup_images, idx, config, rng))
            ls = supervised_step(model, opt, x, data.sup_labels[idx], class_w)
            lu = None
            if ssl:
                uidx = _take(unsup_stream, min(config.batch_size_unsupervised, n_unsup))
                samples = compose_batch_unsupervised(_prep(data.unsup_images, uidx, config, rng), permset, spec,
                                                     config.scramble_fraction, rng)
                if dump_shuffled is not None and it == 0:
                    dump_samples(samples, [f"s{i:05d}" for i in uidx], dump_shuffled)
                z = torch.stack([s.image for s in samples])
                pseudo = torch.tensor([s.pseudo_label for s in samples])
                lu = unsupervised_step(model, opt, z, pseudo, perm_w, lam)
            history.iterations.append(IterationRecord(it, epoch, ls, lu, lam))
            it += 1
        if data.val_images is not None and config.eval_every and (epoch + 1) % config.eval_every == 0:
            rep = evaluate(model, data.val_images, data.val_labels, config.image_side)
            history.epochs.append({"epoch": epoch, **rep.as_dict()})
            log.debug("epoch %d val acc %.4f", epoch, rep.accuracy)
    model.eval()
    return model, history
