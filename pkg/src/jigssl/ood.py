"""Out-of-distribution scoring from posterior flatness plus the jigsaw loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .metrics import auroc, roc_curve
from .model import DualHeadModel
from .permset import PermutationSet
from .shuffler import TileGridSpec, make_jigsaw_sample, prepare_image
from .training import jigsaw_class_weights, unsupervised_loss

MODES = ("baseline", "identity", "scramble")


@dataclass(frozen=True)
class OODScore:
    kappa: float
    kl_term: float
    jigsaw_term: float
    mode: str


def kl_from_uniform(posterior, floor: float = 1e-12) -> float:
    """``KL[U || p]`` in nats, with ``p`` clamped below at ``floor``."""
    p = np.asarray(posterior, dtype=np.float64).ravel()
    if p.size == 0 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"posterior must be a probability vector, got {p.tolist()}")
    u = 1.0 / p.size
    return float(np.sum(u * (math.log(u) - np.log(np.maximum(p, floor)))))


@torch.no_grad()
def ood_score(model: DualHeadModel, image: torch.Tensor, permset: PermutationSet | None, spec: TileGridSpec,
              mode: str = "identity", M: int = 4, rng: np.random.Generator | None = None,
              scramble_fraction: float = 0.6, negate_kl: bool = False) -> OODScore:
    """Score one raw [0, 1] image.

    ``baseline`` uses the KL term alone. ``identity`` adds the weighted jigsaw
    cross-entropy of the identity-recomposed image against label 0.
    ``scramble`` averages that term over the identity sample and ``M`` random
    scrambles scored against their own labels.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    model.eval()
    x = prepare_image(image, spec.image_side)
    post = torch.softmax(model.forward_supervised(x[None]).double(), dim=1)[0].numpy()
    kl = kl_from_uniform(post / post.sum())
    if negate_kl:
        kl = -kl
    if mode == "baseline":
        return OODScore(kl, kl, 0.0, mode)
    if not model.has_jigsaw_head or permset is None:
        raise RuntimeError("jigsaw scoring needs a model with a jigsaw head and its permutation set")
    rng = rng if rng is not None else np.random.default_rng(0)
    labels = [0] + ([int(v) for v in rng.integers(1, permset.P + 1, size=M)] if mode == "scramble" else [])
    z = torch.stack([make_jigsaw_sample(x, permset, spec, lab != 0, rng, label=lab).image for lab in labels])
    logits = model.forward_jigsaw(z)
    w = jigsaw_class_weights(scramble_fraction, permset.P)
    per_sample = [unsupervised_loss(logits[i:i + 1], torch.tensor([lab]), w).item() for i, lab in enumerate(labels)]
    jig = float(np.mean(per_sample))
    return OODScore(kl + jig, kl, jig, mode)


def score_all(model, images: Sequence[torch.Tensor], permset, spec, mode="identity", M=4, seed=0,
              scramble_fraction=0.6, negate_kl=False) -> list[OODScore]:
    rng = np.random.default_rng(seed)
    return [ood_score(model, im, permset, spec, mode, M, rng, scramble_fraction, negate_kl) for im in images]


def evaluate_ood(model, in_images, out_images, permset, spec, mode="identity", M=4, seed=0,
                 scramble_fraction=0.6, negate_kl=False) -> dict:
    """AUROC and ROC of kappa with in-distribution as label 0 and out-of-distribution as label 1."""
    if len(in_images) == 0 or len(out_images) == 0:
        raise ValueError("need both in- and out-of-distribution samples")
    scores = score_all(model, list(in_images) + list(out_images), permset, spec, mode, M, seed,
                       scramble_fraction, negate_kl)
    kappa = np.array([s.kappa for s in scores])
    labels = np.r_[np.zeros(len(in_images), int), np.ones(len(out_images), int)]
    return {"auroc": auroc(kappa, labels), "roc": roc_curve(kappa, labels), "scores": scores, "labels": labels}
