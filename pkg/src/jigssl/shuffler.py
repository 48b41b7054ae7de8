"""Jigsaw shuffler: tile decomposition with crop jitter, reordering and recomposition.

Images are ``(C, H, W)`` tensors throughout. Whole-image augmentation and
normalization live here too because they run immediately before the shuffler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .permset import Permutation, PermutationSet

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_FILTERS = {"bilinear", "bicubic", "nearest", "area"}


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class TileGridSpec:
    grid_size: int = 3
    image_side: int = 222
    crop_ratio_range: tuple[float, float] = (0.75, 0.9)
    rescale_filter: str = "bilinear"
    # when set, identity-labelled samples skip the crop jitter
    identity_raw: bool = False

    def __post_init__(self):
        if self.image_side % self.grid_size:
            raise ShapeError(f"image_side {self.image_side} not divisible by grid {self.grid_size}")
        low, high = self.crop_ratio_range
        if not 0 < low <= high <= 1.0:
            raise ValueError(f"crop_ratio_range must satisfy 0 < low <= high <= 1, got {self.crop_ratio_range}")
        if self.rescale_filter not in _FILTERS:
            raise ValueError(f"unknown rescale_filter {self.rescale_filter!r}")

    @property
    def tile_side(self) -> int:
        return self.image_side // self.grid_size


@dataclass
class ShuffledSample:
    image: torch.Tensor
    pseudo_label: int


def patch_side(ratio: float, tile_side: int) -> int:
    return max(1, math.floor(ratio * tile_side))


def _resize(x: torch.Tensor, side: int, mode: str) -> torch.Tensor:
    kwargs = {"align_corners": False} if mode in ("bilinear", "bicubic") else {}
    out = F.interpolate(x[None].float(), size=(side, side), mode=mode, **kwargs)[0]
    return out.to(x.dtype) if x.dtype.is_floating_point else out.round().clamp(0, 255).to(x.dtype)


def _check_image(image: torch.Tensor, spec: TileGridSpec) -> None:
    if image.ndim != 3:
        raise ShapeError(f"expected (C, H, W) image, got shape {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h != w:
        raise ShapeError(f"image is not square: {h}x{w}")
    if h != spec.image_side:
        raise ShapeError(f"image side {h} != spec image_side {spec.image_side}")


def decompose(image: torch.Tensor, spec: TileGridSpec, rng: np.random.Generator | None,
              jitter: bool = True) -> list[torch.Tensor]:
    """Split into ``grid_size**2`` row-major tiles, each crop-jittered and rescaled back to tile size."""
    _check_image(image, spec)
    t = spec.tile_side
    low, high = spec.crop_ratio_range
    tiles = []
    for row in range(spec.grid_size):
        for col in range(spec.grid_size):
            tile = image[:, row * t:(row + 1) * t, col * t:(col + 1) * t]
            if jitter:
                side = patch_side(rng.uniform(low, high), t)
                oy, ox = rng.integers(0, t - side + 1, size=2)
                tile = tile[:, oy:oy + side, ox:ox + side]
                if side != t:
                    tile = _resize(tile, t, spec.rescale_filter)
            tiles.append(tile)
    return tiles


def recompose(tiles: Sequence[torch.Tensor], p: Permutation | Sequence[int]) -> torch.Tensor:
    """Place tile ``p[i]`` at grid position ``i`` and stitch the grid."""
    order = tuple(p.order if isinstance(p, Permutation) else p)
    n = len(tiles)
    g = math.isqrt(n)
    if g * g != n or len(order) != n:
        raise ShapeError(f"need a square number of tiles matching the permutation, got {n} tiles / {len(order)}")
    shape = tiles[0].shape
    if len(shape) != 3 or shape[-1] != shape[-2] or any(t.shape != shape for t in tiles):
        raise ShapeError("tiles must be equal-sized squares")
    rows = [torch.cat([tiles[order[r * g + c]] for c in range(g)], dim=-1) for r in range(g)]
    return torch.cat(rows, dim=-2)


def split_blocks(image: torch.Tensor, grid_size: int) -> list[torch.Tensor]:
    """Cut an image into its grid blocks without any jitter."""
    t = image.shape[-1] // grid_size
    return [image[:, r * t:(r + 1) * t, c * t:(c + 1) * t] for r in range(grid_size) for c in range(grid_size)]


def make_jigsaw_sample(image: torch.Tensor, permset: PermutationSet, spec: TileGridSpec, scramble: bool,
                       rng: np.random.Generator, label: int | None = None) -> ShuffledSample:
    """Build one recomposed jigsaw input.

    Scrambled samples draw their pseudo-label uniformly from ``1..P`` unless
    ``label`` is given. Identity samples get label 0 and, unless
    ``spec.identity_raw``, the same crop jitter as scrambled ones.
    """
    if permset.grid_size != spec.grid_size:
        raise ShapeError(f"permutation grid {permset.grid_size} != tile grid {spec.grid_size}")
    if label is None:
        label = int(rng.integers(1, permset.P + 1)) if scramble else 0
    if label == 0 and spec.identity_raw:
        _check_image(image, spec)
        return ShuffledSample(image, 0)
    tiles = decompose(image, spec, rng)
    return ShuffledSample(recompose(tiles, permset[label]), label)


def normalize(image: torch.Tensor, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> torch.Tensor:
    mean = torch.as_tensor(mean, dtype=image.dtype).view(-1, 1, 1)
    std = torch.as_tensor(std, dtype=image.dtype).view(-1, 1, 1)
    return (image - mean) / std


def augment_image(image: torch.Tensor, rng: np.random.Generator, side: int,
                  crop_scale: tuple[float, float] = (0.8, 1.0), p: float = 0.5) -> torch.Tensor:
    """Flips, quarter-turn rotation and random crop (each with probability ``p``), then resize to ``side``.

    No color transforms. Input is a float image in [0, 1].
    """
    if rng.random() < p:
        image = image.flip(-2)
    if rng.random() < p:
        image = image.flip(-1)
    if rng.random() < p:
        image = torch.rot90(image, int(rng.integers(0, 4)), dims=(-2, -1))
    if rng.random() < p:
        h, w = image.shape[-2:]
        s = rng.uniform(*crop_scale)
        ch, cw = max(1, round(h * s)), max(1, round(w * s))
        oy, ox = rng.integers(0, h - ch + 1), rng.integers(0, w - cw + 1)
        image = image[:, oy:oy + ch, ox:ox + cw]
    if image.shape[-2:] != (side, side):
        image = F.interpolate(image[None], size=(side, side), mode="bilinear", align_corners=False)[0]
    return image


def prepare_image(image: torch.Tensor, side: int) -> torch.Tensor:
    """Deterministic eval-time transform: resize and normalize."""
    if image.shape[-2:] != (side, side):
        image = F.interpolate(image[None], size=(side, side), mode="bilinear", align_corners=False)[0]
    return normalize(image)


def dump_samples(samples: Sequence[ShuffledSample], ids: Sequence[str], out_dir: str | Path) -> list[Path]:
    """Write recomposed samples as ``<sampleid>_<pseudolabel>.png`` (normalization undone)."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mean = torch.tensor(IMAGENET_MEAN).view(-1, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(-1, 1, 1)
    paths = []
    for sample, sid in zip(samples, ids):
        img = (sample.image.float() * std + mean).clamp(0, 1)
        arr = (img.permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
        path = out_dir / f"{sid}_{sample.pseudo_label}.png"
        Image.fromarray(arr).save(path)
        paths.append(path)
    return paths
