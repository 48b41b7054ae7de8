"""Manifest data model, video-level splits, labelled-fraction selection and a synthetic generator."""

from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MODALITIES = ("WLI", "NBI")
K_PERCENTS = (100.0, 50.0, 25.0, 12.5, 6.25)
MANIFEST_HEADER = ("image_path", "video_id", "label", "modality")


class ManifestError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    video_id: str
    label: int | None = None
    # None when the acquisition mode was not recorded
    modality: str | None = "WLI"

    @property
    def labeled(self) -> bool:
        return self.label is not None


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[SampleRecord, ...]
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        paths = Counter(r.image_path for r in self.records)
        dup = [p for p, n in paths.items() if n > 1]
        if dup:
            raise ManifestError(f"duplicate image_path: {dup[0]}")
        video_label: dict[str, int] = {}
        for r in self.records:
            if r.label is None:
                continue
            prev = video_label.setdefault(r.video_id, r.label)
            if prev != r.label:
                raise ManifestError(f"video {r.video_id} has conflicting labels {prev} and {r.label}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def labeled(self) -> tuple[SampleRecord, ...]:
        return tuple(r for r in self.records if r.labeled)

    @property
    def unlabeled(self) -> tuple[SampleRecord, ...]:
        return tuple(r for r in self.records if not r.labeled)

    @property
    def n_labeled(self) -> int:
        return sum(r.labeled for r in self.records)

    @property
    def n_unlabeled(self) -> int:
        return len(self.records) - self.n_labeled

    def modality_counts(self) -> Counter:
        return Counter(r.modality for r in self.records)

    def class_counts(self) -> Counter:
        return Counter(r.label for r in self.records if r.labeled)

    def resolve(self, record: SampleRecord) -> Path:
        p = Path(record.image_path)
        return p if p.is_absolute() else self.root / p

    def filter(self, pred) -> DatasetManifest:
        return DatasetManifest(tuple(r for r in self.records if pred(r)), self.root)


def _parse_row(row: list[str], lineno: int) -> SampleRecord:
    if len(row) != 4:
        raise ManifestError(f"line {lineno}: expected 4 fields, got {len(row)}")
    path, video, label, modality = (x.strip() for x in row)
    if not path or not video:
        raise ManifestError(f"line {lineno}: image_path and video_id are required")
    if label == "":
        lab = None
    elif label in ("0", "1"):
        lab = int(label)
    else:
        raise ManifestError(f"line {lineno}: label must be 0, 1 or empty, got {label!r}")
    if modality == "":
        mod = None
    elif modality.upper() in MODALITIES:
        mod = modality.upper()
    else:
        raise ManifestError(f"line {lineno}: unknown modality {modality!r}")
    return SampleRecord(path, video, lab, mod)


def parse_manifest(lines: Iterable[str], root: Path = Path("."), source: str = "<manifest>") -> DatasetManifest:
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None:
        raise ManifestError(f"{source}: empty manifest")
    if tuple(h.strip() for h in header) != MANIFEST_HEADER:
        raise ManifestError(f"{source}: line 1: expected header {','.join(MANIFEST_HEADER)}")
    records = []
    seen: dict[str, int] = {}
    video_label: dict[str, tuple[int, int]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not x.strip() for x in row):
            continue
        rec = _parse_row(row, lineno)
        if rec.image_path in seen:
            raise ManifestError(f"line {lineno}: duplicate image_path {rec.image_path} (first on line {seen[rec.image_path]})")
        seen[rec.image_path] = lineno
        if rec.label is not None:
            prev = video_label.setdefault(rec.video_id, (rec.label, lineno))
            if prev[0] != rec.label:
                raise ManifestError(
                    f"line {lineno}: video {rec.video_id} labelled {rec.label} but line {prev[1]} says {prev[0]}"
                )
        records.append(rec)
    if not records:
        raise ManifestError(f"{source}: empty manifest")
    return DatasetManifest(tuple(records), root)


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    with open(path, newline="") as fh:
        return parse_manifest(fh, path.parent, str(path))


def write_manifest(manifest: DatasetManifest | Sequence[SampleRecord], path: str | Path) -> None:
    records = manifest.records if isinstance(manifest, DatasetManifest) else manifest
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            w.writerow([r.image_path, r.video_id, "" if r.label is None else r.label, r.modality or ""])


# --------------------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitPlan:
    fold_index: int
    validation_video_ids: frozenset[str]
    k_percent: float
    supervised_record_ids: frozenset[str]
    unsupervised_record_ids: frozenset[str]
    validation_record_ids: frozenset[str] = frozenset()

    def select(self, manifest: DatasetManifest, ids: frozenset[str]) -> tuple[SampleRecord, ...]:
        return tuple(r for r in manifest.records if r.image_path in ids)

    def supervised(self, manifest: DatasetManifest) -> tuple[SampleRecord, ...]:
        return self.select(manifest, self.supervised_record_ids)

    def unsupervised(self, manifest: DatasetManifest) -> tuple[SampleRecord, ...]:
        return self.select(manifest, self.unsupervised_record_ids)

    def validation(self, manifest: DatasetManifest) -> tuple[SampleRecord, ...]:
        return self.select(manifest, self.validation_record_ids)


def _video_frames(records: Iterable[SampleRecord]) -> dict[int, dict[str, int]]:
    """class -> {video_id: labelled frame count}, videos in first-seen order."""
    out: dict[int, dict[str, int]] = defaultdict(dict)
    for r in records:
        if r.labeled:
            out[r.label][r.video_id] = out[r.label].get(r.video_id, 0) + 1
    return out


def _plan_from_validation(manifest: DatasetManifest, fold: int, val_videos: frozenset[str]) -> SplitPlan:
    val = [r for r in manifest.records if r.labeled and r.video_id in val_videos]
    train = [r for r in manifest.records if r.video_id not in val_videos]
    return SplitPlan(
        fold_index=fold,
        validation_video_ids=val_videos,
        k_percent=100.0,
        supervised_record_ids=frozenset(r.image_path for r in train if r.labeled),
        unsupervised_record_ids=frozenset(r.image_path for r in train),
        validation_record_ids=frozenset(r.image_path for r in val),
    )


def make_folds(manifest: DatasetManifest, n_folds: int = 5, val_fraction: float = 0.2, seed: int = 0,
               strategy: str = "rotation") -> list[SplitPlan]:
    """Video-level, class-stratified validation splits (``k_percent = 100`` templates).

    ``rotation`` partitions the labelled videos into ``n_folds`` groups of
    near-equal frame count per class, each group serving once as validation.
    ``redraw`` independently draws about ``val_fraction`` of each class's
    frames (whole videos) for every fold.
    """
    by_class = _video_frames(manifest.records)
    if set(by_class) != {0, 1}:
        raise SplitError("both classes must have labelled videos")
    for c, vids in by_class.items():
        if len(vids) < n_folds:
            raise SplitError(f"class {c} has {len(vids)} labelled videos, need at least {n_folds}")
    rng = np.random.default_rng(seed)
    groups: list[set[str]] = [set() for _ in range(n_folds)]
    if strategy == "rotation":
        for c in (0, 1):
            vids = list(by_class[c])
            vids = [vids[i] for i in rng.permutation(len(vids))]
            # largest videos first; stable sort keeps the shuffled order among equals
            vids.sort(key=lambda v: -by_class[c][v])
            load = [0] * n_folds
            for v in vids:
                f = int(np.argmin(load))
                groups[f].add(v)
                load[f] += by_class[c][v]
    elif strategy == "redraw":
        for f in range(n_folds):
            for c in (0, 1):
                vids = list(by_class[c])
                target = val_fraction * sum(by_class[c].values())
                got = 0
                for i in rng.permutation(len(vids)):
                    if got >= target and got > 0:
                        break
                    groups[f].add(vids[i])
                    got += by_class[c][vids[i]]
    else:
        raise ValueError(f"unknown fold strategy {strategy!r}")
    plans = []
    for f, g in enumerate(groups):
        plan = _plan_from_validation(manifest, f, frozenset(g))
        classes = {r.label for r in plan.validation(manifest)}
        if classes != {0, 1}:
            raise SplitError(f"fold {f} validation lacks class(es) {sorted({0, 1} - classes)}")
        plans.append(plan)
    return plans


def stratified_counts(class_sizes: dict[int, int], k_percent: float) -> dict[int, int]:
    """Per-class sample counts for a k% draw.

    The overall count is ``k% * total`` rounded half up; it is apportioned by
    largest remainder, ties going to the larger class.
    """
    total = sum(class_sizes.values())
    target = math.floor(total * k_percent / 100 + 0.5)
    quotas = {c: n * k_percent / 100 for c, n in class_sizes.items()}
    counts = {c: math.floor(q) for c, q in quotas.items()}
    spare = target - sum(counts.values())
    order = sorted(quotas, key=lambda c: (-(quotas[c] - counts[c]), -class_sizes[c], c))
    for c in order[:max(spare, 0)]:
        counts[c] += 1
    return counts


def select_labeled_fraction(records: Sequence[SampleRecord], k_percent: float, seed: int = 0
                            ) -> tuple[SampleRecord, ...]:
    """Class-stratified frame-level k% subset; nested across k for a fixed seed."""
    if k_percent not in K_PERCENTS:
        raise ValueError(f"k_percent must be one of {K_PERCENTS}, got {k_percent}")
    records = tuple(records)
    if any(not r.labeled for r in records):
        raise ValueError("select_labeled_fraction expects labelled records only")
    if k_percent == 100.0:
        return records
    by_class: dict[int, list[int]] = defaultdict(list)
    for i, r in enumerate(records):
        by_class[r.label].append(i)
    counts = stratified_counts({c: len(v) for c, v in by_class.items()}, k_percent)
    rng = np.random.default_rng(seed)
    keep: set[int] = set()
    for c in sorted(by_class):
        if counts[c] == 0:
            raise SplitError(f"class {c} is empty at k={k_percent}%")
        idx = by_class[c]
        order = rng.permutation(len(idx))
        keep.update(idx[j] for j in order[:counts[c]])
    return tuple(records[i] for i in sorted(keep))


def plan_for_k(template: SplitPlan, manifest: DatasetManifest, k_percent: float, seed: int = 0) -> SplitPlan:
    labeled_train = [r for r in manifest.records if r.image_path in template.supervised_record_ids]
    chosen = select_labeled_fraction(labeled_train, k_percent, seed)
    return replace(template, k_percent=k_percent, supervised_record_ids=frozenset(r.image_path for r in chosen))


def class_weights(records_or_labels) -> np.ndarray:
    """Inverse class frequencies ``[w_0, w_1]`` with ``freq(c) = n_c / n``."""
    labels = [r.label if isinstance(r, SampleRecord) else int(r) for r in records_or_labels]
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=2)[:2]
    if (counts == 0).any():
        raise ValueError(f"both classes needed for class weights, got counts {counts.tolist()}")
    return counts.sum() / counts.astype(np.float64)


# --------------------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Controls for the synthetic lesion-like dataset.

    Class 1 objects are polygons (corners, straight edges) and class 0 are
    ellipses, both large enough to span several tiles so the cue survives
    tiling. NBI frames apply a fixed channel remap to the rendered WLI image.
    """

    videos: int = 40
    frames_per_video: int = 50
    image_side: int = 48
    label_fraction: float = 0.6
    nbi_fraction: float = 0.4
    positive_fraction: float = 0.5
    noise: float = 0.08
    distractors: int = 3
    # channel remap applied to NBI frames: output channel i takes input channel nbi_channels[i]
    nbi_channels: tuple[int, int, int] = (2, 0, 1)


def _assign(n: int, frac: float) -> int:
    return min(n, max(0, math.floor(n * frac + 0.5)))


def _video_plan(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[str, int, bool, str]]:
    """(video_id, class, labelled, modality) per video, stratified over class x labelled x modality."""
    n = spec.videos
    n_lab = _assign(n, spec.label_fraction)
    plan = []
    for lab_block, size in ((True, n_lab), (False, n - n_lab)):
        n_pos = _assign(size, spec.positive_fraction)
        for cls, csize in ((1, n_pos), (0, size - n_pos)):
            n_nbi = _assign(csize, spec.nbi_fraction)
            for j in range(csize):
                plan.append((cls, lab_block, "NBI" if j < n_nbi else "WLI"))
    order = rng.permutation(len(plan))
    return [(f"v{i:04d}", *plan[j]) for i, j in enumerate(order)]


def _shape_mask(kind: int, side: int, cx: float, cy: float, radius: float, angle: float,
                aspect: float, n_sides: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    ca, sa = math.cos(angle), math.sin(angle)
    u = (dx * ca + dy * sa) / radius
    v = (-dx * sa + dy * ca) / (radius * aspect)
    if kind == 0:
        r = np.sqrt(u * u + v * v)
        return r <= 1.0
    # regular polygon in the (u, v) frame
    theta = np.arctan2(v, u)
    r = np.sqrt(u * u + v * v)
    sector = 2 * math.pi / n_sides
    local = (theta % sector) - sector / 2
    return r * np.cos(local) <= math.cos(sector / 2)


def render_frame(kind: int, params: dict, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Render one float RGB frame in [0, 1] (WLI appearance)."""
    side = spec.image_side
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    bg = np.asarray(params["bg"])
    fg = np.asarray(params["fg"])
    shade = 1.0 + params["shade"] * ((xx - side / 2) * params["shade_dir"][0] + (yy - side / 2) * params["shade_dir"][1]) / side
    img = bg[None, None, :] * shade[..., None]
    for d in params["distractors"]:
        m = _shape_mask(d["kind"], side, d["cx"], d["cy"], d["r"], d["angle"], 1.0, 4, yy, xx)
        img[m] = img[m] * 0.6 + np.asarray(d["color"]) * 0.4
    cx = params["cx"] + rng.normal(0, 0.6)
    cy = params["cy"] + rng.normal(0, 0.6)
    radius = params["radius"] * (1 + rng.normal(0, 0.03))
    angle = params["angle"] + rng.normal(0, 0.05)
    mask = _shape_mask(kind, side, cx, cy, radius, angle, params["aspect"], params["n_sides"], yy, xx)
    img[mask] = fg * shade[mask][:, None]
    img = img + rng.normal(0, spec.noise, img.shape)
    return np.clip(img, 0, 1)


def _video_params(kind: int, spec: SynthSpec, rng: np.random.Generator) -> dict:
    side = spec.image_side
    base_bg = np.array([0.80, 0.55, 0.50])
    base_fg = np.array([0.55, 0.25, 0.25])
    params = {
        "cx": side / 2 + rng.uniform(-0.08, 0.08) * side,
        "cy": side / 2 + rng.uniform(-0.08, 0.08) * side,
        "radius": rng.uniform(0.28, 0.38) * side,
        "angle": rng.uniform(0, 2 * math.pi),
        "aspect": rng.uniform(0.75, 1.0),
        "n_sides": int(rng.integers(3, 5)),
        "bg": np.clip(base_bg + rng.normal(0, 0.04, 3), 0, 1).tolist(),
        "fg": np.clip(base_fg + rng.normal(0, 0.04, 3), 0, 1).tolist(),
        "shade": rng.uniform(0.0, 0.4),
        "shade_dir": rng.normal(0, 1, 2).tolist(),
        "distractors": [],
    }
    for _ in range(spec.distractors):
        params["distractors"].append({
            "kind": int(rng.integers(0, 2)),
            "cx": rng.uniform(0, side), "cy": rng.uniform(0, side),
            "r": rng.uniform(0.05, 0.1) * side, "angle": rng.uniform(0, 2 * math.pi),
            "color": np.clip(base_fg + rng.normal(0, 0.1, 3), 0, 1).tolist(),
        })
    return params


def to_modality(img: np.ndarray, modality: str | None, spec: SynthSpec) -> np.ndarray:
    if modality == "NBI":
        return img[..., list(spec.nbi_channels)]
    return img


def generate_synthetic_dataset(out_dir: str | Path, spec: SynthSpec = SynthSpec(), seed: int = 0,
                               manifest_name: str = "manifest.csv") -> DatasetManifest:
    """Render PNG frames plus a manifest into ``out_dir``; bit-identical for a fixed seed."""
    from PIL import Image

    if spec.videos < 1 or spec.frames_per_video < 1 or spec.image_side < 1:
        raise ValueError("synthetic sizes must be >= 1")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for vid, cls, labeled, modality in _video_plan(spec, rng):
        vrng = np.random.default_rng([seed, int(vid[1:])])
        params = _video_params(cls, spec, vrng)
        for f in range(spec.frames_per_video):
            img = to_modality(render_frame(cls, params, spec, vrng), modality, spec)
            name = f"images/{vid}_f{f:03d}.png"
            Image.fromarray((img * 255).round().astype(np.uint8)).save(out_dir / name)
            records.append(SampleRecord(name, vid, cls if labeled else None, modality))
    manifest = DatasetManifest(tuple(records), out_dir)
    write_manifest(manifest, out_dir / manifest_name)
    return manifest


def load_images(manifest: DatasetManifest, records: Sequence[SampleRecord] | None = None):
    """Decode records to a float tensor ``(N, 3, H, W)`` in [0, 1]."""
    import torch
    from PIL import Image

    records = manifest.records if records is None else records
    arrs = []
    for r in records:
        with Image.open(manifest.resolve(r)) as im:
            arrs.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
    if not arrs:
        return torch.zeros((0, 3, 1, 1))
    return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).float().div_(255)
