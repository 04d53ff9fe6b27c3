"""Dataset ingestion, deterministic semi-supervised splits, and a synthetic generator.

On-disk layout: ``root/images/<id>.<ext>`` and ``root/masks/<id>.<ext>`` with
png/jpg files paired by filename stem. Masks are 8-bit grayscale; pixels
above 127 count as foreground. The synthetic generator produces textured
backgrounds with 1-3 smooth blobs and is the desk-scale stand-in for a real
image/mask directory.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
MASK_THRESHOLD = 127  # 8-bit grayscale value strictly above this is foreground


@dataclass
class Sample:
    """One image with an optional binary mask.

    image: [3, H, W] float32 in [0, 1]; mask: [H, W] float32 in {0, 1} or None.
    """

    id: str
    image: torch.Tensor
    mask: torch.Tensor | None = None

    def with_mask_stripped(self) -> "Sample":
        return replace(self, mask=None)


@dataclass
class SplitSpec:
    seed: int
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2
    labeled_frac: float = 0.2
    labeled_seed: int | None = None  # reshuffles only the labeled selection

    def __post_init__(self):
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {total}")
        if not 0.0 < self.labeled_frac <= 1.0:
            raise ValueError(f"labeled_frac must be in (0, 1], got {self.labeled_frac}")


@dataclass
class Splits:
    train_labeled: list[Sample] = field(default_factory=list)
    train_unlabeled: list[Sample] = field(default_factory=list)
    val: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)

    def as_dict(self) -> dict[str, list[Sample]]:
        return {
            "train_labeled": self.train_labeled,
            "train_unlabeled": self.train_unlabeled,
            "val": self.val,
            "test": self.test,
        }


def _image_to_tensor(path: Path) -> torch.Tensor:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise ValueError(f"cannot read image file {path}: {exc}") from exc
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def _mask_to_tensor(path: Path) -> torch.Tensor:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img)
    except OSError as exc:
        raise ValueError(f"cannot read mask file {path}: {exc}") from exc
    if arr.ndim != 2:
        raise ValueError(f"mask {path} must be 2D grayscale, got shape {arr.shape}")
    return torch.from_numpy((arr > MASK_THRESHOLD).astype(np.float32))


def load_dataset(root) -> list[Sample]:
    """Load image/mask pairs from ``root``, sorted by id.

    Raises if an image has no mask with the same stem, a file is unreadable,
    or a mask is not 2D.
    """
    root = Path(root)
    image_dir, mask_dir = root / "images", root / "masks"
    if not image_dir.is_dir():
        raise ValueError(f"dataset root {root} has no images/ directory")
    if not mask_dir.is_dir():
        raise ValueError(f"dataset root {root} has no masks/ directory")

    mask_paths: dict[str, Path] = {}
    for p in sorted(mask_dir.iterdir()):
        if p.suffix.lower() in IMAGE_EXTENSIONS:
            if p.stem in mask_paths:
                raise ValueError(f"duplicate mask stem '{p.stem}' in {mask_dir}")
            mask_paths[p.stem] = p

    samples = []
    seen = set()
    for p in sorted(image_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        if p.stem in seen:
            raise ValueError(f"duplicate image stem '{p.stem}' in {image_dir}")
        seen.add(p.stem)
        if p.stem not in mask_paths:
            raise ValueError(f"image '{p.stem}' has no matching mask in {mask_dir}")
        image = _image_to_tensor(p)
        mask = _mask_to_tensor(mask_paths[p.stem])
        if image.shape[1:] != mask.shape:
            raise ValueError(
                f"image/mask shape mismatch for '{p.stem}': "
                f"{tuple(image.shape[1:])} vs {tuple(mask.shape)}"
            )
        samples.append(Sample(id=p.stem, image=image, mask=mask))
    samples.sort(key=lambda s: s.id)
    return samples


def save_dataset(samples: list[Sample], root) -> None:
    """Write samples as png pairs in the load_dataset layout."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = (s.image.clamp(0, 1) * 255).round().byte().permute(1, 2, 0).numpy()
        Image.fromarray(img, mode="RGB").save(root / "images" / f"{s.id}.png")
        if s.mask is None:
            raise ValueError(f"sample '{s.id}' has no mask to save")
        mask = (s.mask * 255).byte().numpy()
        Image.fromarray(mask, mode="L").save(root / "masks" / f"{s.id}.png")


def make_splits(samples: list[Sample], spec: SplitSpec) -> Splits:
    """Deterministic train(labeled/unlabeled)/val/test partition by id.

    Counts use round(fraction * pool size); the test split takes the
    remainder. Unlabeled train samples keep their stored masks for audit;
    the training loop never reads them.
    """
    if not samples:
        raise ValueError("cannot split an empty sample list")
    ordered = sorted(samples, key=lambda s: s.id)
    rng = random.Random(spec.seed)
    shuffled = list(ordered)
    rng.shuffle(shuffled)

    n = len(shuffled)
    n_train = round(spec.train_frac * n)
    n_val = round(spec.val_frac * n)
    n_test = n - n_train - n_val
    if n_train <= 0 or n_val <= 0 or n_test <= 0:
        raise ValueError(
            f"empty partition: {n} samples give train={n_train}, val={n_val}, test={n_test}"
        )

    train = shuffled[:n_train]
    val = shuffled[n_train:n_train + n_val]
    test = shuffled[n_train + n_val:]

    if spec.labeled_seed is not None:
        train = list(train)
        random.Random(spec.labeled_seed).shuffle(train)
    n_labeled = round(spec.labeled_frac * n_train)
    n_labeled = max(1, min(n_labeled, n_train))
    if spec.labeled_frac < 1.0 and n_labeled >= n_train:
        raise ValueError(
            f"empty partition: labeled_frac={spec.labeled_frac} leaves no unlabeled "
            f"samples out of {n_train}"
        )
    return Splits(
        train_labeled=train[:n_labeled],
        train_unlabeled=train[n_labeled:],
        val=val,
        test=test,
    )


def resize_sample(sample: Sample, side: int) -> Sample:
    """Bilinear resize for the image, nearest-neighbor for the mask."""
    image = F.interpolate(sample.image.unsqueeze(0), size=(side, side),
                          mode="bilinear", align_corners=False).squeeze(0)
    mask = sample.mask
    if mask is not None:
        mask = F.interpolate(mask.unsqueeze(0).unsqueeze(0), size=(side, side),
                             mode="nearest").squeeze(0).squeeze(0)
    return Sample(id=sample.id, image=image, mask=mask)


def apply_flips(sample: Sample, horizontal: bool, vertical: bool) -> Sample:
    """Flip image and mask with the identical transform."""
    dims = []
    if horizontal:
        dims.append(-1)
    if vertical:
        dims.append(-2)
    if not dims:
        return sample
    image = torch.flip(sample.image, dims=dims)
    mask = torch.flip(sample.mask, dims=dims) if sample.mask is not None else None
    return Sample(id=sample.id, image=image, mask=mask)


# Synthetic generator constants; foreground fraction is rejection-sampled
# into [MIN_FG_FRAC, MAX_FG_FRAC].
MIN_FG_FRAC = 0.05
MAX_FG_FRAC = 0.5


def _smooth_noise(rng: np.random.Generator, side: int, cells: int) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, size=(1, 1, cells, cells)).astype(np.float32)
    up = F.interpolate(torch.from_numpy(coarse), size=(side, side),
                       mode="bilinear", align_corners=False)
    return up.squeeze().numpy()


def _blob_mask(rng: np.random.Generator, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32) / side
    mask = np.zeros((side, side), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.25, 0.75, size=2)
        base_r = rng.uniform(0.12, 0.28)
        wobble = rng.uniform(0.05, 0.25)
        lobes = int(rng.integers(2, 6))
        phase = rng.uniform(0, 2 * np.pi)
        theta = np.arctan2(yy - cy, xx - cx)
        radius = base_r * (1.0 + wobble * np.sin(lobes * theta + phase))
        mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    return mask


def _synth_sample(rng: np.random.Generator, side: int) -> tuple[torch.Tensor, torch.Tensor]:
    for _ in range(200):
        mask = _blob_mask(rng, side)
        frac = mask.mean()
        if MIN_FG_FRAC <= frac <= MAX_FG_FRAC:
            break
    else:
        raise RuntimeError("synthetic blob sampling failed to hit the foreground fraction band")

    # The discriminative cue is texture frequency (fine-grained foreground vs.
    # smooth background); the intensity offset is small and sign-varying, so
    # plain thresholding cannot solve the task.
    bg_level = rng.uniform(0.35, 0.55)
    fg_level = bg_level + rng.choice([-1.0, 1.0]) * rng.uniform(0.03, 0.10)
    bg_tex = _smooth_noise(rng, side, max(2, side // 8))
    fg_tex = _smooth_noise(rng, side, max(4, side // 2))
    m = mask.astype(np.float32)
    gray = (bg_level + 0.10 * bg_tex) * (1.0 - m) + (fg_level + 0.12 * fg_tex) * m
    gray += 0.03 * rng.normal(0.0, 1.0, size=(side, side)).astype(np.float32)

    tints = rng.uniform(0.9, 1.1, size=3).astype(np.float32)
    image = np.clip(gray[None, :, :] * tints[:, None, None], 0.0, 1.0).astype(np.float32)
    return torch.from_numpy(image), torch.from_numpy(m)


def generate_synthetic(seed: int, count: int, side: int = 64) -> list[Sample]:
    """Deterministic textured-blob dataset; every mask is nonempty."""
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(count):
        image, mask = _synth_sample(rng, side)
        samples.append(Sample(id=f"synth{k:04d}", image=image, mask=mask))
    return samples


MANIFEST_HEADER = "# semiseg split manifest v1"


def write_manifest(splits: Splits, path) -> None:
    """Plain-text manifest: one section per partition, one id per line."""
    lines = [MANIFEST_HEADER]
    for name, part in splits.as_dict().items():
        lines.append(f"[{name}]")
        lines.extend(s.id for s in part)
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, list[str]]:
    ids: dict[str, list[str]] = {}
    current: list[str] | None = None
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = ids.setdefault(line[1:-1], [])
        elif current is not None:
            current.append(line)
        else:
            raise ValueError(f"manifest line outside any section: {line!r}")
    return ids


def splits_from_manifest(samples: list[Sample], manifest: dict[str, list[str]]) -> Splits:
    """Rebuild a Splits object from stored ids (for exact re-runs)."""
    by_id = {s.id: s for s in samples}
    parts = {}
    for name in ("train_labeled", "train_unlabeled", "val", "test"):
        missing = [i for i in manifest.get(name, []) if i not in by_id]
        if missing:
            raise ValueError(f"manifest ids not present in dataset: {missing[:5]}")
        parts[name] = [by_id[i] for i in manifest.get(name, [])]
    return Splits(**parts)
