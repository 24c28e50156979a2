"""Datasets on disk, a seeded synthetic splice generator, and image attacks."""
from __future__ import annotations

import io
import zlib
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
TAMPER_FRACTION_RANGE = (0.02, 0.4)


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.id}: image must be HxWx3, got {self.image.shape}")
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(f"{self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ in size")


def sample_rng(seed: int, key: str | int) -> np.random.Generator:
    """Per-sample generator derived from (global seed, sample id)."""
    if isinstance(key, str):
        key = zlib.crc32(key.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(key)]))


# --------------------------------------------------------------------------- I/O


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from exc


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im.convert("L"))
    return (arr >= 128).astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path)


def load_dataset(root) -> list[Sample]:
    """Load ``root/images/*`` with name-matched ``root/masks/<id>.png``, sorted by id."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise FileNotFoundError(f"{root} must contain images/ and masks/ directories")
    images = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    samples = []
    for p in images:
        mask_path = mask_dir / f"{p.stem}.png"
        if not mask_path.is_file():
            raise FileNotFoundError(f"no mask for image {p.name} (expected {mask_path})")
        samples.append(Sample(image=read_image(p), mask=read_mask(mask_path), id=p.stem))
    samples.sort(key=lambda s: s.id)
    return samples


def save_dataset(samples, root, manifest_rows=None) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_image(root / "images" / f"{s.id}.png", s.image)
        write_mask(root / "masks" / f"{s.id}.png", s.mask)
    if manifest_rows is not None:
        lines = ["id\tseed\ttamper_fraction"]
        lines += [f"{r['id']}\t{r['seed']}\t{r['tamper_fraction']:.6f}" for r in manifest_rows]
        (root / "manifest.tsv").write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------- synthetic splices


def _texture(rng: np.random.Generator, size: int, noise_sigma: float) -> np.ndarray:
    """Smooth colour field + oriented grating + sensor-like Gaussian noise, float 0..255."""
    coarse = rng.uniform(0, 1, size=(int(rng.integers(3, 9)),) * 2 + (3,)).astype(np.float32)
    base = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
    lo, hi = sorted(rng.uniform(30, 225, size=2))
    base = lo + (hi - lo) * np.clip(base, 0, 1)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.05, 0.4)
    grating = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + rng.uniform(0, 2 * np.pi))
    amp = rng.uniform(5, 25)
    tint = rng.uniform(0.5, 1.0, size=3)
    img = base + amp * grating[..., None] * tint
    img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    return img


def _region(rng: np.random.Generator, size: int) -> np.ndarray:
    """Random filled ellipse or star-shaped polygon, float 0/1."""
    canvas = np.zeros((size, size), dtype=np.uint8)
    cx, cy = rng.uniform(0.2, 0.8, size=2) * size
    if rng.random() < 0.5:
        axes = (max(1, int(rng.uniform(0.08, 0.35) * size)), max(1, int(rng.uniform(0.08, 0.35) * size)))
        cv2.ellipse(canvas, (int(cx), int(cy)), axes, float(rng.uniform(0, 180)), 0, 360, 1, -1)
    else:
        n = int(rng.integers(3, 9))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        radii = rng.uniform(0.08, 0.4, size=n) * size
        pts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
        cv2.fillPoly(canvas, [np.round(pts).astype(np.int32)], 1)
    return canvas.astype(np.float32)


def _splice_one(seed: int, index: int, size: int) -> tuple[Sample, float]:
    rng = sample_rng(seed, index)
    # host and donor come from different "cameras": distinct noise levels
    quiet, loud = rng.uniform(1.0, 4.0), rng.uniform(9.0, 16.0)
    if rng.random() < 0.5:
        quiet, loud = loud, quiet
    host = _texture(rng, size, quiet)
    donor = _texture(rng, size, loud)
    lo, hi = TAMPER_FRACTION_RANGE
    while True:
        hard = _region(rng, size)
        if lo <= hard.mean() <= hi:
            break
    alpha = hard
    if rng.random() < 0.5:
        alpha = cv2.GaussianBlur(hard, (3, 3), 0.8)
    mask = (alpha >= 0.5).astype(np.uint8)
    if not lo <= mask.mean() <= hi:
        # feathering pushed the fraction out of range; keep the hard edge
        alpha, mask = hard, hard.astype(np.uint8)
    frac = float(mask.mean())
    # the pasted content differs in overall intensity from the host, plus a small colour shift
    offset = rng.uniform(40, 70) * rng.choice((-1.0, 1.0))
    donor = donor - donor.mean() + host.mean() + offset + rng.uniform(-8, 8, size=3)
    out = host * (1 - alpha[..., None]) + donor * alpha[..., None]
    image = np.clip(np.round(out), 0, 255).astype(np.uint8)
    return Sample(image=image, mask=mask, id=f"synth_{seed}_{index:05d}"), frac


def synth_splice(seed: int, count: int, size: int = 64, with_manifest: bool = False):
    """Generate ``count`` spliced images of ``size x size`` pixels.

    Each sample pastes an ellipse or polygon from one procedural texture into
    another. Output depends only on (seed, index).
    """
    if size % 8:
        raise ValueError(f"size must be divisible by 8, got {size}")
    samples, rows = [], []
    for i in range(count):
        s, frac = _splice_one(seed, i, size)
        samples.append(s)
        rows.append({"id": s.id, "seed": seed, "tamper_fraction": frac})
    return (samples, rows) if with_manifest else samples


# ---------------------------------------------------------------------- attacks

ATTACK_KINDS = ("resize", "gaussian_blur", "gaussian_noise", "jpeg")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    parameter: float

    def __post_init__(self):
        k, p = self.kind, self.parameter
        if k not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {k!r}")
        if k == "resize" and not p > 0:
            raise ValueError(f"resize factor must be positive, got {p}")
        if k == "gaussian_blur" and (p != int(p) or p < 1 or int(p) % 2 == 0):
            raise ValueError(f"blur kernel size must be a positive odd integer, got {p}")
        if k == "gaussian_noise" and p < 0:
            raise ValueError(f"noise sigma must be non-negative, got {p}")
        if k == "jpeg" and (p != int(p) or not 1 <= p <= 100):
            raise ValueError(f"jpeg quality must be an integer in [1, 100], got {p}")

    @property
    def label(self) -> str:
        p = self.parameter
        return {
            "resize": f"Resize({p:g}x)",
            "gaussian_blur": f"GaussianBlur(size={int(p)})",
            "gaussian_noise": f"GaussianNoise(sigma={p:g})",
            "jpeg": f"JPEGCompress({int(p)})",
        }[self.kind]


DEFAULT_ATTACK_GRID: list[AttackSpec | None] = [
    None,
    AttackSpec("resize", 0.78),
    AttackSpec("resize", 0.25),
    AttackSpec("gaussian_blur", 3),
    AttackSpec("gaussian_blur", 5),
    AttackSpec("gaussian_noise", 3),
    AttackSpec("gaussian_noise", 5),
    AttackSpec("jpeg", 50),
    AttackSpec("jpeg", 100),
]


def attack_label(spec: AttackSpec | None) -> str:
    return "None" if spec is None else spec.label


def blur_sigma(ksize: int) -> float:
    return 0.3 * ((ksize - 1) * 0.5 - 1) + 0.8


def jpeg_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    """Encode/decode through JPEG at ``quality`` with 4:4:4 chroma sampling."""
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="JPEG", quality=int(quality), subsampling=0)
    buf.seek(0)
    with Image.open(buf) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)


def apply_attack(sample: Sample, spec: AttackSpec | None, seed: int = 0) -> Sample:
    """Return an attacked copy; only resize touches the mask (nearest-neighbour)."""
    if spec is None:
        return sample
    img, mask = sample.image, sample.mask
    if spec.kind == "resize":
        h, w = mask.shape
        nh, nw = max(1, round(h * spec.parameter)), max(1, round(w * spec.parameter))
        img = cv2.resize(img, (nw, nh), interpolation=cv2.INTER_LINEAR)
        mask = cv2.resize(mask, (nw, nh), interpolation=cv2.INTER_NEAREST)
    elif spec.kind == "gaussian_blur":
        k = int(spec.parameter)
        img = cv2.GaussianBlur(img, (k, k), blur_sigma(k))
    elif spec.kind == "gaussian_noise":
        if spec.parameter > 0:
            noise = sample_rng(seed, sample.id).normal(0.0, spec.parameter, size=img.shape)
            img = np.clip(np.round(img.astype(np.float64) + noise), 0, 255).astype(np.uint8)
    else:
        img = jpeg_roundtrip(img, int(spec.parameter))
    return Sample(image=img, mask=mask.copy(), id=sample.id)


def random_crop_flip(sample: Sample, crop: int, rng: np.random.Generator) -> Sample:
    """Training augmentation: zero-pad to at least ``crop``, random crop, random h-flip."""
    img, mask = sample.image, sample.mask
    h, w = mask.shape
    ph, pw = max(0, crop - h), max(0, crop - w)
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)))
        mask = np.pad(mask, ((0, ph), (0, pw)))
        h, w = mask.shape
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    img, mask = img[y : y + crop, x : x + crop], mask[y : y + crop, x : x + crop]
    if rng.random() < 0.5:
        img, mask = img[:, ::-1], mask[:, ::-1]
    return Sample(image=np.ascontiguousarray(img), mask=np.ascontiguousarray(mask), id=sample.id)
