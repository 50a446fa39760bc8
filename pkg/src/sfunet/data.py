"""Sample ingestion and generation.

On-disk formats: binary PGM (P5) and PPM (P6) with maxval <= 255 are parsed
and written natively; PNG loads through Pillow when it is installed. Labels
are single-channel files whose pixel values are raw class indices. The
synthetic-shapes generator stands in for real datasets at desk scale:
seeded value-noise backgrounds plus one non-overlapping ellipse per
foreground class, each in its own intensity band.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .tensor import RealTensor4

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


# ---------------------------------------------------------------------------
# PGM / PPM


def _read_pnm(data: bytes, path) -> np.ndarray:
    if data[:2] not in (b"P5", b"P6"):
        raise DataError(f"'{path}': unknown magic bytes {data[:2]!r} (expected P5 or P6)")
    channels = 1 if data[:2] == b"P5" else 3
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise DataError(f"'{path}': truncated header")
        ch = data[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(data) and data[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise DataError(f"'{path}': malformed header near byte {pos}")
    width, height, maxval = fields
    if maxval > 255 or maxval < 1:
        raise DataError(f"'{path}': unsupported maxval {maxval} (8-bit only)")
    pos += 1  # single whitespace byte after maxval
    need = width * height * channels
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise DataError(f"'{path}': truncated payload ({len(payload)} of {need} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(height, width) if channels == 1 else arr.reshape(height, width, 3)


def read_image_file(path) -> np.ndarray:
    """Read a PGM/PPM/PNG file into a uint8 [H,W] or [H,W,3] array."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read image '{path}': {exc}") from None
    if data[:2] in (b"P5", b"P6"):
        return _read_pnm(data, path)
    if data[: len(_PNG_SIGNATURE)] == _PNG_SIGNATURE:
        return _read_png(path)
    raise DataError(f"'{path}': unknown magic bytes {data[:2]!r}")


def _read_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError:
        raise DataError(f"'{path}': PNG support requires the optional Pillow dependency") from None
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L" if img.mode in ("L", "I;16", "1") else "RGB"))
    return arr.astype(np.uint8)


def write_pgm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim != 2:
        raise DataError(f"PGM payload must be 2-D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def write_ppm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"PPM payload must be [H,W,3], got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# resizing (bilinear for images, nearest for labels)


def _bilinear_axis(src: int, dst: int):
    pos = np.clip((np.arange(dst) + 0.5) * (src / dst) - 0.5, 0.0, src - 1.0)
    i0 = np.floor(pos).astype(np.intp)
    frac = pos - i0
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, frac


def resize_bilinear(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize [C,H,W] float data with half-pixel-center bilinear sampling."""
    c, h, w = img.shape
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return img.copy()
    y0, y1, ty = _bilinear_axis(h, oh)
    x0, x1, tx = _bilinear_axis(w, ow)
    wy0, wy1 = (1.0 - ty)[:, None], ty[:, None]
    wx0, wx1 = (1.0 - tx)[None, :], tx[None, :]
    return (
        (wy0 * wx0) * img[:, y0[:, None], x0[None, :]]
        + (wy0 * wx1) * img[:, y0[:, None], x1[None, :]]
        + (wy1 * wx0) * img[:, y1[:, None], x0[None, :]]
        + (wy1 * wx1) * img[:, y1[:, None], x1[None, :]]
    )


def resize_nearest(mask: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize an integer [H,W] mask without interpolating class indices."""
    h, w = mask.shape
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return mask.copy()
    ys = np.minimum((np.floor((np.arange(oh) + 0.5) * (h / oh))).astype(np.intp), h - 1)
    xs = np.minimum((np.floor((np.arange(ow) + 0.5) * (w / ow))).astype(np.intp), w - 1)
    return mask[ys[:, None], xs[None, :]].copy()


# ---------------------------------------------------------------------------
# samples


@dataclass
class SegmentationSample:
    """Paired image tensor (scaled to [0,1]) and integer label mask."""

    image: RealTensor4  # [1, C, H, W]
    label: np.ndarray  # [H, W] int64 in [0, K)
    id: str


def load_image(path, channels: int = 3, target_hw: tuple[int, int] | None = None) -> RealTensor4:
    """Load and scale by 1/255; grayscale replicates to a 3-channel request."""
    arr = read_image_file(path)
    if arr.ndim == 2:
        planes = arr[None].astype(np.float64)
    else:
        planes = arr.transpose(2, 0, 1).astype(np.float64)
    planes /= 255.0
    if planes.shape[0] == 1 and channels == 3:
        planes = np.repeat(planes, 3, axis=0)
    elif planes.shape[0] != channels:
        raise DataError(f"'{path}': has {planes.shape[0]} channels but {channels} were requested")
    if target_hw is not None:
        planes = resize_bilinear(planes, target_hw)
    return RealTensor4(planes[None], copy=False)


def load_label(path, n_classes: int, target_hw: tuple[int, int] | None = None) -> np.ndarray:
    arr = read_image_file(path)
    if arr.ndim != 2:
        raise DataError(f"'{path}': label files must be single-channel")
    if arr.max(initial=0) >= n_classes:
        bad = np.argwhere(arr >= n_classes)[0]
        raise DataError(
            f"'{path}': label value {int(arr[tuple(bad)])} at pixel ({bad[0]}, {bad[1]}) "
            f"exceeds class count {n_classes}"
        )
    mask = arr.astype(np.int64)
    if target_hw is not None:
        mask = resize_nearest(mask, target_hw)
    return mask


# ---------------------------------------------------------------------------
# manifests and splits

SPLITS = ("train", "val", "test")


@dataclass
class ManifestEntry:
    id: str
    image_path: str  # relative to the manifest directory
    label_path: str
    split: str


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(f"{e.id}\t{e.image_path}\t{e.label_path}\t{e.split}\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            if parts[3] not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split '{parts[3]}'")
            entries.append(ManifestEntry(*parts))
    return entries


def split_manifest(entries: list[ManifestEntry], fractions: tuple[float, float, float], seed: int) -> list[ManifestEntry]:
    """Seeded shuffle then contiguous train/val/test partition."""
    if not entries:
        raise DataError("cannot split an empty manifest")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    n = len(entries)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    order = np.random.default_rng(seed).permutation(n)
    assignment = {}
    for rank, idx in enumerate(order):
        if rank < n_train:
            assignment[idx] = "train"
        elif rank < n_train + n_val:
            assignment[idx] = "val"
        else:
            assignment[idx] = "test"
    return [
        ManifestEntry(e.id, e.image_path, e.label_path, assignment[i])
        for i, e in enumerate(entries)
    ]


def load_split(data_dir, split: str, channels: int, target_hw: tuple[int, int],
               n_classes: int) -> list[SegmentationSample]:
    manifest = os.path.join(data_dir, "manifest.tsv")
    if not os.path.exists(manifest):
        raise DataError(f"no manifest.tsv under '{data_dir}'")
    samples = []
    for e in read_manifest(manifest):
        if e.split != split:
            continue
        image = load_image(os.path.join(data_dir, e.image_path), channels, target_hw)
        label = load_label(os.path.join(data_dir, e.label_path), n_classes, target_hw)
        samples.append(SegmentationSample(image, label, e.id))
    return samples


# ---------------------------------------------------------------------------
# synthetic shapes dataset


def ellipse_mask(h: int, w: int, cy: float, cx: float, a: float, b: float, theta: float) -> np.ndarray:
    """Boolean rasterization of a rotated ellipse interior."""
    ys, xs = np.mgrid[0:h, 0:w]
    dy, dx = ys - cy, xs - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _value_noise(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(0.02, 0.22, size=(1, 5, 5))
    return resize_bilinear(coarse, (h, w))[0] + rng.uniform(0.0, 0.05, size=(h, w))


def _synth_sample(rng: np.random.Generator, n_classes: int, h: int, w: int):
    side = min(h, w)
    for _ in range(25):
        label = np.zeros((h, w), dtype=np.int64)
        img = _value_noise(rng, h, w)
        shapes = []
        ok = True
        for k in range(1, n_classes):
            placed = False
            for _ in range(40):
                cy = rng.uniform(0.2 * h, 0.8 * h)
                cx = rng.uniform(0.2 * w, 0.8 * w)
                a = rng.uniform(0.10 * side, 0.20 * side)
                b = rng.uniform(0.10 * side, 0.20 * side)
                theta = rng.uniform(0.0, np.pi)
                mask = ellipse_mask(h, w, cy, cx, a, b, theta)
                if mask.sum() >= 6 and not (mask & (label != 0)).any():
                    label[mask] = k
                    base = 0.7 if n_classes == 2 else 0.45 + 0.5 * (k - 1) / (n_classes - 2)
                    img[mask] = base + rng.uniform(-0.05, 0.05, size=int(mask.sum()))
                    shapes.append((cy, cx, a, b, theta, k))
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok:
            return np.clip(img, 0.0, 1.0), label, shapes
    raise DataError(f"could not place {n_classes - 1} non-overlapping ellipses on a {h}x{w} canvas")


def synth_generate(out_dir, count: int, n_classes: int, h: int, w: int, seed: int,
                   channels: int = 1, fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> str:
    """Write a deterministic synthetic dataset and its manifest; returns the manifest path."""
    if n_classes not in (2, 3, 4):
        raise ConfigError(f"synthetic classes must be 2, 3 or 4, got {n_classes}")
    if count < 1:
        raise ConfigError(f"sample count must be >= 1, got {count}")
    if channels not in (1, 3):
        raise ConfigError(f"synthetic channels must be 1 or 3, got {channels}")
    rng = np.random.default_rng(seed)
    img_dir = os.path.join(out_dir, "images")
    lab_dir = os.path.join(out_dir, "labels")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(lab_dir, exist_ok=True)
    entries = []
    ext = "pgm" if channels == 1 else "ppm"
    for i in range(count):
        img, label, _ = _synth_sample(rng, n_classes, h, w)
        sid = f"synth{i:04d}"
        gray = np.round(img * 255.0).astype(np.uint8)
        image_rel = f"images/{sid}.{ext}"
        if channels == 1:
            write_pgm(os.path.join(out_dir, image_rel), gray)
        else:
            tinted = np.stack(
                [gray, np.round(img * 0.92 * 255.0).astype(np.uint8), np.round(img * 0.84 * 255.0).astype(np.uint8)],
                axis=-1,
            )
            write_ppm(os.path.join(out_dir, image_rel), tinted)
        label_rel = f"labels/{sid}.pgm"
        write_pgm(os.path.join(out_dir, label_rel), label.astype(np.uint8))
        entries.append(ManifestEntry(sid, image_rel, label_rel, "train"))
    entries = split_manifest(entries, fractions, seed)
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    write_manifest(manifest_path, entries)
    return manifest_path
