"""Synthetic crack images, the interval-based test split, and PNM file I/O."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, ParseError

MORPHOLOGIES = ("linear", "branching", "reticulated")


@dataclass
class Sample:
    image: np.ndarray     # float [3,H,W] in [0,1]
    mask: np.ndarray      # uint8 [H,W] in {0,1}
    id: str = ""


# ---------------------------------------------------------------- generator

def _smooth_noise(rng: np.random.Generator, h: int, w: int, cell: int = 8) -> np.ndarray:
    gh, gw = h // cell + 2, w // cell + 2
    coarse = rng.normal(size=(gh, gw))
    ys = np.linspace(0, gh - 1.001, h)
    xs = np.linspace(0, gw - 1.001, w)
    rows = np.array([np.interp(xs, np.arange(gw), r) for r in coarse])          # [gh, w]
    return np.array([np.interp(ys, np.arange(gh), rows[:, j]) for j in range(w)]).T


_BRUSHES = {
    1: [(0, 0)],
    2: [(0, 0), (0, 1), (1, 0), (1, 1)],
    3: [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)],
}


def _walk(rng, mask, start, heading, width, max_steps):
    """Paint an 8-connected serpentine walk from ``start``; returns the visited points."""
    h, w = mask.shape
    r, c = start
    curvature = rng.normal(0.0, 0.05)
    pts = []
    for _ in range(max_steps):
        if not (0 <= r < h and 0 <= c < w):
            break
        pts.append((r, c))
        for dr, dc in _BRUSHES[width]:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w:
                mask[rr, cc] = 1
        curvature = float(np.clip(curvature + rng.normal(0.0, 0.03), -0.15, 0.15))
        heading += curvature + rng.normal(0.0, 0.2)
        # max(|sin|, |cos|) >= 1/sqrt(2), so at least one component rounds to +-1
        r += int(round(math.sin(heading)))
        c += int(round(math.cos(heading)))
    return pts


def _crack(rng, mask, branching: bool):
    h, w = mask.shape
    start = (int(rng.integers(h // 4, h - h // 4)), int(rng.integers(w // 4, w - w // 4)))
    heading = rng.uniform(0, 2 * math.pi)
    width = int(rng.integers(1, 4))
    limit = 2 * (h + w)
    pts = _walk(rng, mask, start, heading, width, limit)
    pts += _walk(rng, mask, start, heading + math.pi, width, limit)
    if branching:
        spawned = 0
        for p in pts[1:]:
            if rng.random() < 0.03:
                turn = rng.choice([-1, 1]) * rng.uniform(math.pi / 6, math.pi / 2)
                _walk(rng, mask, p, heading + turn, max(1, width - 1), limit // 3)
                spawned += 1
        if spawned == 0:
            p = pts[len(pts) // 2]
            _walk(rng, mask, p, heading + math.pi / 3, max(1, width - 1), limit // 3)


def render_crack_sample(seed: int, h: int, w: int, morphology: str = "linear",
                        crack_free: bool = False) -> tuple:
    """Return ``(texture, darkened, noise, mask)``; the image is ``clip(darkened + noise)``."""
    if h < 16 or w < 16:
        raise InvalidArgument(f"synthetic samples need H, W >= 16, got {h}x{w}")
    if morphology not in MORPHOLOGIES:
        raise InvalidArgument(f"unknown morphology {morphology!r}")
    rng = np.random.Generator(np.random.PCG64(seed))
    base = rng.uniform(0.5, 0.75)
    gray = base + 0.06 * _smooth_noise(rng, h, w) + 0.02 * _smooth_noise(rng, h, w, cell=3)
    tint = rng.uniform(0.9, 1.05, size=3)
    texture = np.clip(gray[None] * tint[:, None, None], 0.2, 0.95)

    mask = np.zeros((h, w), dtype=np.uint8)
    if not crack_free:
        if morphology == "reticulated":
            for _ in range(int(rng.integers(3, 7))):
                _crack(rng, mask, branching=rng.random() < 0.5)
        else:
            _crack(rng, mask, branching=morphology == "branching")
    depth = rng.uniform(0.45, 0.65)
    darkened = texture * (1.0 - depth * mask[None])
    noise = rng.normal(0.0, 0.02, size=texture.shape)
    return texture, darkened, noise, mask


def gen_crack_sample(seed: int, h: int, w: int, morphology: str = "linear",
                     crack_free: bool = False) -> Sample:
    _, darkened, noise, mask = render_crack_sample(seed, h, w, morphology, crack_free)
    image = np.clip(darkened + noise, 0.0, 1.0)
    return Sample(image, mask, f"{morphology if not crack_free else 'noncrack'}-{seed}")


# ---------------------------------------------------------------- split

@dataclass(frozen=True)
class SplitSpec:
    total: int
    test_count: int
    interval: float

    def test_indices(self) -> list:
        return [(k * self.total) // self.test_count for k in range(self.test_count)]


def split_dataset(total: int, ratio=0.05) -> tuple:
    """Pick every ``m``-th item as test, ``m = N / n`` and ``n = round_half_up(N * ratio)``.

    Returns ``(spec, test_indices, train_indices)``.
    """
    if total < 1:
        raise InvalidArgument("dataset must contain at least one item")
    exact = total * Fraction(str(ratio))
    n = max(1, math.floor(exact + Fraction(1, 2)))
    n = min(n, total)
    spec = SplitSpec(total, n, total / n)
    test = spec.test_indices()
    chosen = set(test)
    train = [i for i in range(total) if i not in chosen]
    return spec, test, train


# ---------------------------------------------------------------- PNM

def write_pnm(path, pixels: np.ndarray) -> None:
    """Write uint8 ``[H,W]`` as P5 or ``[H,W,3]`` as P6, maxval 255."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise InvalidArgument("PNM pixels must be uint8")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise InvalidArgument(f"cannot write pixel array of shape {pixels.shape}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def parse_pnm(buf: bytes) -> np.ndarray:
    if buf[:2] not in (b"P5", b"P6"):
        raise ParseError("not a binary PGM/PPM (expected P5 or P6)", 0)
    channels = 1 if buf[:2] == b"P5" else 3
    pos = 2
    values = []
    while len(values) < 3:
        # whitespace and comments between header tokens
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                end = buf.find(b"\n", pos)
                pos = len(buf) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError("malformed PNM header", start)
        values.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after PNM header", pos)
    pos += 1
    w, h, maxval = values
    if w < 1 or h < 1:
        raise ParseError(f"invalid PNM size {w}x{h}", pos)
    if not 0 < maxval < 256:
        raise ParseError(f"unsupported maxval {maxval} (8-bit only)", pos)
    need = w * h * channels
    if len(buf) - pos < need:
        raise ParseError(f"truncated PNM payload: need {need} bytes, have {len(buf) - pos}", len(buf))
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return px.reshape(h, w) if channels == 1 else px.reshape(h, w, 3)


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_pnm(fh.read()).copy()


def image_to_bytes(image: np.ndarray) -> np.ndarray:
    """float [3,H,W] in [0,1] -> uint8 [H,W,3], rounding half up."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def write_image(path, image: np.ndarray) -> None:
    write_pnm(path, image_to_bytes(image))


def read_image(path) -> np.ndarray:
    """float [C,H,W] in [0,1]; grayscale files are replicated to 3 channels."""
    px = read_pnm(path).astype(np.float64) / 255.0
    if px.ndim == 2:
        px = np.repeat(px[None], 3, axis=0)
    else:
        px = px.transpose(2, 0, 1)
    return np.ascontiguousarray(px)


def write_mask(path, mask: np.ndarray) -> None:
    write_pnm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


def read_mask(path) -> np.ndarray:
    """Any nonzero pixel counts as crack."""
    px = read_pnm(path)
    if px.ndim == 3:
        px = px.max(axis=2)
    return (px > 0).astype(np.uint8)


# ---------------------------------------------------------------- datasets on disk

MANIFEST_FIELDS = ("id", "morphology", "seed", "split")


def generate_dataset(out_dir, count: int, size: int, seed: int, crack_free_frac: float = 0.25) -> list:
    """Write ``images/<id>.ppm``, ``masks/<id>.pgm`` and ``manifest.tsv``; returns manifest rows."""
    if count < 1:
        raise InvalidArgument("count must be >= 1")
    if not 0.0 <= crack_free_frac <= 1.0:
        raise InvalidArgument("crack-free fraction must be in [0, 1]")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    n_free = math.floor(count * Fraction(str(crack_free_frac)) + Fraction(1, 2))
    picker = np.random.Generator(np.random.PCG64(seed))
    free = set(int(i) for i in picker.permutation(count)[:n_free])
    _, test, _ = split_dataset(count)
    test = set(test)
    rows = []
    k = 0
    for i in range(count):
        sid = f"{i:05d}"
        sample_seed = seed * 1_000_003 + i
        if i in free:
            morph, crack_free = "noncrack", True
        else:
            morph, crack_free = MORPHOLOGIES[k % 3], False
            k += 1
        s = gen_crack_sample(sample_seed, size, size, morph if not crack_free else "linear", crack_free)
        write_image(out / "images" / f"{sid}.ppm", s.image)
        write_mask(out / "masks" / f"{sid}.pgm", s.mask)
        rows.append({"id": sid, "morphology": morph, "seed": str(sample_seed),
                     "split": "test" if i in test else "train"})
    with open(out / "manifest.tsv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, MANIFEST_FIELDS, delimiter="\t", lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)
    return rows


def read_manifest(data_dir) -> list:
    with open(Path(data_dir) / "manifest.tsv", newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def load_dataset(data_dir, split: str | None = None) -> tuple:
    """Return ``(ids, images [N,3,H,W], masks [N,H,W])`` for one split (or all)."""
    rows = read_manifest(data_dir)
    if split not in (None, "all"):
        rows = [r for r in rows if r["split"] == split]
    ids, images, masks = [], [], []
    for r in rows:
        ids.append(r["id"])
        images.append(read_image(os.path.join(data_dir, "images", f"{r['id']}.ppm")))
        masks.append(read_mask(os.path.join(data_dir, "masks", f"{r['id']}.pgm")))
    if not ids:
        return ids, np.zeros((0, 3, 1, 1)), np.zeros((0, 1, 1), np.uint8)
    return ids, np.stack(images), np.stack(masks)
