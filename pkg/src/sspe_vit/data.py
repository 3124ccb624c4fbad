"""Synthetic localized-signal images, binary PGM I/O, manifests and splits."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import GRADES, KL0, KL2, KeySet

SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ("path", "grade", "split", "id")


# ---------------------------------------------------------------------------
# Binary PGM (P5)
# ---------------------------------------------------------------------------


class PNMError(ValueError):
    code = "pnm-error"


class MalformedHeader(PNMError):
    code = "malformed-header"


class TruncatedPayload(PNMError):
    code = "truncated-payload"


class UnsupportedMaxval(PNMError):
    code = "unsupported-maxval"


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def parse_pgm(raw: bytes) -> np.ndarray:
    """Decode a P5 byte string into a uint8 array of shape (height, width)."""
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise MalformedHeader("header ended early")
        fields.append(m.group(1))
        pos = m.end()
    magic, *nums = fields
    if magic != b"P5":
        raise MalformedHeader(f"bad magic {magic!r}")
    try:
        width, height, maxval = (int(x) for x in nums)
    except ValueError as exc:
        raise MalformedHeader(f"non-numeric header field in {nums}") from exc
    if width <= 0 or height <= 0:
        raise MalformedHeader(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedMaxval("unsupported maxval")
    if pos >= len(raw) or raw[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise MalformedHeader("missing whitespace after maxval")
    pos += 1
    need = width * height
    payload = raw[pos : pos + need]
    if len(payload) < need:
        raise TruncatedPayload(f"expected {need} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def encode_pgm(pixels: np.ndarray) -> bytes:
    px = np.asarray(pixels)
    if px.ndim != 2 or px.dtype != np.uint8:
        raise ValueError("expected a 2-D uint8 array")
    h, w = px.shape
    return b"P5\n%d %d\n255\n" % (w, h) + px.tobytes()


def read_pgm(path: str | Path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(pixels))


def load_image(path: str | Path) -> np.ndarray:
    """Grayscale raster scaled to [0, 1] (8-bit value / 255)."""
    return read_pgm(path).astype(np.float64) / 255.0


def quantize(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    path: str
    grade: str
    split: str
    sample_id: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)
    generator: dict = field(default_factory=dict)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict[tuple[str, str], int]:
        out: dict[tuple[str, str], int] = {}
        for e in self.entries:
            out[(e.grade, e.split)] = out.get((e.grade, e.split), 0) + 1
        return out

    def image_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def write(self, root: str | Path) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        path = root / "manifest.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_HEADER)
            for e in self.entries:
                w.writerow([e.path, e.grade, e.split, e.sample_id])
        if self.generator:
            (root / "generator.json").write_text(
                json.dumps(self.generator, indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )
        return path

    @classmethod
    def read(cls, root: str | Path) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.csv" if root.is_dir() else root
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        entries = [ManifestEntry(r["path"], r["grade"], r["split"], int(r["id"])) for r in rows]
        ids = [e.sample_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate sample ids in manifest")
        sidecar = path.parent / "generator.json"
        gen = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
        return cls(entries, path.parent, gen)


def split_dataset(
    entries: Sequence[ManifestEntry], rng: np.random.Generator, ratio: Sequence[int] = (7, 1, 2)
) -> list[ManifestEntry]:
    """Stratified train/val/test split.

    Per class, val and test receive floor(n * r / sum(ratio)) items and the
    remainder goes to train.
    """
    if len(ratio) != 3 or any(int(r) != r or r <= 0 for r in ratio):
        raise ValueError(f"ratio must be three positive integers, got {ratio}")
    total = sum(ratio)
    out: list[ManifestEntry] = []
    for grade in sorted({e.grade for e in entries}):
        group = [e for e in entries if e.grade == grade]
        n = len(group)
        if n < 10:
            raise ValueError(f"class {grade} has only {n} items (need at least 10)")
        n_val = n * ratio[1] // total
        n_test = n * ratio[2] // total
        order = rng.permutation(n)
        for rank, i in enumerate(order):
            split = "val" if rank < n_val else "test" if rank < n_val + n_test else "train"
            e = group[i]
            out.append(ManifestEntry(e.path, e.grade, split, e.sample_id))
    out.sort(key=lambda e: e.sample_id)
    return out


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


@dataclass
class SyntheticConfig:
    image_side: int = 48
    patch_pixels: int = 16
    key_cells: tuple[int, ...] = (4, 6)
    amplitude: float = 0.1
    noise_sigma: float = 0.12
    distractor_count: int = 7
    n0: int = 320
    n2: int = 210
    seed: int = 0
    background_level: float = 0.35
    background_swing: float = 0.08

    def __post_init__(self):
        self.key_cells = tuple(int(k) for k in self.key_cells)
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")
        if self.image_side % self.patch_pixels:
            raise ValueError("image side must be a multiple of the patch size")
        KeySet(self.key_cells).validate(self.num_cells)
        if not 0 <= self.distractor_count <= self.num_cells - len(self.key_cells):
            raise ValueError("distractor count exceeds the number of non-key cells")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_pixels

    @property
    def num_cells(self) -> int:
        return self.grid * self.grid


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, keys...) via SeedSequence mixing."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def motif(patch_pixels: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-height ellipse pair hugging the left and right edges of a cell."""
    s = patch_pixels
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    cy = (s - 1) / 2.0 + rng.integers(-1, 2)
    ry, rx = s / 4.0, s / 9.0
    left = ((yy - cy) / ry) ** 2 + ((xx - s * 0.2) / rx) ** 2 <= 1.0
    right = ((yy - cy) / ry) ** 2 + ((xx - (s - 1) + s * 0.2) / rx) ** 2 <= 1.0
    return (left | right).astype(np.float64)


def render_sample(cfg: SyntheticConfig, grade: str, rng: np.random.Generator) -> np.ndarray:
    n, s, g = cfg.image_side, cfg.patch_pixels, cfg.grid
    yy, xx = np.mgrid[0:n, 0:n] / n
    img = np.full((n, n), cfg.background_level)
    for _ in range(2):
        fy, fx = rng.uniform(0.3, 1.2, size=2)
        img += cfg.background_swing * np.cos(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    img += rng.normal(0.0, cfg.noise_sigma, size=(n, n))

    keys = set(cfg.key_cells)
    non_key = [k for k in range(1, cfg.num_cells + 1) if k not in keys]
    n_distract = int(rng.integers(0, cfg.distractor_count + 1))
    cells = [non_key[i] for i in rng.choice(len(non_key), size=n_distract, replace=False)]
    if grade == KL2:
        cells += sorted(keys)
    for k in cells:
        r, c = divmod(k - 1, g)
        img[r * s : (r + 1) * s, c * s : (c + 1) * s] += cfg.amplitude * motif(s, rng)
    return quantize(img)


def generate_synthetic(cfg: SyntheticConfig, out_dir: str | Path, ratio=(7, 1, 2)) -> DatasetManifest:
    """Write ``images/*.pgm``, ``manifest.csv`` and ``generator.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    grades = [KL0] * cfg.n0 + [KL2] * cfg.n2
    entries = []
    for sid, grade in enumerate(grades):
        px = render_sample(cfg, grade, sample_rng(cfg.seed, sid))
        rel = f"images/{sid:06d}.pgm"
        write_pgm(out / rel, px)
        entries.append(ManifestEntry(rel, grade, "train", sid))
    entries = split_dataset(entries, sample_rng(cfg.seed, 2**31 - 1), ratio)
    gen = asdict(cfg)
    gen["key_cells"] = list(cfg.key_cells)
    gen["ratio"] = list(ratio)
    manifest = DatasetManifest(entries, out, gen)
    manifest.write(out)
    return manifest


def cell_pixels(images: np.ndarray, cells: Sequence[int], patch_pixels: int) -> np.ndarray:
    """Flattened pixels of the listed 1-based cells, for a stack (N, H, W)."""
    n, h, w = images.shape
    g = w // patch_pixels
    parts = []
    for k in cells:
        r, c = divmod(k - 1, g)
        parts.append(
            images[:, r * patch_pixels : (r + 1) * patch_pixels, c * patch_pixels : (c + 1) * patch_pixels]
            .reshape(n, -1)
        )
    return np.concatenate(parts, axis=1)


def masked_key_pvalue(manifest: DatasetManifest, key_cells: Sequence[int], patch_pixels: int) -> float:
    """Welch t-test p-value comparing pixel sums of KL-0 vs KL-2 with key cells zeroed.

    A large p-value means the classes are indistinguishable once the key
    cells are hidden.
    """
    from scipy.stats import ttest_ind

    sums = {KL0: [], KL2: []}
    for e in manifest.entries:
        img = load_image(manifest.image_path(e))
        g = img.shape[1] // patch_pixels
        for k in key_cells:
            r, c = divmod(k - 1, g)
            img[r * patch_pixels : (r + 1) * patch_pixels, c * patch_pixels : (c + 1) * patch_pixels] = 0.0
        sums[e.grade].append(img.sum())
    return float(ttest_ind(sums[KL0], sums[KL2], equal_var=False).pvalue)


def load_split(manifest: DatasetManifest, split: str) -> tuple[np.ndarray, list[str], list[int]]:
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    images = np.stack([load_image(manifest.image_path(e)) for e in entries])
    return images, [e.grade for e in entries], [e.sample_id for e in entries]


__all__ = [
    "GRADES",
    "DatasetManifest",
    "ManifestEntry",
    "SyntheticConfig",
    "generate_synthetic",
    "split_dataset",
    "load_image",
    "read_pgm",
    "write_pgm",
]
