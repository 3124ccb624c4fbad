"""Position plans, key-patch exchange, conventional augmentation, oversampling."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence, TypeVar

import numpy as np

from .encoder import NO_POSITION, TokenGrid

KL0 = "KL-0"
KL2 = "KL-2"
GRADES = (KL0, KL2)
FULL_KL = "full-KL"
MIXED_KL = "mixed-KL"

T = TypeVar("T")


def grade_index(grade: str) -> int:
    return GRADES.index(grade)


@dataclass(frozen=True)
class KeySet:
    indices: tuple[int, ...] = (4, 6)

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise ValueError("key set must be non-empty")
        if len(set(idx)) != len(idx):
            raise ValueError(f"duplicate key indices in {idx}")
        object.__setattr__(self, "indices", idx)

    def validate(self, num_tokens: int) -> None:
        bad = [k for k in self.indices if not 1 <= k <= num_tokens]
        if bad:
            raise ValueError(f"key indices {bad} outside 1..{num_tokens}")

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)


@dataclass
class PositionPlan:
    """``assignment[k-1]`` is the PE row given to token #k (NO_POSITION if dropped)."""

    assignment: np.ndarray

    def __len__(self) -> int:
        return len(self.assignment)

    def __getitem__(self, k: int) -> int:
        return int(self.assignment[k - 1])

    def dropped(self) -> int:
        return int(np.sum(self.assignment == NO_POSITION))


def make_sspe_plan(num_tokens: int, key_set: KeySet, rng: np.random.Generator) -> PositionPlan:
    """Key tokens keep their own PE row; the remaining rows are shuffled among non-key tokens."""
    key_set.validate(num_tokens)
    assignment = np.arange(1, num_tokens + 1, dtype=np.int64)
    is_key = np.zeros(num_tokens, dtype=bool)
    is_key[np.asarray(key_set.indices) - 1] = True
    free = assignment[~is_key]
    assignment[~is_key] = rng.permutation(free)
    return PositionPlan(assignment)


def pe_dropout_plan(
    plan: PositionPlan, key_set: KeySet, rate: float, rng: np.random.Generator
) -> PositionPlan:
    """Replace each non-key assignment by NO_POSITION with probability ``rate``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    out = plan.assignment.copy()
    if rate == 0.0:
        return PositionPlan(out)
    non_key = np.ones(len(out), dtype=bool)
    non_key[np.asarray(key_set.indices) - 1] = False
    drop = (rng.random(len(out)) < rate) & non_key
    out[drop] = NO_POSITION
    return PositionPlan(out)


def assign_label(key_labels: Sequence[str]) -> str:
    """KL-0 only if every key patch comes from a KL-0 image."""
    if len(key_labels) == 0:
        raise ValueError("need at least one key label")
    return KL0 if all(g == KL0 for g in key_labels) else KL2


@dataclass
class LabeledGrid:
    grid: TokenGrid
    grade: str
    sample_id: Hashable


@dataclass
class LabeledSequence:
    tokens: TokenGrid
    label: str
    set_tag: str
    target_id: Hashable
    candidate_id: Hashable | None = None
    # key index -> "target" or "candidate"
    sources: dict[int, str] = field(default_factory=dict)


def original_sequence(target: LabeledGrid, key_set: KeySet) -> LabeledSequence:
    return LabeledSequence(
        target.grid,
        target.grade,
        FULL_KL,
        target.sample_id,
        None,
        {k: "target" for k in key_set},
    )


def exchange_key_patches(
    target: LabeledGrid,
    candidates: Sequence[LabeledGrid],
    key_set: KeySet,
    dedupe_identity: bool = False,
) -> list[LabeledSequence]:
    """All 2**|keys| target/candidate fillings of the key slots, per candidate.

    Non-key tokens always come from the target; key token #k is only ever
    taken from the candidate's token #k.
    """
    g = target.grid
    key_set.validate(g.num_tokens)
    keys = key_set.indices
    out: list[LabeledSequence] = []
    for cand in candidates:
        cg = cand.grid
        if (cg.grid_rows, cg.grid_cols, cg.patch_pixels) != (g.grid_rows, g.grid_cols, g.patch_pixels):
            raise ValueError("candidate geometry does not match target")
        if cand.sample_id == target.sample_id:
            raise ValueError(f"candidate {cand.sample_id!r} is the target itself")
        for choice in itertools.product((False, True), repeat=len(keys)):
            if dedupe_identity and not any(choice) and out:
                continue
            tokens = g.tokens.copy()
            key_grades = []
            sources = {}
            for k, from_cand in zip(keys, choice):
                if from_cand:
                    tokens[k - 1] = cg.tokens[k - 1]
                key_grades.append(cand.grade if from_cand else target.grade)
                sources[k] = "candidate" if from_cand else "target"
            tag = FULL_KL if len(set(key_grades)) == 1 else MIXED_KL
            out.append(
                LabeledSequence(
                    g.replace(tokens),
                    assign_label(key_grades),
                    tag,
                    target.sample_id,
                    cand.sample_id if any(choice) else None,
                    sources,
                )
            )
    return out


def draw_candidates(
    pool_ids: Sequence[Hashable], target_id: Hashable, n: int, rng: np.random.Generator
) -> list[Hashable]:
    """``n`` distinct ids drawn uniformly from the pool, never the target."""
    others = [i for i in pool_ids if i != target_id]
    if n > len(others):
        raise ValueError(f"cannot draw {n} candidates from {len(others)} images")
    picks = rng.choice(len(others), size=n, replace=False)
    return [others[i] for i in picks]


# ---------------------------------------------------------------------------
# Conventional augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentConfig:
    rotation_deg: float = 5.0
    brightness: tuple[float, float] = (0.9, 1.1)
    contrast: tuple[float, float] = (0.9, 1.1)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, (1.0, 1.0), (1.0, 1.0))


def rotate_nearest(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the centre, nearest neighbour, zero fill."""
    h, w = image.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output pixel -> source pixel
    y0, x0 = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    sx = c * x0 - s * y0 + cx
    sy = s * x0 + c * y0 + cy
    si = np.rint(sy).astype(np.int64)
    sj = np.rint(sx).astype(np.int64)
    inside = (si >= 0) & (si < h) & (sj >= 0) & (sj < w)
    out = np.zeros_like(image, dtype=np.float64)
    out[inside] = image[si[inside], sj[inside]]
    return out


def adjust_brightness(image: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(image * factor, 0.0, 1.0)


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    mean = image.mean()
    return np.clip((image - mean) * factor + mean, 0.0, 1.0)


def conventional_augment(image: np.ndarray, rng: np.random.Generator, config: AugmentConfig) -> np.ndarray:
    """Random rotation, brightness and contrast; output clamped to [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    angle = rng.uniform(-config.rotation_deg, config.rotation_deg)
    b = rng.uniform(*config.brightness)
    c = rng.uniform(*config.contrast)
    if angle != 0.0:
        img = rotate_nearest(img, angle)
    if b != 1.0:
        img = adjust_brightness(img, b)
    if c != 1.0:
        img = adjust_contrast(img, c)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Oversampling
# ---------------------------------------------------------------------------


def bootstrap_oversample(
    items: Sequence[T], rng: np.random.Generator, label: Callable[[T], Hashable] = lambda it: it[1]
) -> list[T]:
    """Top up the minority class with draws (with replacement) from itself.

    Every original item is kept exactly once; only the minority class gains
    duplicates, until both classes have the majority count.
    """
    groups: dict[Hashable, list[T]] = {}
    for it in items:
        groups.setdefault(label(it), []).append(it)
    if len(groups) != 2:
        raise ValueError(f"expected exactly two non-empty classes, got {sorted(map(str, groups))}")
    (_, a), (_, b) = sorted(groups.items(), key=lambda kv: str(kv[0]))
    minority, majority = (a, b) if len(a) < len(b) else (b, a)
    extra = len(majority) - len(minority)
    out = list(items)
    if extra:
        picks = rng.integers(0, len(minority), size=extra)
        out.extend(minority[i] for i in picks)
    return out
