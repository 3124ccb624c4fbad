"""Toy ViT encoder: patch tokens, position tables, attention blocks, head.

Token indices are 1-based in raster order (#1..#P); position-table row 0
belongs to the class token.  The forward pass is batched: patches arrive as
``(B, P, patch_pixels**2)`` and position plans as ``(B, P)`` integer arrays.
"""

from __future__ import annotations

import io
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

PE_KINDS = ("none", "sinusoidal-1d", "grid-2d", "relative")
CHECKPOINT_MAGIC = b"SSPEVIT1"
NO_POSITION = -1  # plan entry for a token whose position embedding was dropped


@dataclass
class TokenGrid:
    grid_rows: int
    grid_cols: int
    patch_pixels: int
    tokens: np.ndarray  # (P, patch_pixels**2)

    @property
    def num_tokens(self) -> int:
        return self.grid_rows * self.grid_cols

    def cell(self, k: int) -> tuple[int, int]:
        """Grid cell (row, col) of 1-based token index ``k``."""
        return divmod(k - 1, self.grid_cols)

    def replace(self, tokens: np.ndarray) -> "TokenGrid":
        return TokenGrid(self.grid_rows, self.grid_cols, self.patch_pixels, tokens)


@dataclass
class PositionTable:
    kind: str
    table: np.ndarray
    grid_rows: int = 0
    grid_cols: int = 0


def embed_patches(image: np.ndarray, patch_pixels: int) -> TokenGrid:
    """Cut a grayscale raster into non-overlapping square tiles, row-major.

    Integer rasters are treated as 8-bit and scaled by 1/255; float rasters
    are assumed to be in [0, 1] already and are clipped.
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("expected a 2-D grayscale raster")
    h, w = img.shape
    if patch_pixels <= 0 or h % patch_pixels or w % patch_pixels:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch_pixels}")
    if np.issubdtype(img.dtype, np.integer):
        img = img.astype(np.float64) / 255.0
    else:
        img = np.clip(img.astype(np.float64), 0.0, 1.0)
    gr, gc = h // patch_pixels, w // patch_pixels
    tiles = img.reshape(gr, patch_pixels, gc, patch_pixels).transpose(0, 2, 1, 3)
    return TokenGrid(gr, gc, patch_pixels, tiles.reshape(gr * gc, patch_pixels * patch_pixels))


def sinusoidal_pe(num_positions: int, d: int) -> PositionTable:
    """Sine on even columns, cosine on odd columns.

    Column j uses the frequency 1 / 10000**(2j/d) for even j and
    1 / 10000**(2(j-1)/d) for odd j, so columns 2m and 2m+1 do not share a
    frequency.
    """
    return PositionTable("sinusoidal-1d", _sinusoid(np.arange(num_positions, dtype=np.float64), d))


def _sinusoid(pos: np.ndarray, d: int) -> np.ndarray:
    if d <= 0 or d % 2:
        raise ValueError(f"embedding dimension must be a positive even number, got {d}")
    j = np.arange(d)
    exponent = np.where(j % 2 == 0, 2.0 * j / d, 2.0 * (j - 1) / d)
    angles = pos[:, None] / np.power(10000.0, exponent)[None, :]
    return np.where(j % 2 == 0, np.sin(angles), np.cos(angles))


def grid_2d_pe(grid_rows: int, grid_cols: int, d: int) -> PositionTable:
    """Row coordinate in the first d/2 columns, column coordinate in the rest."""
    if d % 4:
        raise ValueError(f"2-D position embedding needs d divisible by 4, got {d}")
    rows, cols = np.divmod(np.arange(grid_rows * grid_cols), grid_cols)
    half = d // 2
    table = np.zeros((grid_rows * grid_cols + 1, d))
    table[1:, :half] = _sinusoid(rows.astype(np.float64), half)
    table[1:, half:] = _sinusoid(cols.astype(np.float64), half)
    return PositionTable("grid-2d", table, grid_rows, grid_cols)


def relative_pe(grid_rows: int, grid_cols: int, d: int) -> PositionTable:
    """One row per 2-D offset (dr, dc) plus a final row for the class token.

    Offset rows are initialised with the 2-D sinusoid of (dr, dc); they are
    trained and projected to one additive attention bias per head.
    """
    if d % 2:
        raise ValueError(f"embedding dimension must be even, got {d}")
    half = d // 2
    dr = np.arange(-(grid_rows - 1), grid_rows, dtype=np.float64)
    dc = np.arange(-(grid_cols - 1), grid_cols, dtype=np.float64)
    rr, cc = np.meshgrid(dr, dc, indexing="ij")
    n_off = rr.size
    table = np.zeros((n_off + 1, d))
    if half % 2 == 0:
        table[:n_off, :half] = _sinusoid(rr.ravel(), half)
        table[:n_off, half:] = _sinusoid(cc.ravel(), half)
    else:
        table[:n_off] = _sinusoid(rr.ravel() * (2 * grid_cols - 1) + cc.ravel(), d)
    return PositionTable("relative", table, grid_rows, grid_cols)


def relative_offset_index(grid_rows: int, grid_cols: int, plans: np.ndarray) -> np.ndarray:
    """Offset-row index for every (query, key) pair of the class+patch sequence.

    ``plans`` is ``(B, P)`` of PE rows (1..P, or NO_POSITION).  A token sits at
    the grid cell of the PE row it was assigned.  Pairs involving the class
    token or a dropped position use the dedicated last row.
    """
    plans = np.atleast_2d(plans)
    b, p = plans.shape
    n_cols_off = 2 * grid_cols - 1
    special = (2 * grid_rows - 1) * n_cols_off
    valid = plans >= 1
    r, c = np.divmod(np.where(valid, plans - 1, 0), grid_cols)
    idx = (r[:, :, None] - r[:, None, :] + grid_rows - 1) * n_cols_off + (
        c[:, :, None] - c[:, None, :] + grid_cols - 1
    )
    idx = np.where(valid[:, :, None] & valid[:, None, :], idx, special)
    out = np.full((b, p + 1, p + 1), special, dtype=np.int64)
    out[:, 1:, 1:] = idx
    return out


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class EncoderConfig:
    patch_pixels: int = 16
    grid_rows: int = 3
    grid_cols: int = 3
    d: int = 32
    heads: int = 4
    depth: int = 2
    mlp_hidden: int = 64
    pe_kind: str = "sinusoidal-1d"
    pe_learnable: bool = False
    ln_eps: float = 1e-5
    num_classes: int = 2

    def __post_init__(self):
        if self.d % 2:
            raise ValueError("d must be even")
        if self.heads < 1 or self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.pe_kind not in PE_KINDS:
            raise ValueError(f"unknown pe kind {self.pe_kind!r}")
        if self.pe_kind == "grid-2d" and self.d % 4:
            raise ValueError("grid-2d needs d divisible by 4")

    @property
    def num_tokens(self) -> int:
        return self.grid_rows * self.grid_cols


def build_position_table(cfg: EncoderConfig) -> PositionTable:
    p = cfg.num_tokens
    if cfg.pe_kind == "none":
        return PositionTable("none", np.zeros((p + 1, cfg.d)), cfg.grid_rows, cfg.grid_cols)
    if cfg.pe_kind == "sinusoidal-1d":
        t = sinusoidal_pe(p + 1, cfg.d)
        t.grid_rows, t.grid_cols = cfg.grid_rows, cfg.grid_cols
        return t
    if cfg.pe_kind == "grid-2d":
        return grid_2d_pe(cfg.grid_rows, cfg.grid_cols, cfg.d)
    return relative_pe(cfg.grid_rows, cfg.grid_cols, cfg.d)


@dataclass
class EncoderParams:
    """All weights of the encoder, in a fixed declaration order."""

    config: EncoderConfig
    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.config,
            OrderedDict(
                (k, Tensor(t.value.copy(), requires_grad=t.requires_grad))
                for k, t in self.tensors.items()
            ),
        )

    def num_parameters(self) -> int:
        return sum(t.value.size for t in self.trainable())

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator) -> "EncoderParams":
        d, h = cfg.d, cfg.mlp_hidden
        n_in = cfg.patch_pixels**2
        t: OrderedDict[str, Tensor] = OrderedDict()

        def weight(name, fan_in, fan_out):
            t[name] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)), True)

        def zeros(name, n):
            t[name] = Tensor(np.zeros(n), True)

        def ones(name, n):
            t[name] = Tensor(np.ones(n), True)

        weight("patch_projection", n_in, d)
        zeros("patch_bias", d)
        t["class_token"] = Tensor(rng.normal(0.0, 0.02, d), True)
        for i in range(cfg.depth):
            ones(f"block{i}.ln1_gain", d)
            zeros(f"block{i}.ln1_bias", d)
            for m in "qkvo":
                weight(f"block{i}.w{m}", d, d)
                zeros(f"block{i}.b{m}", d)
            ones(f"block{i}.ln2_gain", d)
            zeros(f"block{i}.ln2_bias", d)
            weight(f"block{i}.mlp_w1", d, h)
            zeros(f"block{i}.mlp_b1", h)
            weight(f"block{i}.mlp_w2", h, d)
            zeros(f"block{i}.mlp_b2", d)
        ones("final_ln_gain", d)
        zeros("final_ln_bias", d)
        weight("head", d, cfg.num_classes)
        zeros("head_bias", cfg.num_classes)
        pe = build_position_table(cfg)
        if cfg.pe_kind == "relative":
            t["rel_table"] = Tensor(pe.table.copy(), True)
            t["rel_proj"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (d, cfg.heads)), True)
        elif cfg.pe_learnable and cfg.pe_kind != "none":
            t["pos_table"] = Tensor(pe.table.copy(), True)
        return cls(cfg, t)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = x @ w
    return y if b is None else y + b


def multi_head_attention(
    x: Tensor,
    wq: Tensor, bq: Tensor,
    wk: Tensor, bk: Tensor,
    wv: Tensor, bv: Tensor,
    wo: Tensor, bo: Tensor,
    heads: int,
    relative_bias: Tensor | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention over ``heads`` heads on ``(..., T, d)``.

    ``relative_bias`` is added to the logits and must broadcast to
    ``(..., heads, T, T)``.
    """
    x = nx.as_tensor(x)
    *lead, t_len, d = x.shape
    if d % heads:
        raise ValueError(f"d={d} is not divisible by heads={heads}")
    if wq.shape != (d, d):
        raise ValueError(f"query projection shape {wq.shape} does not match d={d}")
    dh = d // heads
    lead = tuple(lead)
    n = len(lead)
    perm = tuple(range(n)) + (n + 1, n, n + 2)

    def split(z: Tensor) -> Tensor:
        return z.reshape(lead + (t_len, heads, dh)).transpose(*perm)

    q = split(linear(x, wq, bq))
    k = split(linear(x, wk, bk))
    v = split(linear(x, wv, bv))
    kt_perm = tuple(range(n + 1)) + (n + 2, n + 1)
    logits = (q @ k.transpose(*kt_perm)) * (1.0 / math.sqrt(dh))
    if relative_bias is not None:
        logits = logits + relative_bias
    weights = nx.softmax(logits)
    ctx = (weights @ v).transpose(*perm).reshape(lead + (t_len, d))
    out = linear(ctx, wo, bo)
    return (out, weights) if return_weights else out


def _position_embeddings(params: EncoderParams, pe: PositionTable, plans: np.ndarray) -> Tensor | None:
    cfg = params.config
    if cfg.pe_kind in ("none", "relative"):
        return None
    table = params["pos_table"] if "pos_table" in params else Tensor(pe.table)
    # extra zero row serves dropped positions
    ext = nx.concat([table, Tensor(np.zeros((1, cfg.d)))], axis=0)
    idx = np.where(plans >= 0, plans, ext.shape[0] - 1)
    b = plans.shape[0]
    rows = np.concatenate([np.zeros((b, 1), dtype=np.int64), idx], axis=1)
    return nx.take_rows(ext, rows)


def _relative_bias(params: EncoderParams, plans: np.ndarray) -> Tensor:
    cfg = params.config
    per_offset = params["rel_table"] @ params["rel_proj"]  # (n_off+1, heads)
    idx = relative_offset_index(cfg.grid_rows, cfg.grid_cols, plans)
    bias = nx.take_rows(per_offset, idx)  # (B, T, T, heads)
    return bias.transpose(0, 3, 1, 2)


def check_plans(plans: np.ndarray, num_tokens: int) -> np.ndarray:
    plans = np.atleast_2d(np.asarray(plans))
    if plans.shape[1] != num_tokens:
        raise ValueError(f"plan length {plans.shape[1]} != number of tokens {num_tokens}")
    for row in plans:
        used = row[row != NO_POSITION]
        if np.any(used < 1) or np.any(used > num_tokens) or len(np.unique(used)) != len(used):
            raise ValueError(f"plan {row.tolist()} is not a permutation of 1..{num_tokens}")
    return plans.astype(np.int64)


def encode_batch(
    patches: np.ndarray,
    pe: PositionTable,
    plans: np.ndarray,
    params: EncoderParams,
    validate: bool = True,
) -> Tensor:
    """Logits ``(B, num_classes)`` for a batch of patch-token matrices."""
    cfg = params.config
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim == 2:
        patches = patches[None]
    b, p, _ = patches.shape
    if p != cfg.num_tokens:
        raise ValueError(f"expected {cfg.num_tokens} tokens, got {p}")
    plans = check_plans(plans, p) if validate else np.asarray(plans, dtype=np.int64)

    tokens = linear(Tensor(patches), params["patch_projection"], params["patch_bias"])
    cls = params["class_token"].reshape(1, 1, cfg.d) + Tensor(np.zeros((b, 1, cfg.d)))
    x = nx.concat([cls, tokens], axis=1)
    pos = _position_embeddings(params, pe, plans)
    if pos is not None:
        x = x + pos
    rel = _relative_bias(params, plans) if cfg.pe_kind == "relative" else None

    for i in range(cfg.depth):
        pre = f"block{i}."
        h = nx.layer_norm_t(x, params[pre + "ln1_gain"], params[pre + "ln1_bias"], cfg.ln_eps)
        x = x + multi_head_attention(
            h,
            params[pre + "wq"], params[pre + "bq"],
            params[pre + "wk"], params[pre + "bk"],
            params[pre + "wv"], params[pre + "bv"],
            params[pre + "wo"], params[pre + "bo"],
            cfg.heads,
            relative_bias=rel,
        )
        h = nx.layer_norm_t(x, params[pre + "ln2_gain"], params[pre + "ln2_bias"], cfg.ln_eps)
        h = nx.gelu_t(linear(h, params[pre + "mlp_w1"], params[pre + "mlp_b1"]))
        x = x + linear(h, params[pre + "mlp_w2"], params[pre + "mlp_b2"])

    cls_out = x[:, 0, :]
    cls_out = nx.layer_norm_t(cls_out, params["final_ln_gain"], params["final_ln_bias"], cfg.ln_eps)
    return linear(cls_out, params["head"], params["head_bias"])


def identity_plan(num_tokens: int) -> np.ndarray:
    return np.arange(1, num_tokens + 1, dtype=np.int64)


def encode(tokens: TokenGrid, pe: PositionTable, plan, params: EncoderParams) -> np.ndarray:
    """Logits for a single token grid; ``plan[k-1]`` is the PE row of token #k."""
    assignment = getattr(plan, "assignment", plan)
    if assignment is None:
        assignment = identity_plan(tokens.num_tokens)
    return encode_batch(tokens.tokens[None], pe, np.asarray(assignment)[None], params).value[0]


# ---------------------------------------------------------------------------
# Checkpoint
# ---------------------------------------------------------------------------


def save_checkpoint(params: EncoderParams, path: str | Path, extra: dict | None = None) -> None:
    """Magic, u32 header length, JSON header, then each tensor as <f8, in order."""
    header = {
        "config": asdict(params.config),
        "tensors": [[name, list(t.shape), t.requires_grad] for name, t in params.tensors.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for t in params.tensors.values():
        buf.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[EncoderParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not an SSPEVIT1 checkpoint")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + n].decode("utf-8"))
    offset = 12 + n
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape, trainable in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(raw):
            raise ValueError("truncated checkpoint")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64)
        tensors[name] = Tensor(arr.reshape(shape), requires_grad=trainable)
        offset += nbytes
    if offset != len(raw):
        raise ValueError("trailing bytes in checkpoint")
    return EncoderParams(EncoderConfig(**header["config"]), tensors), header.get("extra", {})
