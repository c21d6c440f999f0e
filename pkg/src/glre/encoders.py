"""Toy image/text encoders producing local and global feature matrices.

Both encoders emit a LocalGlobalFeatures pair: per-region or per-token rows
(L2-normalized) plus one normalized global vector. The image side mean-pools
each grid region to a small patch vector and projects it; the text side looks
up token embeddings. Global vectors are a projection of the mean of the
pre-normalization rows. Precomputed features can also be loaded from a GLRE1
file so external encoders can feed the same downstream code.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, FormatError, ShapeError, VocabularyError
from . import numerics as nm
from .numerics import Tensor


@dataclass
class ImageGrid:
    """Grayscale image with a fixed (gr, gc) region tiling."""

    pixels: np.ndarray
    region_grid: tuple[int, int] = (3, 3)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ShapeError(f"image pixels must be 2-D, got shape {self.pixels.shape}")
        gr, gc = self.region_grid
        h, w = self.pixels.shape
        if gr < 1 or gc < 1 or h % gr or w % gc:
            raise ShapeError(
                f"image {h}x{w} not divisible by region grid {gr}x{gc}"
            )
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("pixel intensities must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def region_count(self) -> int:
        return self.region_grid[0] * self.region_grid[1]

    def region_pixels(self, index: int) -> np.ndarray:
        """Pixel block of region `index`, regions numbered row-major."""
        gr, gc = self.region_grid
        rh, rw = self.height // gr, self.width // gc
        i, j = divmod(index, gc)
        return self.pixels[i * rh : (i + 1) * rh, j * rw : (j + 1) * rw]


@dataclass(frozen=True)
class TokenSequence:
    """Ordered vocabulary IDs for one text, bounded by max_length."""

    ids: tuple[int, ...]
    vocab_size: int
    max_length: int = 97

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if len(self.ids) < 1:
            raise ShapeError("token sequence must contain at least one token")
        if len(self.ids) > self.max_length:
            raise ShapeError(
                f"sequence length {len(self.ids)} exceeds max_length {self.max_length}"
            )
        for i in self.ids:
            if i < 0 or i >= self.vocab_size:
                raise VocabularyError(
                    f"token id {i} outside vocabulary of size {self.vocab_size}"
                )

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class LocalGlobalFeatures:
    """Unit-norm local rows plus one unit-norm global vector."""

    local: Tensor
    global_feat: Tensor
    modality: str

    def __post_init__(self):
        if self.modality not in ("image", "text"):
            raise ValueError(f"modality must be image or text, got {self.modality!r}")


PARAM_NAMES = ("patch_proj", "patch_bias", "token_table", "global_proj_image", "global_proj_text")


@dataclass
class EncoderParams:
    """All trainable tensors for the two toy encoders.

    patch_proj: [P x D] projection of pooled patch vectors (P = patch_pool^2);
    token_table: [V x D] embeddings; global_proj_*: [D x D] per modality.
    """

    patch_proj: Tensor
    patch_bias: Tensor
    token_table: Tensor
    global_proj_image: Tensor
    global_proj_text: Tensor
    patch_pool: int = 8
    use_positions: bool = False

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"embedding dimension must be >= 2, got {self.dim}")
        for name in PARAM_NAMES:
            t = getattr(self, name)
            if not np.all(np.isfinite(t.data)):
                raise ValueError(f"parameter {name} contains non-finite values")

    @property
    def dim(self) -> int:
        return self.patch_proj.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.token_table.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def initialize(cls, dim: int, vocab_size: int, patch_pool: int = 8,
                   use_positions: bool = False, rng: np.random.Generator | None = None,
                   init_scale: float = 0.05) -> "EncoderParams":
        """Seeded uniform(-init_scale, init_scale) initialization.

        The small scale keeps initial cosines near zero, so the initial
        contrastive loss sits near ln(batch size).
        """
        rng = rng if rng is not None else np.random.default_rng(0)
        p = patch_pool * patch_pool

        def u(*shape):
            return Tensor(rng.uniform(-init_scale, init_scale, size=shape),
                          requires_grad=True)

        return cls(
            patch_proj=u(p, dim),
            patch_bias=u(dim),
            token_table=u(vocab_size, dim),
            global_proj_image=u(dim, dim),
            global_proj_text=u(dim, dim),
            patch_pool=patch_pool,
            use_positions=use_positions,
        )


def adaptive_mean_pool(block: np.ndarray, out: int) -> np.ndarray:
    """Average-pool a 2-D block to out x out cells with near-equal spans."""
    h, w = block.shape
    if h < out or w < out:
        raise ShapeError(f"cannot pool {h}x{w} block to {out}x{out}")
    pooled = np.empty((out, out))
    for i in range(out):
        r0, r1 = i * h // out, (i + 1) * h // out
        for j in range(out):
            c0, c1 = j * w // out, (j + 1) * w // out
            pooled[i, j] = block[r0:r1, c0:c1].mean()
    return pooled


def image_patch_matrix(img: ImageGrid, patch_pool: int) -> np.ndarray:
    """R x P matrix of pooled-and-flattened region patches."""
    rows = [adaptive_mean_pool(img.region_pixels(r), patch_pool).ravel()
            for r in range(img.region_count)]
    return np.stack(rows)


def sinusoidal_positions(length: int, dim: int, scale: float = 0.05) -> np.ndarray:
    """Fixed sine/cosine position table, scaled to the embedding init range."""
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return scale * table


def _global_from_rows(pre_rows: Tensor, proj: Tensor) -> Tensor:
    """Normalized projection of the mean of pre-normalization rows."""
    mean = nm.reshape(nm.mean_rows(pre_rows), (1, pre_rows.shape[1]))
    g = nm.matmul(mean, proj)
    return nm.reshape(nm.l2_normalize_rows(g), (proj.shape[1],))


def encode_image_patches(patches: np.ndarray, params: EncoderParams) -> LocalGlobalFeatures:
    """Project pre-pooled R x P patch vectors; lets callers cache the pooling."""
    if patches.ndim != 2 or patches.shape[1] != params.patch_proj.shape[0]:
        raise ShapeError(
            f"patch matrix shape {patches.shape} does not match projection "
            f"{params.patch_proj.shape}"
        )
    pre = nm.add(nm.matmul(nm.constant(patches), params.patch_proj), params.patch_bias)
    local = nm.l2_normalize_rows(pre)
    global_feat = _global_from_rows(pre, params.global_proj_image)
    return LocalGlobalFeatures(local=local, global_feat=global_feat, modality="image")


def encode_image_toy(img: ImageGrid, params: EncoderParams) -> LocalGlobalFeatures:
    """Mean-pool each region to a patch vector, project, normalize.

    The global vector projects the mean of the un-normalized region features,
    so it keeps magnitude information that per-row normalization discards.
    """
    return encode_image_patches(image_patch_matrix(img, params.patch_pool), params)


def encode_text_toy(seq: TokenSequence, params: EncoderParams) -> LocalGlobalFeatures:
    """Embedding lookup per token (optional sinusoidal positions), normalize."""
    if seq.vocab_size != params.vocab_size:
        raise VocabularyError(
            f"sequence vocabulary {seq.vocab_size} != table size {params.vocab_size}"
        )
    pre = nm.row_gather(params.token_table, list(seq.ids))
    if params.use_positions:
        pre = nm.add(pre, nm.constant(sinusoidal_positions(len(seq), params.dim)))
    local = nm.l2_normalize_rows(pre)
    global_feat = _global_from_rows(pre, params.global_proj_text)
    return LocalGlobalFeatures(local=local, global_feat=global_feat, modality="text")


# ---------------------------------------------------------------------------
# GLRE1 embedding files
# ---------------------------------------------------------------------------

_MAGIC = b"GLRE1"
_MODALITY_CODE = {"image": 0, "text": 1}
_MODALITY_NAME = {0: "image", 1: "text"}


def save_embeddings(path, items: dict[str, LocalGlobalFeatures]) -> None:
    """Write features keyed by study ID in the GLRE1 binary layout."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for study_id, feats in items.items():
            raw_id = study_id.encode("utf-8")
            if len(raw_id) > 0xFFFF:
                raise ValueError(f"study id too long to encode: {study_id!r}")
            local = np.asarray(feats.local.data, dtype=np.float32)
            glob = np.asarray(feats.global_feat.data, dtype=np.float32)
            rows, dim = local.shape
            if glob.shape != (dim,):
                raise ShapeError(
                    f"global vector shape {glob.shape} does not match D={dim}"
                )
            fh.write(struct.pack("<H", len(raw_id)))
            fh.write(raw_id)
            fh.write(struct.pack("<BII", _MODALITY_CODE[feats.modality], rows, dim))
            fh.write(local.astype("<f4").tobytes())
            fh.write(glob.astype("<f4").tobytes())


class _Reader:
    """Byte cursor that reports its offset in truncation errors."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(
                f"truncated embedding file: expected {n} bytes for {what}",
                offset=self.pos,
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out


def _safe_renormalize(mat: np.ndarray) -> np.ndarray:
    norms = np.sqrt((mat * mat).sum(axis=1, keepdims=True))
    return np.where(norms > 1e-12, mat / np.where(norms > 0, norms, 1.0), mat)


def load_external_embeddings(path) -> dict[str, LocalGlobalFeatures]:
    """Read a GLRE1 file; rows are re-normalized against f32 rounding drift."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic = r.take(len(_MAGIC), "magic")
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}", offset=0)
    (count,) = struct.unpack("<I", r.take(4, "record count"))
    out: dict[str, LocalGlobalFeatures] = {}
    shared_dim: int | None = None
    for k in range(count):
        (id_len,) = struct.unpack("<H", r.take(2, f"id length of record {k}"))
        study_id = r.take(id_len, f"id of record {k}").decode("utf-8")
        mod_code, rows, dim = struct.unpack("<BII", r.take(9, f"header of record {k}"))
        if mod_code not in _MODALITY_NAME:
            raise FormatError(f"unknown modality code {mod_code}", offset=r.pos - 9)
        if shared_dim is None:
            shared_dim = dim
        elif dim != shared_dim:
            raise ConsistencyError(
                f"record {study_id!r} has D={dim}, earlier records have D={shared_dim}"
            )
        local = np.frombuffer(
            r.take(4 * rows * dim, f"local rows of record {k}"), dtype="<f4"
        ).astype(np.float64).reshape(rows, dim)
        glob = np.frombuffer(
            r.take(4 * dim, f"global vector of record {k}"), dtype="<f4"
        ).astype(np.float64)
        local = _safe_renormalize(local)
        glob = _safe_renormalize(glob[None, :])[0]
        out[study_id] = LocalGlobalFeatures(
            local=nm.constant(local),
            global_feat=nm.constant(glob),
            modality=_MODALITY_NAME[mod_code],
        )
    return out


# ---------------------------------------------------------------------------
# 8-bit grayscale PGM (P5)
# ---------------------------------------------------------------------------


def write_pgm(path, pixels: np.ndarray) -> None:
    """Write intensities in [0,1] as a maxval-255 binary PGM."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"PGM pixels must be 2-D, got shape {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError("pixel intensities must lie in [0, 1]")
    quant = np.rint(arr * 255.0).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quant.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into float intensities in [0,1]."""
    with open(path, "rb") as fh:
        blob = fh.read()

    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(blob):
            c = blob[pos : pos + 1]
            if c == b"#":
                while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", offset=start)
        return blob[start:pos]

    magic = next_token()
    if magic != b"P5":
        raise FormatError(f"bad PGM magic {magic!r}, expected b'P5'", offset=0)
    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError as exc:
        raise FormatError(f"non-numeric PGM header field: {exc}", offset=pos) from exc
    if width < 1 or height < 1:
        raise FormatError(f"bad PGM dimensions {width}x{height}", offset=pos)
    if maxval != 255:
        raise FormatError(f"only 8-bit PGM supported, maxval {maxval}", offset=pos)
    pos += 1  # single whitespace byte after maxval
    need = width * height
    raster = blob[pos : pos + need]
    if len(raster) < need:
        raise FormatError(
            f"truncated PGM raster: expected {need} bytes, got {len(raster)}",
            offset=pos,
        )
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return arr.astype(np.float64) / 255.0
