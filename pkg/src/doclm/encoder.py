"""Layout-aware document encoder producing a fixed 512-row feature sequence."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .data import CODEC, COORD_MAX, Document, render_image
from .nn import Block, Embedding, LayerNorm, Linear, Module
from .tensor import Tensor

FEATURE_LEN = 512
# "text" drops box embeddings, "vision" drops byte embeddings; both keep the page image
MODALITIES = ("full", "text", "vision")


class EncoderError(ValueError):
    pass


@dataclass
class EncoderConfig:
    d_enc: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq: int = FEATURE_LEN
    coord_buckets: int = COORD_MAX + 1
    patch_grid: int = 4
    image_size: int = 32
    vocab_size: int = CODEC.vocab_size
    modality: str = "full"

    def validate(self) -> list[str]:
        problems = []
        if self.max_seq != FEATURE_LEN:
            problems.append(f"encoder.max_seq must be {FEATURE_LEN}")
        if self.coord_buckets != COORD_MAX + 1:
            problems.append(f"encoder.coord_buckets must be {COORD_MAX + 1}")
        if self.d_enc < 1 or self.n_heads < 1 or self.d_enc % self.n_heads:
            problems.append("encoder.d_enc must be a positive multiple of encoder.n_heads")
        if self.n_layers < 0:
            problems.append("encoder.n_layers must be >= 0")
        if self.patch_grid < 1 or self.image_size % self.patch_grid:
            problems.append("encoder.image_size must be divisible by encoder.patch_grid")
        if 1 + self.patch_grid**2 > self.max_seq:
            problems.append("encoder.patch_grid too large for the sequence")
        if self.vocab_size < CODEC.vocab_size:
            problems.append(f"encoder.vocab_size must be >= {CODEC.vocab_size}")
        if self.modality not in MODALITIES:
            problems.append(f"encoder.modality must be one of {MODALITIES}")
        return problems


@dataclass(frozen=True)
class LayoutToken:
    token_id: int
    box: tuple[int, int, int, int]

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (0 <= x0 <= x1 <= COORD_MAX and 0 <= y0 <= y1 <= COORD_MAX):
            raise EncoderError(f"box {self.box} outside [0, {COORD_MAX}] or inverted")

    @property
    def width(self) -> int:
        return self.box[2] - self.box[0]

    @property
    def height(self) -> int:
        return self.box[3] - self.box[1]


@dataclass
class DocumentFeatures:
    features: Tensor
    valid_len: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != FEATURE_LEN:
            raise EncoderError(f"features must be {FEATURE_LEN} x d, got {self.features.shape}")
        if not 0 <= self.valid_len <= FEATURE_LEN:
            raise EncoderError(f"valid_len {self.valid_len} outside [0, {FEATURE_LEN}]")

    @property
    def width(self) -> int:
        return self.features.shape[1]


class DocumentEncoder(Protocol):
    """Anything that maps a Document to 512 feature rows can feed the adapter."""

    d_out: int

    def encode(self, doc: Document, pad_rows: bool = True) -> DocumentFeatures: ...

    def named_parameters(self, prefix: str = ""): ...


def layout_tokens(doc: Document) -> list[LayoutToken]:
    """Byte tokens of every word, each carrying its word's normalized box."""
    out = []
    for (text, _), box in zip(doc.words, doc.normalized_boxes()):
        out.extend(LayoutToken(b, box) for b in CODEC.encode(text))
    return out


def page_image(doc: Document, size: int) -> np.ndarray:
    """The page as a size x size ink map in [0, 1] (1 = black)."""
    img = doc.image
    if img is None:
        img = render_image(doc.normalized_boxes(), size)
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (size, size):
        rows = np.arange(size) * img.shape[0] // size
        cols = np.arange(size) * img.shape[1] // size
        img = img[np.ix_(rows, cols)]
    return 1.0 - img / 255.0


class LayoutEncoder(Module):
    """Token + 1D position + six box-bucket embeddings, image patches, pre-norm blocks.

    Sequence layout: ``[CLS] text-bytes patches PAD...``. When text overflows,
    text bytes are dropped from the tail; patches are always kept.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        problems = cfg.validate()
        if problems:
            raise EncoderError("; ".join(problems))
        self.cfg = cfg
        d = cfg.d_enc
        self.tok = Embedding(cfg.vocab_size, d, rng)
        self.pos = Embedding(cfg.max_seq, d, rng)
        self.x0 = Embedding(cfg.coord_buckets, d, rng)
        self.y0 = Embedding(cfg.coord_buckets, d, rng)
        self.x1 = Embedding(cfg.coord_buckets, d, rng)
        self.y1 = Embedding(cfg.coord_buckets, d, rng)
        self.w = Embedding(cfg.coord_buckets, d, rng)
        self.h = Embedding(cfg.coord_buckets, d, rng)
        patch = cfg.image_size // cfg.patch_grid
        self.patch = Linear(patch * patch, d, rng)
        self.patch_pos = Embedding(cfg.patch_grid**2, d, rng)
        self.blocks = [Block(d, cfg.n_heads, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d)

    @property
    def d_out(self) -> int:
        return self.cfg.d_enc

    @property
    def text_capacity(self) -> int:
        return self.cfg.max_seq - 1 - self.cfg.patch_grid**2

    def embed_tokens(self, tokens: Sequence[LayoutToken], start: int = 0) -> Tensor:
        """Embeddings for ``tokens`` placed at 1D positions ``start, start+1, ...``."""
        ids = np.array([t.token_id for t in tokens], dtype=np.int64)
        boxes = np.array([t.box for t in tokens], dtype=np.int64).reshape(-1, 4)
        positions = np.arange(start, start + len(tokens))
        x = self.pos(positions)
        if self.cfg.modality != "vision":
            x = x + self.tok(ids)
        if self.cfg.modality != "text":
            x = (
                x + self.x0(boxes[:, 0]) + self.y0(boxes[:, 1]) + self.x1(boxes[:, 2])
                + self.y1(boxes[:, 3]) + self.w(boxes[:, 2] - boxes[:, 0]) + self.h(boxes[:, 3] - boxes[:, 1])
            )
        else:
            zero = np.zeros(len(tokens), dtype=np.int64)
            x = (
                x + self.x0(zero) + self.y0(zero) + self.x1(zero)
                + self.y1(zero) + self.w(zero) + self.h(zero)
            )
        return x

    def embed_layout_token(self, token: LayoutToken, position: int = 1) -> Tensor:
        return self.embed_tokens([token], start=position)[0]

    def patchify(self, image: np.ndarray) -> Tensor:
        """Split an ink map into grid x grid patches, project each, add patch positions."""
        g = self.cfg.patch_grid
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 2 or image.shape[0] % g or image.shape[1] % g:
            raise EncoderError(f"image shape {image.shape} not divisible by grid {g}")
        ph, pw = image.shape[0] // g, image.shape[1] // g
        if ph * pw != self.patch.d_in:
            raise EncoderError(f"patch of {ph}x{pw} pixels does not match projection width {self.patch.d_in}")
        patches = image.reshape(g, ph, g, pw).transpose(0, 2, 1, 3).reshape(g * g, ph * pw)
        return self.patch(Tensor(patches)) + self.patch_pos(np.arange(g * g))

    def run_blocks(self, x: Tensor, valid_len: int) -> Tensor:
        for blk in self.blocks:
            x = blk(x, causal=False, key_len=valid_len)
        return self.ln_f(x)

    def encode(self, doc: Document, pad_rows: bool = True) -> DocumentFeatures:
        """512 feature rows for ``doc``.

        With ``pad_rows=False`` only the valid rows run through the blocks and
        the padding rows are constant zeros. Valid rows never attend to padding,
        so they come out the same either way; use it when nothing downstream
        reads the padding rows.
        """
        cfg = self.cfg
        tokens = [LayoutToken(CODEC.BOS, (0, 0, 0, 0))] + layout_tokens(doc)[: self.text_capacity]
        parts = [self.embed_tokens(tokens), self.patchify(page_image(doc, cfg.image_size))]
        valid = len(tokens) + cfg.patch_grid**2
        if valid == cfg.max_seq:
            return DocumentFeatures(self.run_blocks(T.concat(parts, axis=0), valid), valid)
        if not pad_rows:
            h = self.run_blocks(T.concat(parts, axis=0), valid)
            zeros = Tensor(np.zeros((cfg.max_seq - valid, cfg.d_enc)))
            return DocumentFeatures(T.concat([h, zeros], axis=0), valid)
        parts.append(T.embedding(self.tok.weight, np.full(cfg.max_seq - valid, CODEC.PAD)))
        return DocumentFeatures(self.run_blocks(T.concat(parts, axis=0), valid), valid)
