"""Causal decoder, linear adapter, sequence assembly and greedy generation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import CODEC, Document
from .encoder import FEATURE_LEN, DocumentEncoder, DocumentFeatures, EncoderConfig, LayoutEncoder
from .nn import Block, Embedding, LayerNorm, Linear, Module
from .prompts import TaskSample
from .tensor import ContractError, Tensor


class SequenceLengthError(ContractError):
    pass


@dataclass
class DecoderConfig:
    d_dec: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = CODEC.vocab_size
    max_context: int = 1152
    loss_on_prompt: bool = False
    max_new_tokens: int = 96
    # hide encoder PAD rows from decoder attention; False lets every row see all 512
    mask_feature_padding: bool = True

    def validate(self) -> list[str]:
        problems = []
        if self.d_dec < 1 or self.n_heads < 1 or self.d_dec % self.n_heads:
            problems.append("decoder.d_dec must be a positive multiple of decoder.n_heads")
        if self.n_layers < 0:
            problems.append("decoder.n_layers must be >= 0")
        if self.max_context < FEATURE_LEN + 1:
            problems.append(f"decoder.max_context must be >= {FEATURE_LEN + 1}")
        if self.vocab_size < CODEC.vocab_size:
            problems.append(f"decoder.vocab_size must be >= {CODEC.vocab_size}")
        if self.max_new_tokens < 1:
            problems.append("decoder.max_new_tokens must be >= 1")
        return problems


@dataclass
class AssembledSequence:
    """``prefix ++ prompt ++ response`` with positions numbered 0..T-1 throughout.

    Prefix rows from ``prefix_valid`` on are encoder padding. They keep their
    positions but no other row may attend to them.
    """

    prefix: Tensor | None
    prompt_ids: list[int]
    response_ids: list[int]
    loss_mask: np.ndarray
    prefix_valid: int | None = None

    @property
    def prefix_len(self) -> int:
        return 0 if self.prefix is None else self.prefix.shape[0]

    @property
    def n_valid_prefix(self) -> int:
        return self.prefix_len if self.prefix_valid is None else self.prefix_valid

    def __len__(self) -> int:
        return self.prefix_len + len(self.prompt_ids) + len(self.response_ids)

    def next_token_targets(self) -> tuple[np.ndarray, np.ndarray]:
        """Target id and mask for the prediction made at each position."""
        ids = np.concatenate([
            np.full(self.prefix_len, -1, dtype=np.int64),
            np.asarray(self.prompt_ids + self.response_ids, dtype=np.int64),
        ])
        targets = np.zeros(len(ids), dtype=np.int64)
        mask = np.zeros(len(ids), dtype=bool)
        targets[:-1] = np.maximum(ids[1:], 0)
        mask[:-1] = self.loss_mask[1:]
        return targets, mask


def build_loss_mask(prefix_len: int, n_prompt: int, n_response: int, on_prompt: bool = False) -> np.ndarray:
    mask = np.zeros(prefix_len + n_prompt + n_response, dtype=bool)
    mask[prefix_len + n_prompt:] = True
    if on_prompt:
        # the leading BOS is never a target
        mask[prefix_len + 1: prefix_len + n_prompt] = True
    return mask


def prompt_token_ids(prompt: str) -> list[int]:
    return [CODEC.BOS] + CODEC.encode(prompt)


def response_token_ids(target: str) -> list[int]:
    return CODEC.encode(target) + [CODEC.EOS]


def _pad_skip(prefix_len: int, valid: int) -> tuple[int, int] | None:
    return (valid, prefix_len) if valid < prefix_len else None


class Decoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        problems = cfg.validate()
        if problems:
            raise ContractError("; ".join(problems))
        self.cfg = cfg
        d = cfg.d_dec
        self.tok = Embedding(cfg.vocab_size, d, rng)
        self.pos = Embedding(cfg.max_context, d, rng)
        self.blocks = [Block(d, cfg.n_heads, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d)
        self.head = Linear(d, cfg.vocab_size, rng, bias=False)

    def embed(self, prefix: Tensor | None, ids, keep_prefix: int | None = None) -> Tensor:
        """Input rows for ``prefix ++ ids``.

        With ``keep_prefix`` only the first ``keep_prefix`` prefix rows are
        returned; positions of the token rows still count the full prefix.
        """
        ids = np.asarray(ids, dtype=np.int64)
        plen = 0 if prefix is None else prefix.shape[0]
        n = plen + ids.size
        if n > self.cfg.max_context:
            raise SequenceLengthError(f"sequence of {n} positions exceeds max_context {self.cfg.max_context}")
        keep = plen if keep_prefix is None else keep_prefix
        parts = []
        if keep:
            parts.append(prefix if keep == plen else prefix[:keep])
        if ids.size:
            parts.append(self.tok(ids))
        x = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
        positions = np.concatenate([np.arange(keep), np.arange(plen, n)])
        return x + self.pos(positions)

    def hidden(self, x: Tensor, key_skip: tuple[int, int] | None = None, q_start: int = 0) -> Tensor:
        """Final-layer states for rows ``q_start:``."""
        last = len(self.blocks) - 1
        for i, blk in enumerate(self.blocks):
            x = blk(x, causal=True, key_skip=key_skip, q_start=q_start if i == last else 0)
        if not self.blocks and q_start:
            x = x[q_start:]
        return x

    def logits_from_hidden(self, h: Tensor) -> Tensor:
        return self.head(self.ln_f(h))

    def forward_logits(self, seq: AssembledSequence) -> Tensor:
        """Logits at every position, padding rows included."""
        x = self.embed(seq.prefix, seq.prompt_ids + seq.response_ids)
        return self.logits_from_hidden(self.hidden(x, key_skip=_pad_skip(seq.prefix_len, seq.n_valid_prefix)))

    def loss(self, seq: AssembledSequence) -> Tensor:
        """Mean next-token cross-entropy over the positions selected by ``seq.loss_mask``.

        Padding rows are dropped before the forward pass and only the scored
        rows run through the last block; both are exact because nothing
        scored can see them.
        """
        if not seq.response_ids:
            raise ContractError("loss needs at least one response token")
        targets, mask = seq.next_token_targets()
        rows = np.flatnonzero(mask)
        dropped = seq.prefix_len - seq.n_valid_prefix
        if rows[0] < seq.prefix_len:
            raise ContractError("loss cannot score predictions made from prefix rows")
        first, last = rows[0] - dropped, rows[-1] - dropped
        x = self.embed(seq.prefix, seq.prompt_ids + seq.response_ids, keep_prefix=seq.n_valid_prefix)
        h = self.hidden(x[: last + 1], q_start=first)
        logits = self.logits_from_hidden(h if last - first + 1 == len(rows) else h[rows - dropped - first])
        return T.cross_entropy(logits, targets[rows])

    # -- inference with a key/value cache ----------------------------------
    def _layer_np(self, blk: Block, x: np.ndarray, cache: dict, start: int) -> np.ndarray:
        h = blk.attn.n_heads
        d = x.shape[1]
        dh = d // h
        qkv = blk.attn.wqkv.apply_np(blk.ln1.apply_np(x))
        n = x.shape[0]
        q, k, v = (qkv[:, i * d:(i + 1) * d].reshape(n, h, dh).transpose(1, 0, 2) for i in range(3))
        kc, vc = cache["k"], cache["v"]
        kc[:, start:start + n] = k
        vc[:, start:start + n] = v
        if start == 0:
            o = T.attention(Tensor(q), Tensor(k), Tensor(v), causal=True).data
        else:
            keys = kc[:, : start + n]
            s = q @ keys.transpose(0, 2, 1) * (1.0 / math.sqrt(dh))
            s -= s.max(axis=2, keepdims=True)
            np.exp(s, out=s)
            s /= s.sum(axis=2, keepdims=True)
            o = s @ vc[:, : start + n]
        x = x + blk.attn.wo.apply_np(o.transpose(1, 0, 2).reshape(n, d))
        m = blk.mlp
        hidden = m.fc1.apply_np(blk.ln2.apply_np(x))
        hidden = T.gelu(Tensor(hidden)).data
        return x + m.fc2.apply_np(hidden)

    def _run_np(self, x: np.ndarray, caches: list[dict], start: int) -> np.ndarray:
        for blk, cache in zip(self.blocks, caches):
            x = self._layer_np(blk, x, cache, start)
        return self.head.apply_np(self.ln_f.apply_np(x[-1:]))[0]

    def generate_greedy(self, prefix: Tensor | None, prompt_ids, max_new: int,
                        prefix_valid: int | None = None) -> list[int]:
        """Append argmax tokens (lowest id on ties) until EOS, ``max_new`` tokens, or a full context."""
        if max_new < 1:
            raise ContractError("max_new must be >= 1")
        cfg = self.cfg
        with T.no_grad():
            x = self.embed(prefix, prompt_ids, keep_prefix=prefix_valid).data
        # padding rows are invisible, so the cache only holds the rows that matter
        n = x.shape[0]
        pos = (0 if prefix is None else prefix.shape[0]) + len(prompt_ids)
        dh = cfg.d_dec // cfg.n_heads if cfg.n_layers else 0
        caches = [
            {"k": np.zeros((cfg.n_heads, cfg.max_context, dh)), "v": np.zeros((cfg.n_heads, cfg.max_context, dh))}
            for _ in self.blocks
        ]
        logits = self._run_np(x, caches, 0)
        out: list[int] = []
        while True:
            nxt = int(np.argmax(logits))
            if nxt == CODEC.EOS:
                break
            out.append(nxt)
            if len(out) >= max_new or pos >= cfg.max_context:
                break
            x = self.tok.weight.data[nxt] + self.pos.weight.data[pos]
            logits = self._run_np(x[None, :], caches, n)
            n += 1
            pos += 1
        return out


class LayoutLLM(Module):
    """Encoder, adapter and decoder; parameters live under ``encoder.``, ``adapter.``, ``decoder.``."""

    def __init__(self, encoder: DocumentEncoder, dec_cfg: DecoderConfig, rng: np.random.Generator):
        self.encoder = encoder
        self.adapter = Linear(encoder.d_out, dec_cfg.d_dec, rng)
        self.decoder = Decoder(dec_cfg, rng)

    @classmethod
    def build(cls, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, seed: int = 0) -> LayoutLLM:
        rng = np.random.default_rng(seed)
        return cls(LayoutEncoder(enc_cfg, rng), dec_cfg, rng)

    @property
    def cfg(self) -> DecoderConfig:
        return self.decoder.cfg

    def encode(self, doc: Document) -> DocumentFeatures:
        feats = self.encoder.encode(doc, pad_rows=not self.cfg.mask_feature_padding)
        if feats.features.shape[0] != FEATURE_LEN:
            raise ContractError(f"encoder produced {feats.features.shape[0]} rows, expected {FEATURE_LEN}")
        return feats

    def _valid(self, feats: DocumentFeatures | None) -> int | None:
        if feats is None or not self.cfg.mask_feature_padding:
            return None
        return feats.valid_len

    def project_features(self, feats: DocumentFeatures) -> Tensor:
        if feats.width != self.adapter.d_in:
            raise T.ShapeError(f"features of width {feats.width} but adapter expects {self.adapter.d_in}")
        return self.adapter(feats.features)

    def assemble(self, sample: TaskSample, feats: DocumentFeatures | None = None) -> AssembledSequence:
        if sample.kind.is_vrdu and feats is None:
            raise ContractError(f"{sample.kind.value} sample {sample.record_id!r} needs document features")
        if not sample.kind.is_vrdu and feats is not None:
            raise ContractError("text-only samples take no document features")
        if not sample.target:
            raise ContractError("empty response")
        prefix = None if feats is None else self.project_features(feats)
        prompt = prompt_token_ids(sample.prompt)
        response = response_token_ids(sample.target)
        plen = 0 if prefix is None else prefix.shape[0]
        mask = build_loss_mask(plen, len(prompt), len(response), self.cfg.loss_on_prompt)
        return AssembledSequence(prefix, prompt, response, mask, self._valid(feats))

    def sample_loss(self, sample: TaskSample, encoder_grad: bool = True) -> tuple[Tensor, int]:
        """Loss for one sample and the number of scored positions."""
        feats = None
        if sample.kind.is_vrdu:
            if encoder_grad:
                feats = self.encode(sample.doc)
            else:
                with T.no_grad():
                    feats = self.encode(sample.doc)
        seq = self.assemble(sample, feats)
        return self.decoder.loss(seq), int(seq.next_token_targets()[1].sum())

    def generate(self, sample: TaskSample, feats: DocumentFeatures | None = None, max_new: int | None = None) -> str:
        if sample.kind.is_vrdu and feats is None:
            with T.no_grad():
                feats = self.encode(sample.doc)
        return self.answer(sample.prompt, feats, max_new)

    def answer(self, prompt: str, feats: DocumentFeatures | None = None, max_new: int | None = None) -> str:
        """Greedy response to a rendered prompt, with optional document features in front."""
        with T.no_grad():
            prefix = None if feats is None else self.project_features(feats)
        ids = self.decoder.generate_greedy(prefix, prompt_token_ids(prompt), max_new or self.cfg.max_new_tokens,
                                           self._valid(feats))
        return CODEC.decode(ids)
