"""Compact trainable span-extraction model.

The encoder embeds the packed (question, passage) input, adds a fixed
sinusoidal positional table, and runs ``layers`` blocks of single-head
scaled dot-product self-attention and a position-wise feed-forward network,
each with residual connection and post layer norm. Two linear heads project
the contextual representation to per-position start/end logits; each head
adds a trainable per-position bias vector of length ``max_len``. Positions
outside the passage window (start token, question, separator, padding) are
forced to a large negative logit so they carry ~zero probability.

Forward passes build a reverse-mode graph (see ``numerics``); ``backward``
returns gradients for every trainable parameter. Checkpoints are a JSON
header followed by little-endian float64 parameter blocks in declared
order, and round-trip bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import numerics as nm
from .corpus import RESERVED_TOKENS, Sample
from .errors import InvalidConfig, ShapeError, SpanOutOfWindow, StateError

MASKED_LOGIT = -1e9

PAD_ID = 0
START_ID = 1
SEP_ID = 2
OOV_BASE_ID = 3
OOV_BUCKETS = 100
FIRST_TOKEN_ID = OOV_BASE_ID + OOV_BUCKETS

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden: int = 32
    ffn: int = 64
    max_len: int = 64
    layers: int = 1

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise InvalidConfig(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.hidden < 2 or self.hidden % 2 != 0:
            raise InvalidConfig("hidden size must be an even number >= 2")
        if self.ffn < 1 or self.max_len < 4 or self.layers < 0:
            raise InvalidConfig("bad model dimensions")


class Vocabulary:
    """Token-to-id map with deterministic hash buckets for unseen tokens."""

    def __init__(self, tokens):
        self.tokens = sorted(set(tokens))
        for token in self.tokens:
            if token in RESERVED_TOKENS:
                raise InvalidConfig(f"reserved marker {token!r} cannot enter the vocabulary")
        self._index = {t: FIRST_TOKEN_ID + i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_samples(cls, samples) -> "Vocabulary":
        tokens: set[str] = set()
        for s in samples:
            tokens.update(s.question_tokens)
            tokens.update(s.passage_tokens)
        return cls(tokens)

    @property
    def size(self) -> int:
        return FIRST_TOKEN_ID + len(self.tokens)

    def token_id(self, token: str) -> int:
        known = self._index.get(token)
        if known is not None:
            return known
        bucket = int(hashlib.sha1(token.encode("utf-8")).hexdigest(), 16) % OOV_BUCKETS
        return OOV_BASE_ID + bucket

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps({"oov_buckets": OOV_BUCKETS, "tokens": self.tokens},
                       sort_keys=True, separators=(",", ":")) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path) -> "Vocabulary":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if raw.get("oov_buckets") != OOV_BUCKETS:
            raise InvalidConfig("vocabulary file uses an incompatible bucket count")
        return cls(raw["tokens"])


@dataclass
class EncodedInput:
    """Packed model input: [START] question [SEP] passage, padded to max_len."""

    token_ids: np.ndarray          # (max_len,) int64
    separator_position: int
    passage_offset: int
    attention_mask: np.ndarray     # (max_len,) bool, True at real tokens
    passage_mask: np.ndarray       # (max_len,) bool, True at passage positions
    passage_window: int            # passage tokens that fit in the window
    gold_start: int                # gold span in packed coordinates
    gold_end: int


def tokenize_and_index(sample: Sample, vocab: Vocabulary, max_len: int) -> EncodedInput:
    """Pack a sample into model coordinates; raises SpanOutOfWindow when the
    gold span does not survive truncation."""
    q_ids = [vocab.token_id(t) for t in sample.question_tokens]
    p_ids = [vocab.token_id(t) for t in sample.passage_tokens]

    separator_position = 1 + len(q_ids)
    passage_offset = separator_position + 1
    if passage_offset >= max_len:
        raise SpanOutOfWindow(
            f"sample {sample.id}: question fills the whole window of {max_len}"
        )
    window = min(len(p_ids), max_len - passage_offset)
    gold_start = sample.gold_start + passage_offset
    gold_end = sample.gold_end + passage_offset
    if gold_end >= passage_offset + window:
        raise SpanOutOfWindow(
            f"sample {sample.id}: gold span ends at {gold_end}, window ends at "
            f"{passage_offset + window}"
        )

    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[0] = START_ID
    ids[1:separator_position] = q_ids
    ids[separator_position] = SEP_ID
    ids[passage_offset : passage_offset + window] = p_ids[:window]

    attention_mask = np.zeros(max_len, dtype=bool)
    attention_mask[: passage_offset + window] = True
    passage_mask = np.zeros(max_len, dtype=bool)
    passage_mask[passage_offset : passage_offset + window] = True

    return EncodedInput(
        token_ids=ids,
        separator_position=separator_position,
        passage_offset=passage_offset,
        attention_mask=attention_mask,
        passage_mask=passage_mask,
        passage_window=window,
        gold_start=gold_start,
        gold_end=gold_end,
    )


def encode_dataset(samples, vocab: Vocabulary, max_len: int):
    """Encode every sample, dropping and counting the out-of-window ones."""
    encoded: list[EncodedInput] = []
    kept: list[Sample] = []
    skipped = 0
    for sample in samples:
        try:
            encoded.append(tokenize_and_index(sample, vocab, max_len))
            kept.append(sample)
        except SpanOutOfWindow:
            skipped += 1
    return encoded, kept, skipped


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def parameter_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Declared parameter order; init, serialization, and the optimizer all
    iterate in exactly this order."""
    v, h, f, L = config.vocab_size, config.hidden, config.ffn, config.max_len
    layout: list[tuple[str, tuple[int, ...]]] = [("embed", (v, h))]
    for i in range(config.layers):
        prefix = f"layer{i}."
        layout += [
            (prefix + "attn_wq", (h, h)),
            (prefix + "attn_wk", (h, h)),
            (prefix + "attn_wv", (h, h)),
            (prefix + "attn_wo", (h, h)),
            (prefix + "ln1_gain", (h,)),
            (prefix + "ln1_offset", (h,)),
            (prefix + "ffn_w1", (h, f)),
            (prefix + "ffn_b1", (f,)),
            (prefix + "ffn_w2", (f, h)),
            (prefix + "ffn_b2", (h,)),
            (prefix + "ln2_gain", (h,)),
            (prefix + "ln2_offset", (h,)),
        ]
    layout += [
        ("start_vec", (h,)),
        ("start_bias", (L,)),
        ("end_vec", (h,)),
        ("end_bias", (L,)),
    ]
    return layout


def positional_table(max_len: int, hidden: int) -> np.ndarray:
    """Fixed interleaved sin/cos table; row p is [sin(p w0), cos(p w0), ...]."""
    positions = np.arange(max_len, dtype=np.float64)[:, None]
    freqs = np.exp(-np.log(10000.0) * np.arange(0, hidden, 2, dtype=np.float64) / hidden)
    table = np.zeros((max_len, hidden), dtype=np.float64)
    table[:, 0::2] = np.sin(positions * freqs)
    table[:, 1::2] = np.cos(positions * freqs)
    return table


@dataclass
class SpanModel:
    config: ModelConfig
    seed: int
    params: dict[str, np.ndarray]

    def __post_init__(self):
        self.pos_table = positional_table(self.config.max_len, self.config.hidden)

    def copy(self) -> "SpanModel":
        return SpanModel(self.config, self.seed, {k: v.copy() for k, v in self.params.items()})


def init_model(config: ModelConfig, seed: int) -> SpanModel:
    """All trainable weights drawn from N(0, 0.01^2) with a seeded generator."""
    config.validate()
    if seed < 0:
        raise InvalidConfig("seed must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D6F64]))
    params = {name: rng.standard_normal(shape) * 0.01 for name, shape in parameter_layout(config)}
    return SpanModel(config=config, seed=seed, params=params)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


class ForwardResult:
    """Forward outputs plus the graph needed for one backward pass."""

    def __init__(self, param_tensors, H, z_s, z_e, batch_size):
        self.param_tensors = param_tensors
        self.H_t = H
        self.z_s_t = z_s
        self.z_e_t = z_e
        self.batch_size = batch_size
        self._consumed = False

    @property
    def H(self) -> np.ndarray:
        return self.H_t.data

    @property
    def z_s(self) -> np.ndarray:
        return self.z_s_t.data

    @property
    def z_e(self) -> np.ndarray:
        return self.z_e_t.data


def _stack_batch(encoded):
    ids = np.stack([e.token_ids for e in encoded])
    attention = np.stack([e.attention_mask for e in encoded])
    passage = np.stack([e.passage_mask for e in encoded])
    return ids, attention, passage


def forward_batch(model: SpanModel, encoded) -> ForwardResult:
    """Run the encoder over a batch; per-sample outputs are independent."""
    cfg = model.config
    ids, attention, passage = _stack_batch(encoded)
    if ids.shape[1] != cfg.max_len:
        raise ShapeError(f"encoded length {ids.shape[1]} != model max_len {cfg.max_len}")
    if ids.max() >= cfg.vocab_size:
        raise ShapeError("token id outside the model vocabulary")

    p = {name: nm.Tensor(arr, requires_grad=True) for name, arr in model.params.items()}
    scale = 1.0 / np.sqrt(cfg.hidden)
    # keys at padded positions are unreachable for every query
    attn_bias = np.where(attention, 0.0, MASKED_LOGIT)[:, None, :]

    x = nm.add(nm.gather_rows(p["embed"], ids), model.pos_table)
    for i in range(cfg.layers):
        prefix = f"layer{i}."
        q = nm.matmul(x, p[prefix + "attn_wq"])
        k = nm.matmul(x, p[prefix + "attn_wk"])
        v = nm.matmul(x, p[prefix + "attn_wv"])
        scores = nm.add(nm.mul(nm.matmul(q, nm.swap_last_axes(k)), scale), attn_bias)
        attn = nm.softmax_last(scores)
        context = nm.matmul(nm.matmul(attn, v), p[prefix + "attn_wo"])
        x = nm.layer_norm(nm.add(x, context), p[prefix + "ln1_gain"], p[prefix + "ln1_offset"])
        hidden = nm.relu(nm.add(nm.matmul(x, p[prefix + "ffn_w1"]), p[prefix + "ffn_b1"]))
        ff = nm.add(nm.matmul(hidden, p[prefix + "ffn_w2"]), p[prefix + "ffn_b2"])
        x = nm.layer_norm(nm.add(x, ff), p[prefix + "ln2_gain"], p[prefix + "ln2_offset"])

    batch = ids.shape[0]
    h = cfg.hidden

    def head(vec_name, bias_name):
        projected = nm.reshape(nm.matmul(x, nm.reshape(p[vec_name], (h, 1))), (batch, cfg.max_len))
        return nm.masked_fill(nm.add(projected, p[bias_name]), passage, MASKED_LOGIT)

    z_s = head("start_vec", "start_bias")
    z_e = head("end_vec", "end_bias")
    return ForwardResult(p, x, z_s, z_e, batch)


def forward(model: SpanModel, encoded: EncodedInput):
    """Single-sample forward: returns (H, z_s, z_e) plus the backward cache."""
    result = forward_batch(model, [encoded])
    return result.H[0], result.z_s[0], result.z_e[0], result


def collect_gradients(result: ForwardResult) -> dict[str, np.ndarray]:
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in result.param_tensors.items()
    }


def backward(model: SpanModel, cache: ForwardResult, grad_z_s, grad_z_e) -> dict[str, np.ndarray]:
    """Gradients of sum(grad_z_s * z_s) + sum(grad_z_e * z_e) for every parameter."""
    if cache is None:
        raise StateError("backward requires the forward cache")
    if cache._consumed:
        raise StateError("forward cache was already consumed by a backward pass")
    grad_z_s = np.asarray(grad_z_s, dtype=np.float64).reshape(cache.z_s.shape)
    grad_z_e = np.asarray(grad_z_e, dtype=np.float64).reshape(cache.z_e.shape)
    objective = nm.add(
        nm.sum_all(nm.mul(cache.z_s_t, grad_z_s)),
        nm.sum_all(nm.mul(cache.z_e_t, grad_z_e)),
    )
    nm.backward(objective)
    cache._consumed = True
    return collect_gradients(cache)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_model(model: SpanModel, path) -> None:
    layout = parameter_layout(model.config)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "seed": model.seed,
        "params": [{"name": name, "shape": list(shape)} for name, shape in layout],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, shape in layout:
            arr = model.params[name]
            if arr.shape != shape:
                raise ShapeError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            fh.write(arr.astype("<f8").tobytes())


def load_model(path) -> SpanModel:
    with Path(path).open("rb") as fh:
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise InvalidConfig(f"unsupported checkpoint version in {path}")
        config = ModelConfig(**header["config"])
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            params[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    expected = [name for name, _ in parameter_layout(config)]
    if expected != [e["name"] for e in header["params"]]:
        raise InvalidConfig(f"checkpoint {path} does not match the declared layout")
    return SpanModel(config=config, seed=int(header["seed"]), params=params)
