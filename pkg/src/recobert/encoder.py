"""Transformer encoder backbone with hand-derived backpropagation.

The model maps an encoded title-description sequence to per-position hidden
vectors and pools the title and description spans into one feature vector
each. Everything is plain NumPy: parameters live in a flat name -> array
dict, the forward pass records a cache, and ``backward`` walks it in reverse
to produce exact analytic gradients for every tensor.

Layout is the post-layer-norm encoder: token + position (+ segment)
embeddings, embedding layer norm, then per layer multi-head self-attention
and a GELU feed-forward block, each followed by residual + layer norm.
PAD positions are excluded from attention keys, so padded and unpadded
encodings of the same text agree on the non-PAD rows.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import special, stats

from .tokenizer import InputSequence

CHECKPOINT_MAGIC = b"RCBT"
CHECKPOINT_VERSION = 1

DEFAULT_DTYPE = np.float32


class EncoderError(Exception):
    pass


class InvalidConfig(EncoderError):
    pass


class ShapeMismatch(EncoderError):
    pass


class EmptySpan(EncoderError):
    pass


class CheckpointError(EncoderError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionUnsupported(CheckpointError):
    pass


class VocabMismatch(CheckpointError):
    pass


class CorruptTensor(CheckpointError):
    def __init__(self, name: str, why: str = "truncated or malformed data"):
        super().__init__(f"tensor {name!r}: {why}")
        self.name = name


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters for the encoder backbone."""

    vocab_size: int
    max_len: int
    hidden: int
    layers: int
    heads: int
    ffn_dim: int
    dropout: float = 0.0
    layer_norm_eps: float = 1e-12
    use_segments: bool = True
    tdm_projection: bool = False

    def validate(self) -> None:
        if self.vocab_size < 6:
            raise InvalidConfig("vocab_size must cover the 5 specials plus content")
        if self.max_len < 4:
            raise InvalidConfig("max_len must be >= 4")
        if self.hidden < 1 or self.layers < 0 or self.heads < 1:
            raise InvalidConfig("hidden/layers/heads out of range")
        if self.hidden % self.heads != 0:
            raise InvalidConfig(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.ffn_dim < self.hidden:
            raise InvalidConfig("ffn_dim must be >= hidden")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must lie in [0, 1)")
        if self.layer_norm_eps <= 0.0:
            raise InvalidConfig("layer_norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


def tensor_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor name -> shape map; fixes parameter and file ordering."""
    h, f = config.hidden, config.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, h),
        "pos_emb": (config.max_len, h),
    }
    if config.use_segments:
        shapes["seg_emb"] = (2, h)
    shapes["emb_ln_g"] = (h,)
    shapes["emb_ln_b"] = (h,)
    for i in range(config.layers):
        p = f"layer{i}."
        shapes[p + "attn_wq"] = (h, h)
        shapes[p + "attn_bq"] = (h,)
        shapes[p + "attn_wk"] = (h, h)
        shapes[p + "attn_bk"] = (h,)
        shapes[p + "attn_wv"] = (h, h)
        shapes[p + "attn_bv"] = (h,)
        shapes[p + "attn_wo"] = (h, h)
        shapes[p + "attn_bo"] = (h,)
        shapes[p + "attn_ln_g"] = (h,)
        shapes[p + "attn_ln_b"] = (h,)
        shapes[p + "ffn_w1"] = (h, f)
        shapes[p + "ffn_b1"] = (f,)
        shapes[p + "ffn_w2"] = (f, h)
        shapes[p + "ffn_b2"] = (h,)
        shapes[p + "ffn_ln_g"] = (h,)
        shapes[p + "ffn_ln_b"] = (h,)
    shapes["mlm_bias"] = (config.vocab_size,)
    if config.tdm_projection:
        shapes["tdm_proj_t"] = (h, h)
        shapes["tdm_proj_d"] = (h, h)
    return shapes


_ONE_INIT = ("emb_ln_g", "attn_ln_g", "ffn_ln_g")
_ZERO_INIT = (
    "attn_bq", "attn_bk", "attn_bv", "attn_bo", "ffn_b1", "ffn_b2",
    "emb_ln_b", "attn_ln_b", "ffn_ln_b", "mlm_bias",
)


def _init_kind(name: str) -> str:
    leaf = name.rsplit(".", 1)[-1]
    if leaf in _ONE_INIT:
        return "one"
    if leaf in _ZERO_INIT:
        return "zero"
    return "normal"


@dataclass
class Parameters:
    """All model weights, keyed by canonical tensor name, plus their config."""

    config: EncoderConfig
    tensors: dict[str, np.ndarray]

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["tok_emb"].dtype

    def copy(self) -> "Parameters":
        return Parameters(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "Parameters":
        return Parameters(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def allclose(self, other: "Parameters", rtol: float = 0.0, atol: float = 0.0) -> bool:
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(
            np.allclose(self.tensors[k], other.tensors[k], rtol=rtol, atol=atol)
            for k in self.tensors
        )


@dataclass(frozen=True)
class ItemEmbedding:
    """Mean-pooled title and description feature vectors for one item."""

    f_t: np.ndarray
    f_d: np.ndarray


def init_model(config: EncoderConfig, seed: int, dtype=DEFAULT_DTYPE) -> Parameters:
    """Initialize all parameters deterministically from a seed.

    Weight matrices and embeddings draw from a normal(0, 0.02) truncated at
    two standard deviations; layer-norm gains start at 1 and all biases at 0.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(config).items():
        kind = _init_kind(name)
        if kind == "one":
            arr = np.ones(shape, dtype=np.float64)
        elif kind == "zero":
            arr = np.zeros(shape, dtype=np.float64)
        else:
            arr = stats.truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=0.02, size=shape, random_state=rng)
        tensors[name] = np.ascontiguousarray(arr, dtype=dtype)
    return Parameters(config=config, tensors=tensors)


def zero_grads(params: Parameters) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.tensors.items()}


# ---------------------------------------------------------------- batching


@dataclass(frozen=True)
class EncodedBatch:
    """Stacked input sequences: ids/segments (B, T) plus a non-PAD mask."""

    ids: np.ndarray
    segments: np.ndarray
    content: np.ndarray  # bool (B, T), False on PAD
    seqs: tuple[InputSequence, ...]


def stack_batch(seqs: Sequence[InputSequence], config: EncoderConfig) -> EncodedBatch:
    if not seqs:
        raise ValueError("empty batch")
    for seq in seqs:
        if len(seq) != config.max_len:
            raise ShapeMismatch(f"sequence length {len(seq)} != max_len {config.max_len}")
    ids = np.array([s.ids for s in seqs], dtype=np.int64)
    segments = np.array([s.segments for s in seqs], dtype=np.int64)
    content = ids != 0  # PAD id is 0
    return EncodedBatch(ids=ids, segments=segments, content=content, seqs=tuple(seqs))


# ---------------------------------------------------------------- primitives


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + special.erf(x / np.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + special.erf(x / np.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (x - mu) / sigma
    return xhat * g + b, (xhat, sigma)


def _layer_norm_backward(dy: np.ndarray, cache, g: np.ndarray):
    xhat, sigma = cache
    ghat = dy * g
    m1 = ghat.mean(axis=-1, keepdims=True)
    m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
    dx = (ghat - m1 - xhat * m2) / sigma
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, t, h = x.shape
    return x.reshape(b, t, heads, h // heads).transpose(0, 2, 1, 3)  # (B, A, T, d)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, a, t, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, a * d)


def _softmax_last(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _dropout_scale(shape, rate: float, rng: np.random.Generator, dtype) -> np.ndarray:
    # Inverted dropout: multiply by 0 or 1/(1-rate).
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype.type(1.0 - rate)


# ---------------------------------------------------------------- forward


def forward(
    params: Parameters,
    batch: EncodedBatch | Sequence[InputSequence],
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    want_cache: bool = False,
):
    """Run the encoder over a batch. Returns hidden states (B, T, h).

    With ``want_cache`` the full activation cache needed by :func:`backward`
    is returned as a second value. Dropout fires only when ``train_mode`` is
    set and the config rate is positive, in which case ``rng`` is required.
    """
    config = params.config
    if not isinstance(batch, EncodedBatch):
        batch = stack_batch(batch, config)
    t = params.tensors
    dtype = params.dtype
    eps = config.layer_norm_eps
    drop = config.dropout if train_mode else 0.0
    if drop > 0.0 and rng is None:
        raise ValueError("train_mode dropout needs an rng")

    n, length = batch.ids.shape
    emb = t["tok_emb"][batch.ids] + t["pos_emb"][None, :length, :]
    if config.use_segments:
        emb = emb + t["seg_emb"][batch.segments]
    x, emb_ln_cache = _layer_norm(emb, t["emb_ln_g"], t["emb_ln_b"], eps)
    emb_drop = None
    if drop > 0.0:
        emb_drop = _dropout_scale(x.shape, drop, rng, np.dtype(dtype))
        x = x * emb_drop

    # Additive attention mask: 0 on content keys, -inf on PAD keys.
    key_mask = np.where(batch.content, 0.0, -np.inf).astype(dtype)[:, None, None, :]

    scale = 1.0 / np.sqrt(config.head_dim)
    layer_caches = []
    for i in range(config.layers):
        p = f"layer{i}."
        x_in = x
        q = _split_heads(x_in @ t[p + "attn_wq"] + t[p + "attn_bq"], config.heads)
        k = _split_heads(x_in @ t[p + "attn_wk"] + t[p + "attn_bk"], config.heads)
        v = _split_heads(x_in @ t[p + "attn_wv"] + t[p + "attn_bv"], config.heads)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale + key_mask  # (B, A, T, T)
        probs = _softmax_last(scores)
        probs_used, attn_drop = probs, None
        if drop > 0.0:
            attn_drop = _dropout_scale(probs.shape, drop, rng, np.dtype(dtype))
            probs_used = probs * attn_drop
        heads_out = _merge_heads(probs_used @ v)  # (B, T, h)
        attn = heads_out @ t[p + "attn_wo"] + t[p + "attn_bo"]
        out_drop = None
        if drop > 0.0:
            out_drop = _dropout_scale(attn.shape, drop, rng, np.dtype(dtype))
            attn = attn * out_drop
        x_mid, ln1_cache = _layer_norm(x_in + attn, t[p + "attn_ln_g"], t[p + "attn_ln_b"], eps)

        pre = x_mid @ t[p + "ffn_w1"] + t[p + "ffn_b1"]
        act = gelu(pre)
        ffn = act @ t[p + "ffn_w2"] + t[p + "ffn_b2"]
        ffn_drop = None
        if drop > 0.0:
            ffn_drop = _dropout_scale(ffn.shape, drop, rng, np.dtype(dtype))
            ffn = ffn * ffn_drop
        x, ln2_cache = _layer_norm(x_mid + ffn, t[p + "ffn_ln_g"], t[p + "ffn_ln_b"], eps)

        if want_cache:
            layer_caches.append({
                "x_in": x_in, "q": q, "k": k, "v": v, "probs": probs,
                "probs_used": probs_used, "attn_drop": attn_drop,
                "heads_out": heads_out, "out_drop": out_drop,
                "ln1": ln1_cache, "x_mid": x_mid, "pre": pre, "act": act,
                "ffn_drop": ffn_drop, "ln2": ln2_cache,
            })

    if not want_cache:
        return x
    cache = {
        "batch": batch, "emb_ln": emb_ln_cache, "emb_drop": emb_drop,
        "layers": layer_caches, "scale": scale,
    }
    return x, cache


def backward(d_hidden: np.ndarray, cache: dict, params: Parameters,
             grads: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Backpropagate d(loss)/d(hidden states) through the encoder.

    Accumulates into ``grads`` (created when omitted) and returns it. The
    caller may have pre-filled gradient contributions for tied tensors, e.g.
    the token embedding's share from the vocabulary projection.
    """
    config = params.config
    t = params.tensors
    if grads is None:
        grads = zero_grads(params)
    batch: EncodedBatch = cache["batch"]
    scale = cache["scale"]
    dx = d_hidden

    for i in reversed(range(config.layers)):
        p = f"layer{i}."
        lc = cache["layers"][i]

        # FFN sublayer: x = LN(x_mid + ffn)
        dres, dg, db = _layer_norm_backward(dx, lc["ln2"], t[p + "ffn_ln_g"])
        grads[p + "ffn_ln_g"] += dg
        grads[p + "ffn_ln_b"] += db
        dffn = dres
        if lc["ffn_drop"] is not None:
            dffn = dffn * lc["ffn_drop"]
        b, length, h = dffn.shape
        dffn2 = dffn.reshape(b * length, h)
        act2 = lc["act"].reshape(b * length, -1)
        grads[p + "ffn_w2"] += act2.T @ dffn2
        grads[p + "ffn_b2"] += dffn2.sum(axis=0)
        dact = dffn @ t[p + "ffn_w2"].T
        dpre = dact * gelu_grad(lc["pre"])
        dpre2 = dpre.reshape(b * length, -1)
        xmid2 = lc["x_mid"].reshape(b * length, h)
        grads[p + "ffn_w1"] += xmid2.T @ dpre2
        grads[p + "ffn_b1"] += dpre2.sum(axis=0)
        dx_mid = dres + dpre @ t[p + "ffn_w1"].T

        # Attention sublayer: x_mid = LN(x_in + attn)
        dres, dg, db = _layer_norm_backward(dx_mid, lc["ln1"], t[p + "attn_ln_g"])
        grads[p + "attn_ln_g"] += dg
        grads[p + "attn_ln_b"] += db
        dattn = dres
        if lc["out_drop"] is not None:
            dattn = dattn * lc["out_drop"]
        dattn2 = dattn.reshape(b * length, h)
        ho2 = lc["heads_out"].reshape(b * length, h)
        grads[p + "attn_wo"] += ho2.T @ dattn2
        grads[p + "attn_bo"] += dattn2.sum(axis=0)
        dheads = _split_heads(dattn @ t[p + "attn_wo"].T, config.heads)  # (B, A, T, d)

        dprobs_used = dheads @ lc["v"].transpose(0, 1, 3, 2)
        dv = lc["probs_used"].transpose(0, 1, 3, 2) @ dheads
        dprobs = dprobs_used
        if lc["attn_drop"] is not None:
            dprobs = dprobs * lc["attn_drop"]
        probs = lc["probs"]
        dscores = (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * probs
        dq = (dscores @ lc["k"]) * scale
        dk = (dscores.transpose(0, 1, 3, 2) @ lc["q"]) * scale

        dx_in = dres
        xin2 = lc["x_in"].reshape(b * length, h)
        for dmat, wname, bname in (
            (dq, "attn_wq", "attn_bq"),
            (dk, "attn_wk", "attn_bk"),
            (dv, "attn_wv", "attn_bv"),
        ):
            dlin = _merge_heads(dmat)
            dlin2 = dlin.reshape(b * length, h)
            grads[p + wname] += xin2.T @ dlin2
            grads[p + bname] += dlin2.sum(axis=0)
            dx_in = dx_in + dlin @ t[p + wname].T
        dx = dx_in

    if cache["emb_drop"] is not None:
        dx = dx * cache["emb_drop"]
    demb, dg, db = _layer_norm_backward(dx, cache["emb_ln"], t["emb_ln_g"])
    grads["emb_ln_g"] += dg
    grads["emb_ln_b"] += db

    flat_ids = batch.ids.reshape(-1)
    flat_demb = demb.reshape(-1, demb.shape[-1])
    np.add.at(grads["tok_emb"], flat_ids, flat_demb)
    grads["pos_emb"][: demb.shape[1]] += demb.sum(axis=0)
    if config.use_segments:
        np.add.at(grads["seg_emb"], batch.segments.reshape(-1), flat_demb)
    return grads


# ---------------------------------------------------------------- pooling


def pool_features(states: np.ndarray, seq: InputSequence) -> ItemEmbedding:
    """Mean-pool the title and description spans of one sequence's states (T, h)."""
    t0, t1 = seq.title_span
    d0, d1 = seq.desc_span
    if t1 <= t0 or d1 <= d0:
        raise EmptySpan("title or description span is empty")
    return ItemEmbedding(f_t=states[t0:t1].mean(axis=0), f_d=states[d0:d1].mean(axis=0))


def pool_batch(hidden: np.ndarray, seqs: Sequence[InputSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Pool every sequence of a batch; returns (F_t, F_d) arrays of shape (B, h)."""
    f_t = np.empty((hidden.shape[0], hidden.shape[2]), dtype=hidden.dtype)
    f_d = np.empty_like(f_t)
    for i, seq in enumerate(seqs):
        emb = pool_features(hidden[i], seq)
        f_t[i] = emb.f_t
        f_d[i] = emb.f_d
    return f_t, f_d


# ---------------------------------------------------------------- checkpoints


def checkpoint_save(params: Parameters, vocab_hash: int, path: str | Path) -> None:
    """Write parameters to a self-describing binary checkpoint.

    Layout: magic ``RCBT``, u32 format version, length-prefixed JSON header
    (config + vocabulary hash), then each tensor as length-prefixed name,
    u32 rank, u32 dims, and little-endian float32 data. Tensors are stored
    in canonical order, so identical parameters give identical files.
    """
    header = {
        "config": asdict(params.config),
        "vocab_hash": f"{vocab_hash:016x}",
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(params.tensors)))
        for name, arr in params.tensors.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def checkpoint_load(path: str | Path, expected_vocab_hash: int | None = None,
                    ) -> tuple[Parameters, EncoderConfig, int]:
    """Load a checkpoint; returns (parameters, config, vocab_hash).

    When ``expected_vocab_hash`` is given (from the vocabulary the caller
    intends to use), a mismatch raises :class:`VocabMismatch`.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path} is not a checkpoint file")
    version = struct.unpack_from("<I", data, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise VersionUnsupported(f"checkpoint version {version} unsupported")
    header_len = struct.unpack_from("<I", data, 8)[0]
    off = 12
    if off + header_len > len(data):
        raise BadMagic("checkpoint header truncated")
    try:
        header = json.loads(data[off:off + header_len].decode("utf-8"))
        config = EncoderConfig(**header["config"])
        vocab_hash = int(header["vocab_hash"], 16)
    except (ValueError, KeyError, TypeError) as exc:
        raise BadMagic(f"malformed checkpoint header: {exc}") from exc
    config.validate()
    if expected_vocab_hash is not None and expected_vocab_hash != vocab_hash:
        raise VocabMismatch(
            f"checkpoint was trained against vocabulary {vocab_hash:016x}, "
            f"got {expected_vocab_hash:016x}")
    off += header_len

    if off + 4 > len(data):
        raise CorruptTensor("<count>", "tensor count missing")
    count = struct.unpack_from("<I", data, off)[0]
    off += 4
    expected = tensor_shapes(config)
    if count != len(expected):
        raise CorruptTensor("<count>", f"expected {len(expected)} tensors, file has {count}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if off + 4 > len(data):
            raise CorruptTensor("<name>", "name length missing")
        name_len = struct.unpack_from("<I", data, off)[0]
        off += 4
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        if name not in expected:
            raise CorruptTensor(name, "not a tensor of this config")
        if off + 4 > len(data):
            raise CorruptTensor(name, "rank missing")
        rank = struct.unpack_from("<I", data, off)[0]
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off) if rank else ()
        off += 4 * rank
        if tuple(dims) != expected[name]:
            raise CorruptTensor(name, f"shape {tuple(dims)} != expected {expected[name]}")
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        end = off + 4 * size
        if end > len(data):
            raise CorruptTensor(name)
        arr = np.frombuffer(data[off:end], dtype="<f4").reshape(dims).astype(np.float32)
        tensors[name] = arr
        off = end
    if off != len(data):
        raise CorruptTensor("<trailer>", "trailing bytes after final tensor")
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise CorruptTensor(missing[0], "missing from file")
    ordered = {name: tensors[name] for name in expected}
    return Parameters(config=config, tensors=ordered), config, vocab_hash
