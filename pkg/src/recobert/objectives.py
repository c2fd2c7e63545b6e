"""Training objectives: title-description matching and masked-token recovery.

The matching head scores a (title, description) pair by the cosine between
the pooled title and description features, rescaled to [0, 1], and is
trained with binary cross-entropy against same-item / switched-description
labels. The masked-token head projects hidden states back onto the
vocabulary through the transposed token embedding (tied weights) and pays
mean negative log-likelihood over every masked position in the batch. The
combined objective is their sum.

:func:`total_loss_and_gradients` runs one forward pass, evaluates both
losses, and backpropagates them by hand into a flat gradient dict aligned
with ``Parameters.tensors``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoder import Parameters, backward, forward, pool_batch, stack_batch, zero_grads
from .tokenizer import MaskedSequence

CLAMP_EPS = 1e-7
NORM_EPS = 1e-12


class ObjectiveError(Exception):
    pass


class ZeroVector(ObjectiveError):
    pass


class LengthMismatch(ObjectiveError):
    pass


class PositionOutOfRange(ObjectiveError):
    pass


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar losses for one batch plus the counts they were averaged over."""

    l_tdm: float
    l_mlm: float
    l_total: float
    num_pairs: int
    num_targets: int


def c_tdm(f_t: np.ndarray, f_d: np.ndarray, params: Parameters | None = None) -> np.ndarray:
    """Matching score (1 + cos(f_t, f_d)) / 2 in [0, 1]; broadcasts over rows.

    With a parameter set whose config enables the matching projection, both
    features pass through their linear projection before the cosine.
    """
    if params is not None and params.config.tdm_projection:
        f_t = f_t @ params.tensors["tdm_proj_t"]
        f_d = f_d @ params.tensors["tdm_proj_d"]
    nt = np.linalg.norm(f_t, axis=-1)
    nd = np.linalg.norm(f_d, axis=-1)
    if np.any(nt < NORM_EPS) or np.any(nd < NORM_EPS):
        raise ZeroVector("cannot take cosine of a zero-norm feature vector")
    cos = (f_t * f_d).sum(axis=-1) / (nt * nd)
    return (1.0 + cos) / 2.0


def loss_tdm(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy of matching scores against 0/1 labels.

    Scores are clamped away from 0 and 1 before the logs, so a saturated
    score yields a large finite penalty rather than an infinity.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise LengthMismatch(f"scores shape {scores.shape} != labels shape {labels.shape}")
    if scores.size == 0:
        raise LengthMismatch("need at least one pair")
    c = np.clip(scores, CLAMP_EPS, 1.0 - CLAMP_EPS)
    return float(-np.mean(labels * np.log(c) + (1.0 - labels) * np.log(1.0 - c)))


def mlm_logits(hidden: np.ndarray, positions: Sequence[int], params: Parameters) -> np.ndarray:
    """Vocabulary logits at the given positions of one sequence's states (T, h).

    Uses the tied projection: states @ token-embedding^T plus the output bias.
    """
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size and (positions.min() < 0 or positions.max() >= hidden.shape[0]):
        raise PositionOutOfRange(f"positions must lie in [0, {hidden.shape[0]})")
    return hidden[positions] @ params.tensors["tok_emb"].T + params.tensors["mlm_bias"]


def loss_mlm(logits: np.ndarray, targets: Sequence[int]) -> float:
    """Mean negative log-softmax of the target token at each masked position."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise LengthMismatch(f"logits {logits.shape} do not match {targets.shape[0]} targets")
    if targets.size == 0:
        raise LengthMismatch("need at least one masked target")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise PositionOutOfRange("target id outside vocabulary")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(targets.size), targets]
    return float(np.mean(log_z - picked))


def _gather_targets(seqs: Sequence[MaskedSequence]):
    rows, cols, tgts = [], [], []
    for b, ms in enumerate(seqs):
        for pos, original in ms.targets:
            rows.append(b)
            cols.append(pos)
            tgts.append(original)
    return (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64),
            np.asarray(tgts, dtype=np.int64))


def total_loss_and_gradients(
    params: Parameters,
    seqs: Sequence[MaskedSequence],
    labels: Sequence[int],
    include_tdm: bool = True,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """One training step's losses and exact gradients for a batch of pairs.

    ``labels`` holds 1 for a same-item pair and 0 for a switched description.
    With ``include_tdm`` off only the masked-token loss is paid, which is the
    objective of the language-model-only baseline. Gradients cover every
    parameter tensor; the token embedding accumulates contributions from both
    its lookup and the tied vocabulary projection.
    """
    labels_arr = np.asarray(labels, dtype=np.float64)
    if labels_arr.shape != (len(seqs),):
        raise LengthMismatch(f"{len(seqs)} sequences but labels shape {labels_arr.shape}")
    config = params.config
    batch = stack_batch([ms.base for ms in seqs], config)
    hidden, cache = forward(params, batch, train_mode=train_mode, rng=rng, want_cache=True)
    dtype = hidden.dtype
    grads = zero_grads(params)
    d_hidden = np.zeros_like(hidden)

    # Masked-token loss over all targets in the batch.
    rows, cols, tgts = _gather_targets(seqs)
    n_targets = tgts.size
    if n_targets == 0:
        raise LengthMismatch("batch contains no masked targets")
    states = hidden[rows, cols]  # (N, h)
    logits = states @ params.tensors["tok_emb"].T + params.tensors["mlm_bias"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    picked = shifted[np.arange(n_targets), tgts].astype(np.float64)
    log_z = np.log(np.exp(shifted.astype(np.float64)).sum(axis=1))
    l_mlm = float(np.mean(log_z - picked))

    dlogits = probs.copy()
    dlogits[np.arange(n_targets), tgts] -= 1.0
    dlogits /= n_targets
    grads["tok_emb"] += dlogits.T @ states
    grads["mlm_bias"] += dlogits.sum(axis=0)
    np.add.at(d_hidden, (rows, cols), dlogits @ params.tensors["tok_emb"])

    # Matching loss over the pooled pair features.
    l_tdm = 0.0
    if include_tdm:
        f_t, f_d = pool_batch(hidden, batch.seqs)
        p_t, p_d = f_t, f_d
        if config.tdm_projection:
            p_t = f_t @ params.tensors["tdm_proj_t"]
            p_d = f_d @ params.tensors["tdm_proj_d"]
        nt = np.linalg.norm(p_t, axis=1)
        nd = np.linalg.norm(p_d, axis=1)
        if np.any(nt < NORM_EPS) or np.any(nd < NORM_EPS):
            raise ZeroVector("pooled feature collapsed to zero norm")
        cos = (p_t * p_d).sum(axis=1) / (nt * nd)
        score = (1.0 + cos) / 2.0
        c = np.clip(score.astype(np.float64), CLAMP_EPS, 1.0 - CLAMP_EPS)
        l_tdm = float(-np.mean(labels_arr * np.log(c) + (1.0 - labels_arr) * np.log(1.0 - c)))

        # d loss / d score; zero where the clamp saturated.
        inside = (score >= CLAMP_EPS) & (score <= 1.0 - CLAMP_EPS)
        dscore = np.where(inside, (c - labels_arr) / (c * (1.0 - c)), 0.0) / score.size
        dcos = (dscore / 2.0).astype(dtype)
        # d cos / d a = (b_unit - cos * a_unit) / |a|, same with roles swapped.
        ut = p_t / nt[:, None]
        ud = p_d / nd[:, None]
        dp_t = dcos[:, None] * (ud - cos[:, None] * ut) / nt[:, None]
        dp_d = dcos[:, None] * (ut - cos[:, None] * ud) / nd[:, None]
        if config.tdm_projection:
            grads["tdm_proj_t"] += f_t.T @ dp_t
            grads["tdm_proj_d"] += f_d.T @ dp_d
            df_t = dp_t @ params.tensors["tdm_proj_t"].T
            df_d = dp_d @ params.tensors["tdm_proj_d"].T
        else:
            df_t, df_d = dp_t, dp_d
        # Pooling backward: spread each feature gradient evenly over its span.
        for i, seq in enumerate(batch.seqs):
            t0, t1 = seq.title_span
            d0, d1 = seq.desc_span
            d_hidden[i, t0:t1] += df_t[i] / (t1 - t0)
            d_hidden[i, d0:d1] += df_d[i] / (d1 - d0)

    grads = backward(d_hidden, cache, params, grads)
    l_total = l_mlm + l_tdm
    return (
        LossBreakdown(l_tdm=l_tdm, l_mlm=l_mlm, l_total=l_total,
                      num_pairs=len(seqs), num_targets=int(n_targets)),
        grads,
    )


def compute_losses(
    params: Parameters,
    seqs: Sequence[MaskedSequence],
    labels: Sequence[int],
    include_tdm: bool = True,
) -> LossBreakdown:
    """Losses only, no gradients; used for validation passes."""
    labels_arr = np.asarray(labels, dtype=np.float64)
    if labels_arr.shape != (len(seqs),):
        raise LengthMismatch(f"{len(seqs)} sequences but labels shape {labels_arr.shape}")
    batch = stack_batch([ms.base for ms in seqs], params.config)
    hidden = forward(params, batch)
    rows, cols, tgts = _gather_targets(seqs)
    if tgts.size == 0:
        raise LengthMismatch("batch contains no masked targets")
    logits = hidden[rows, cols] @ params.tensors["tok_emb"].T + params.tensors["mlm_bias"]
    l_mlm = loss_mlm(logits, tgts)
    l_tdm = 0.0
    if include_tdm:
        f_t, f_d = pool_batch(hidden, batch.seqs)
        l_tdm = loss_tdm(c_tdm(f_t, f_d, params), labels_arr)
    return LossBreakdown(l_tdm=l_tdm, l_mlm=l_mlm, l_total=l_mlm + l_tdm,
                         num_pairs=len(seqs), num_targets=int(tgts.size))
