"""Training loop: pair generation, masking, Adam updates, early stopping.

Each step samples a batch of items with replacement from the train split,
pairs every title with its own description or (with probability ``p_s``) a
different item's description, masks tokens, and applies one Adam update on
the combined objective. Validation pairs are generated once from a frozen
seed, masks included, so the loss curve is comparable across evaluations;
the parameters from the best validation loss are returned.

The ``mlm_only`` objective trains the domain-adapted baseline: pairs are
always positive and only the masked-token loss is paid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .catalog import Catalog, CatalogItem
from .encoder import Parameters
from .objectives import LossBreakdown, compute_losses, total_loss_and_gradients
from .tokenizer import MaskedSequence, Vocabulary, apply_masking, encode_pair, tokenize

OBJECTIVES = ("recobert", "mlm_only")

# Tag folded into the trainer seed so validation pairs never share a stream
# with training batches.
_VAL_SEED_TAG = 0x56414C5041495253

_EMA_DECAY = 0.99


class TrainerError(Exception):
    pass


class CatalogTooSmall(TrainerError):
    pass


class NonFiniteLoss(TrainerError):
    def __init__(self, step: int, losses: LossBreakdown):
        super().__init__(
            f"non-finite loss at step {step}: "
            f"l_tdm={losses.l_tdm!r} l_mlm={losses.l_mlm!r} l_total={losses.l_total!r}")
        self.step = step
        self.losses = losses


@dataclass(frozen=True)
class TrainerConfig:
    """Hyperparameters of one training run."""

    max_steps: int
    batch_size: int = 16
    p_s: float = 0.5
    mask_rate: float = 0.15
    learning_rate: float = 3e-4
    warmup_steps: int | None = None  # None: 1% of max_steps
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 200
    patience: int = 10
    seed: int = 0
    objective: str = "recobert"
    clip_norm: float | None = None

    def validate(self) -> None:
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.p_s <= 1.0:
            raise ValueError("p_s must lie in [0, 1]")
        if not 0.0 < self.mask_rate <= 1.0:
            raise ValueError("mask_rate must lie in (0, 1]")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.clip_norm is not None and self.clip_norm <= 0.0:
            raise ValueError("clip_norm must be positive when set")

    @property
    def resolved_warmup(self) -> int:
        if self.warmup_steps is not None:
            return max(1, self.warmup_steps)
        return max(1, round(0.01 * self.max_steps))


@dataclass(frozen=True)
class TrainingPair:
    """A title paired with its own or a switched description, plus the label."""

    title_id: str
    desc_id: str
    title_tokens: tuple[str, ...]
    desc_tokens: tuple[str, ...]
    label: int  # 1 iff the description belongs to the titled item


@dataclass(frozen=True)
class EvalRecord:
    step: int
    train_loss: float | None  # EMA of batch losses; None before the first step
    val: LossBreakdown
    is_best: bool


@dataclass(frozen=True)
class TrainingHistory:
    records: tuple[EvalRecord, ...]
    best_step: int
    stop_reason: str  # "max_steps" or "early_stopping"


@dataclass
class TrainResult:
    best_params: Parameters
    final_params: Parameters
    history: TrainingHistory


def make_training_pair(
    item: CatalogItem,
    train_catalog: Catalog,
    p_s: float,
    rng: np.random.Generator,
    token_cache: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] | None = None,
) -> TrainingPair:
    """Pair an item's title with its own description, or with probability
    ``p_s`` the description of a uniformly drawn different item (label 0)."""
    n = len(train_catalog)
    if n < 2 and p_s > 0.0:
        raise CatalogTooSmall("switching needs at least 2 items")

    def tokens_of(it: CatalogItem) -> tuple[tuple[str, ...], tuple[str, ...]]:
        if token_cache is not None:
            cached = token_cache.get(it.id)
            if cached is not None:
                return cached
        toks = (tuple(tokenize(it.title)), tuple(tokenize(it.description)))
        if token_cache is not None:
            token_cache[it.id] = toks
        return toks

    title_toks, own_desc = tokens_of(item)
    if p_s > 0.0 and rng.random() < p_s:
        # Uniform over the other items: draw from n-1 slots, skip self.
        own_pos = train_catalog.index[item.id]
        j = int(rng.integers(0, n - 1))
        if j >= own_pos:
            j += 1
        other = train_catalog.items[j]
        return TrainingPair(item.id, other.id, title_toks, tokens_of(other)[1], label=0)
    return TrainingPair(item.id, item.id, title_toks, own_desc, label=1)


class Adam:
    """Adam with bias correction; the caller scales lr for warmup."""

    def __init__(self, params: Parameters, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    def step(self, params: Parameters, grads: dict[str, np.ndarray], lr_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        rate = self.lr * lr_scale
        for name, p in params.tensors.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= (rate / corr1) * m / (np.sqrt(v / corr2) + self.eps)


def _clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> None:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > clip_norm:
        scale = clip_norm / total
        for g in grads.values():
            g *= scale


def _encode_and_mask(pair: TrainingPair, vocab: Vocabulary, max_len: int,
                     mask_rate: float, rng: np.random.Generator) -> MaskedSequence:
    seq = encode_pair(pair.title_tokens, pair.desc_tokens, vocab, max_len)
    return apply_masking(seq, mask_rate, rng, vocab)


def build_validation_pairs(
    val_catalog: Catalog,
    vocab: Vocabulary,
    max_len: int,
    cfg: TrainerConfig,
) -> tuple[list[MaskedSequence], list[int]]:
    """One frozen masked pair per validation item, switched within the split.

    Generated from a seed derived from the trainer seed, so every evaluation
    of a run sees the same pairs and the same masks.
    """
    rng = np.random.default_rng(cfg.seed ^ _VAL_SEED_TAG)
    cache: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {}
    # A single-item split cannot switch; a pure-MLM objective never does.
    p_s = cfg.p_s if (cfg.objective == "recobert" and len(val_catalog) >= 2) else 0.0
    seqs: list[MaskedSequence] = []
    labels: list[int] = []
    for item in val_catalog:
        pair = make_training_pair(item, val_catalog, p_s, rng, cache)
        seqs.append(_encode_and_mask(pair, vocab, max_len, cfg.mask_rate, rng))
        labels.append(pair.label)
    return seqs, labels


def _validation_loss(params: Parameters, seqs: Sequence[MaskedSequence],
                     labels: Sequence[int], include_tdm: bool, batch_size: int) -> LossBreakdown:
    tdm_sum = 0.0
    mlm_sum = 0.0
    n_pairs = 0
    n_targets = 0
    for lo in range(0, len(seqs), batch_size):
        chunk = seqs[lo:lo + batch_size]
        chunk_labels = labels[lo:lo + batch_size]
        part = compute_losses(params, chunk, chunk_labels, include_tdm=include_tdm)
        tdm_sum += part.l_tdm * part.num_pairs
        mlm_sum += part.l_mlm * part.num_targets
        n_pairs += part.num_pairs
        n_targets += part.num_targets
    l_tdm = tdm_sum / n_pairs if include_tdm else 0.0
    l_mlm = mlm_sum / n_targets
    return LossBreakdown(l_tdm=l_tdm, l_mlm=l_mlm, l_total=l_tdm + l_mlm,
                         num_pairs=n_pairs, num_targets=n_targets)


def train(
    model: Parameters,
    train_catalog: Catalog,
    val_catalog: Catalog,
    vocab: Vocabulary,
    cfg: TrainerConfig,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train from the given initial parameters; returns best and final weights.

    The best parameters are the snapshot at the evaluation with minimal
    validation total loss. Training stops early once ``patience`` consecutive
    evaluations fail to improve that minimum. An optional JSONL log receives
    one record per evaluation.
    """
    cfg.validate()
    if len(train_catalog) == 0 or len(val_catalog) == 0:
        raise TrainerError("train and validation catalogs must be nonempty")
    if len(train_catalog) < 2 and cfg.objective == "recobert" and cfg.p_s > 0.0:
        raise CatalogTooSmall("switching needs at least 2 training items")

    config = model.config
    include_tdm = cfg.objective == "recobert"
    p_s = cfg.p_s if include_tdm else 0.0
    params = model.copy()
    optimizer = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    warmup = cfg.resolved_warmup

    val_seqs, val_labels = build_validation_pairs(val_catalog, vocab, config.max_len, cfg)
    rng = np.random.default_rng(cfg.seed)
    cache: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {}

    records: list[EvalRecord] = []
    best_total = math.inf
    best_step = 0
    best_params = params.copy()
    evals_since_best = 0
    ema: float | None = None
    stop_reason = "max_steps"

    log_file = Path(log_path).open("w", encoding="utf-8") if log_path is not None else None
    try:
        def run_eval(step: int) -> bool:
            nonlocal best_total, best_step, best_params, evals_since_best
            val = _validation_loss(params, val_seqs, val_labels, include_tdm, cfg.batch_size)
            improved = val.l_total < best_total
            if improved:
                best_total = val.l_total
                best_step = step
                best_params = params.copy()
                evals_since_best = 0
            else:
                evals_since_best += 1
            records.append(EvalRecord(step=step, train_loss=ema, val=val, is_best=improved))
            if log_file is not None:
                log_file.write(json.dumps({
                    "step": step, "train_loss": ema, "val_tdm": val.l_tdm,
                    "val_mlm": val.l_mlm, "val_total": val.l_total, "best": improved,
                }) + "\n")
                log_file.flush()
            return improved

        run_eval(0)
        train_mode = config.dropout > 0.0
        for step in range(1, cfg.max_steps + 1):
            idx = rng.integers(0, len(train_catalog), size=cfg.batch_size)
            seqs: list[MaskedSequence] = []
            labels: list[int] = []
            for i in idx:
                pair = make_training_pair(train_catalog.items[int(i)], train_catalog, p_s, rng, cache)
                seqs.append(_encode_and_mask(pair, vocab, config.max_len, cfg.mask_rate, rng))
                labels.append(pair.label)
            losses, grads = total_loss_and_gradients(
                params, seqs, labels, include_tdm=include_tdm,
                train_mode=train_mode, rng=rng if train_mode else None)
            if not math.isfinite(losses.l_total):
                raise NonFiniteLoss(step, losses)
            if cfg.clip_norm is not None:
                _clip_gradients(grads, cfg.clip_norm)
            optimizer.step(params, grads, lr_scale=min(1.0, step / warmup))
            ema = losses.l_total if ema is None else _EMA_DECAY * ema + (1.0 - _EMA_DECAY) * losses.l_total

            if step % cfg.eval_every == 0 or step == cfg.max_steps:
                run_eval(step)
                if evals_since_best >= cfg.patience:
                    stop_reason = "early_stopping"
                    break
    finally:
        if log_file is not None:
            log_file.close()

    history = TrainingHistory(records=tuple(records), best_step=best_step, stop_reason=stop_reason)
    return TrainResult(best_params=best_params, final_params=params, history=history)
