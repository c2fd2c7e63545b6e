"""Shared test utilities: gradient checking and small input factories."""

from __future__ import annotations

import numpy as np

from recobert.encoder import Parameters
from recobert.objectives import total_loss_and_gradients
from recobert.tokenizer import MaskedSequence, Vocabulary, apply_masking, encode_pair

GRAD_REL_FLOOR = 1e-4


def random_masked_pair(vocab: Vocabulary, max_len: int, title_len: int, desc_len: int,
                       seed: int, mask_rate: float = 0.3) -> MaskedSequence:
    rng = np.random.default_rng(seed)
    n = vocab.num_content_tokens
    title = [vocab.token(5 + int(rng.integers(n))) for _ in range(title_len)]
    desc = [vocab.token(5 + int(rng.integers(n))) for _ in range(desc_len)]
    seq = encode_pair(title, desc, vocab, max_len)
    return apply_masking(seq, mask_rate, rng, vocab)


def numerical_gradient(loss_fn, arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences over every element of one tensor."""
    num = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + step
        lp = loss_fn()
        arr[idx] = orig - step
        lm = loss_fn()
        arr[idx] = orig
        num[idx] = (lp - lm) / (2.0 * step)
        it.iternext()
    return num


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = GRAD_REL_FLOOR) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / scale).max())


def check_all_gradients(params: Parameters, seqs, labels, include_tdm: bool = True,
                        step: float = 1e-5) -> dict[str, float]:
    """Max relative error per tensor between analytic and numeric gradients.

    Parameters must be float64; the analytic pass runs once, then every
    element of every tensor is perturbed for central differences.
    """
    assert params.dtype == np.float64, "gradient checking needs float64 parameters"
    _, grads = total_loss_and_gradients(params, seqs, labels, include_tdm=include_tdm)

    def loss():
        breakdown, _ = total_loss_and_gradients(params, seqs, labels, include_tdm=include_tdm)
        return breakdown.l_total

    errors = {}
    for name, arr in params.tensors.items():
        numeric = numerical_gradient(loss, arr, step=step)
        errors[name] = max_relative_error(grads[name], numeric)
    return errors
