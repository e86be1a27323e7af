"""Prediction-matching losses and the calibration-set fitness.

Fitness is the *negated* mean batch loss, so larger is better.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

LOSS_TAGS = ("contrastive", "mse", "cosine", "kl")


def _pair(p, o) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    if p.shape != o.shape or p.ndim != 2:
        raise ValueError(f"expected matching (B, D) predictions, got {p.shape} and {o.shape}")
    if p.shape[0] < 1:
        raise ValueError("empty batch")
    return p, o


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norm > 0, norm, 1.0)


def similarity_logits(p, o, tau: float, normalize: bool = True) -> np.ndarray:
    """(B, B) matrix ``p_i . o_j / tau``."""
    p, o = _pair(p, o)
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if normalize:
        p, o = _unit_rows(p), _unit_rows(o)
    return (p @ o.T) / tau


def info_nce_from_logits(sim: np.ndarray) -> float:
    """Mean of ``logsumexp(sim_i) - sim_ii``; row i's positive is column i."""
    return float(np.mean(logsumexp(sim, axis=1) - np.diag(sim)))


def info_nce(p, o, tau: float = 0.1, normalize: bool = True) -> float:
    """infoNCE of quantized predictions ``p`` against full-precision ``o``.

    Each row ``p_i`` is contrasted with its own ``o_i`` (positive) and every
    other ``o_j`` of the batch (negatives). A batch of one gives 0.
    """
    return info_nce_from_logits(similarity_logits(p, o, tau, normalize))


def mse_loss(p, o) -> float:
    p, o = _pair(p, o)
    return float(np.mean((p - o) ** 2))


def cosine_loss(p, o) -> float:
    p, o = _pair(p, o)
    return float(np.mean(1.0 - np.sum(_unit_rows(p) * _unit_rows(o), axis=1)))


def _log_softmax(x: np.ndarray) -> np.ndarray:
    return x - logsumexp(x, axis=1, keepdims=True)


def kl_loss(p, o) -> float:
    """Mean over rows of KL(softmax(o_i) || softmax(p_i))."""
    p, o = _pair(p, o)
    log_o, log_p = _log_softmax(o), _log_softmax(p)
    return float(np.mean(np.sum(np.exp(log_o) * (log_o - log_p), axis=1)))


@dataclass(frozen=True)
class LossKind:
    tag: str = "contrastive"
    tau: float = 0.1
    normalize: bool = True

    def __post_init__(self):
        if self.tag not in LOSS_TAGS:
            raise ValueError(f"unknown loss {self.tag!r}; choose from {LOSS_TAGS}")
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")

    def __call__(self, p, o) -> float:
        if self.tag == "contrastive":
            return info_nce(p, o, self.tau, self.normalize)
        if self.tag == "mse":
            return mse_loss(p, o)
        if self.tag == "cosine":
            return cosine_loss(p, o)
        return kl_loss(p, o)


def default_threads() -> int:
    return max(1, int(os.environ.get("QSEARCH_THREADS", "1")))


class Fitness:
    """Global fitness of a quantized model over a frozen batch partition.

    Full-precision logits are computed once at construction. Batch losses may
    be evaluated on worker threads, but are always summed sequentially in
    batch order, so the score does not depend on ``threads``.
    """

    def __init__(self, model_q, model_f, dataset, kind: LossKind = LossKind(), threads: int | None = None):
        self.model_q = model_q
        self.kind = kind
        self.batches = dataset.batch_list()
        if not self.batches:
            raise ValueError("calibration set is empty")
        self.threads = default_threads() if threads is None else max(1, int(threads))
        self.fp_logits = [model_f(b) for b in self.batches]
        self.calls = 0
        self._start = 0
        self._prefix: list | None = None

    def cache_prefix(self, block: int | None) -> None:
        """Freeze the hidden states entering ``block`` for later calls.

        Valid only while no quantizer before ``block`` changes; ``None``
        drops the cache.
        """
        if not block:
            self._start, self._prefix = 0, None
            return
        self._start = block
        self._prefix = [self.model_q.forward_prefix(b, block) for b in self.batches]

    def _batch_loss(self, i: int) -> float:
        if self._prefix is not None:
            logits = self.model_q.forward_from(self._start, self._prefix[i])
        else:
            logits = self.model_q(self.batches[i])
        return self.kind(logits, self.fp_logits[i])

    def batch_losses(self) -> list[float]:
        idx = range(len(self.batches))
        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                return list(pool.map(self._batch_loss, idx))
        return [self._batch_loss(i) for i in idx]

    def __call__(self) -> float:
        self.calls += 1
        total = 0.0
        for loss in self.batch_losses():
            total += loss
        score = -total / len(self.batches)
        if not np.isfinite(score):
            raise FloatingPointError("fitness is not finite")
        return score


def fitness(model_q, model_f, dataset, kind: LossKind = LossKind(), threads: int | None = None) -> float:
    """One-shot fitness: ``-(sum of batch losses) / number of batches``."""
    return Fitness(model_q, model_f, dataset, kind, threads)()
