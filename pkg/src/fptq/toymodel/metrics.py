"""Logit-level fidelity of a quantized model against the float model."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..recipe import Recipe
from .model import ToyModel, check_tokens, forward_fp
from .quantized import QuantizedCheckpoint, forward_quant


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    cosine: float
    top1_agreement: float
    xent_proxy: float
    n_positions: int

    def to_dict(self) -> dict:
        return asdict(self)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def compare_logits(ref: np.ndarray, test: np.ndarray) -> dict:
    """Per-position sums; divide by the position count to get means.

    ``xent`` is the cross-entropy of the test distribution under the
    reference distribution, so it equals the reference entropy when the two
    agree.
    """
    r = ref.reshape(-1, ref.shape[-1]).astype(np.float64)
    t = test.reshape(-1, test.shape[-1]).astype(np.float64)
    num = (r * t).sum(axis=1)
    den = np.linalg.norm(r, axis=1) * np.linalg.norm(t, axis=1)
    cos = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where((r == t).all(axis=1), 1.0, 0.0))
    lp_r, lp_t = _log_softmax(r), _log_softmax(t)
    return {
        "sq_err": float(((r - t) ** 2).mean(axis=1).sum()),
        "cosine": float(cos.sum()),
        "agree": int((r.argmax(axis=1) == t.argmax(axis=1)).sum()),
        "xent": float(-(np.exp(lp_r) * lp_t).sum()),
        "n": r.shape[0],
    }


def evaluate(
    model: ToyModel, recipe: Recipe, qckpt: QuantizedCheckpoint, eval_tokens, batch_size: int = 16
) -> MetricsReport:
    """Logit MSE, mean per-position cosine similarity, top-1 agreement and
    cross-entropy proxy over every position of ``eval_tokens``."""
    toks = np.asarray(eval_tokens)
    if toks.size == 0:
        raise ValueError("empty evaluation stream")
    toks = check_tokens(toks, model.config)
    acc = {"sq_err": 0.0, "cosine": 0.0, "agree": 0, "xent": 0.0, "n": 0}
    for lo in range(0, toks.shape[0], batch_size):
        chunk = toks[lo : lo + batch_size]
        part = compare_logits(forward_fp(model, chunk), forward_quant(model, recipe, qckpt, chunk))
        for k in acc:
            acc[k] += part[k]
    n = acc["n"]
    return MetricsReport(
        mse=acc["sq_err"] / n,
        cosine=acc["cosine"] / n,
        top1_agreement=acc["agree"] / n,
        xent_proxy=acc["xent"] / n,
        n_positions=n,
    )
