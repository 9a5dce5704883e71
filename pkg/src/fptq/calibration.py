"""Calibration and the layerwise activation policy.

A calibration pass records the absolute maxima of every linear layer's input.
Each layer is then classified by its activation range ``v`` (the tensor
maximum): ``v <= v0`` keeps static per-tensor quantization, ``v0 < v < v1``
gets logarithmic equalization followed by static per-tensor quantization,
anything larger is quantized dynamically per token.
"""

from __future__ import annotations

import enum
import logging
import os
import threading
import warnings
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import reduce
from pathlib import Path

import numpy as np

from .equalization import LaeConfig, LaeScales, shared_scales_for_siblings
from .numerics import ActivationStats, absmax_per_col, merge_stats
from .recipe import (
    PASS_THROUGH_BITS,
    LayerPolicy,
    PolicyThresholds,
    QuantConfig,
    Recipe,
    Strategy,
)
from .toymodel.model import SIBLING_GROUPS, ToyModel, check_tokens, forward_fp

log = logging.getLogger(__name__)

DEFAULT_SAMPLES = 512
DEFAULT_SEQ_LEN = 32
DEFAULT_RESERVOIR = 65536

# domain separation for seeded token streams
STREAM_CALIB = 0
STREAM_EVAL = 1


class PolicyWarning(UserWarning):
    """A layer could not get the strategy its range asks for."""


class SourceKind(str, enum.Enum):
    TOKEN_FILE = "token_file"
    RANDOM = "random"


def read_token_file(path) -> np.ndarray:
    """Whitespace-separated integer token ids, read as one stream."""
    try:
        text = Path(path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise ValueError(f"cannot read token file {path}: {exc}") from exc
    try:
        ids = np.array([int(tok) for tok in text.split()], dtype=np.int64)
    except ValueError as exc:
        raise ValueError(f"token file {path} holds a non-integer entry: {exc}") from exc
    return ids


def write_token_file(path, tokens) -> None:
    rows = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    Path(path).write_text("".join(" ".join(map(str, r)) + "\n" for r in rows))


def zipf_tokens(vocab_size: int, n_samples: int, seq_len: int, seed: int, exponent: float = 1.1) -> np.ndarray:
    """Seeded text-like stream: Zipf-distributed ranks over a shuffled vocabulary."""
    rng = np.random.default_rng([seed, 0x21F])
    p = 1.0 / np.arange(1, vocab_size + 1) ** exponent
    order = rng.permutation(vocab_size)
    return order[rng.choice(vocab_size, size=(n_samples, seq_len), p=p / p.sum())]


def random_tokens(vocab_size: int, n_samples: int, seq_len: int, seed: int, stream: int = STREAM_CALIB) -> np.ndarray:
    rng = np.random.default_rng([seed, stream])
    return rng.integers(0, vocab_size, size=(n_samples, seq_len))


@dataclass(frozen=True)
class CalibSource:
    kind: SourceKind
    path: str | None = None
    n_samples: int = DEFAULT_SAMPLES
    seq_len: int = DEFAULT_SEQ_LEN
    seed: int | None = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", SourceKind(self.kind))
        if self.kind is SourceKind.TOKEN_FILE and not self.path:
            raise ValueError("a token-file source needs a path")
        if self.kind is SourceKind.RANDOM and self.seed is None:
            raise ValueError("a random-token source needs a seed")
        if self.n_samples < 1 or self.seq_len < 1:
            raise ValueError("n_samples and seq_len must be >= 1")

    @classmethod
    def random(cls, n_samples: int = DEFAULT_SAMPLES, seq_len: int = DEFAULT_SEQ_LEN, seed: int = 0) -> CalibSource:
        return cls(SourceKind.RANDOM, None, n_samples, seq_len, seed)

    @classmethod
    def token_file(cls, path, n_samples: int = DEFAULT_SAMPLES, seq_len: int = DEFAULT_SEQ_LEN) -> CalibSource:
        return cls(SourceKind.TOKEN_FILE, str(path), n_samples, seq_len, None)

    def tokens(self, vocab_size: int, stream: int = STREAM_CALIB) -> np.ndarray:
        """``(n, seq_len)`` token ids.

        Token files are cut into consecutive windows; fewer than
        ``n_samples`` windows are used as-is.
        """
        if self.kind is SourceKind.RANDOM:
            return random_tokens(vocab_size, self.n_samples, self.seq_len, self.seed, stream)
        ids = read_token_file(self.path)
        n = min(self.n_samples, ids.size // self.seq_len)
        if n == 0:
            raise ValueError(f"token file {self.path} holds fewer than {self.seq_len} tokens")
        toks = ids[: n * self.seq_len].reshape(n, self.seq_len)
        if toks.min() < 0 or toks.max() >= vocab_size:
            raise ValueError(f"token file {self.path}: token id out of vocabulary [0, {vocab_size})")
        return toks


class ActivationReservoir:
    """Bounded, order-independent sample of raw input rows per layer.

    Every row gets a pseudo-random key derived from ``(seed, batch index)``;
    the reservoir keeps the rows with the smallest keys, so the result does
    not depend on the order in which batches arrive.
    """

    def __init__(self, max_values: int = DEFAULT_RESERVOIR, seed: int = 0):
        if max_values < 1:
            raise ValueError("max_values must be >= 1")
        self.max_values = max_values
        self.seed = seed
        self._rows: dict[str, np.ndarray] = {}
        self._keys: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def add(self, layer_id: str, x: np.ndarray, batch_index: int) -> None:
        cap = max(1, self.max_values // x.shape[1])
        keys = np.random.default_rng([self.seed, batch_index]).random(x.shape[0])
        keep = np.argsort(keys, kind="stable")[:cap]
        with self._lock:
            rows = x[keep]
            k = keys[keep]
            if layer_id in self._rows:
                rows = np.concatenate([self._rows[layer_id], rows])
                k = np.concatenate([self._keys[layer_id], k])
                # ties broken by the row values' order-independent key only
                order = np.lexsort((rows.sum(axis=1), k))[:cap]
                rows, k = rows[order], k[order]
            self._rows[layer_id] = rows
            self._keys[layer_id] = k

    def __contains__(self, layer_id) -> bool:
        return layer_id in self._rows

    def __len__(self) -> int:
        return len(self._rows)

    def rows(self, layer_id: str) -> np.ndarray:
        order = np.lexsort((self._rows[layer_id].sum(axis=1), self._keys[layer_id]))
        return self._rows[layer_id][order]

    @property
    def layer_ids(self) -> list[str]:
        return list(self._rows)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("FPTQ_THREADS", "1")))
    except ValueError:
        return 1


def calibrate(
    model: ToyModel,
    source,
    *,
    batch_size: int = 64,
    reservoir: ActivationReservoir | None = None,
    workers: int | None = None,
) -> dict[str, ActivationStats]:
    """Run the float model over the calibration data and record input stats.

    ``source`` is a :class:`CalibSource` or an explicit ``(n, seq)`` token
    array. Batches may be processed by ``workers`` threads (default from
    ``FPTQ_THREADS``); the per-batch records are reduced with
    :func:`merge_stats`, which makes the result independent of scheduling.
    """
    cfg = model.config
    if isinstance(source, CalibSource):
        tokens = source.tokens(cfg.vocab_size)
    else:
        tokens = np.asarray(source)
    tokens = check_tokens(tokens, cfg)
    starts = list(range(0, tokens.shape[0], batch_size))

    def run(bi: int) -> dict[str, ActivationStats]:
        chunk = tokens[starts[bi] : starts[bi] + batch_size]
        out: dict[str, ActivationStats] = {}
        last = [None, None]  # siblings receive the same array object

        def observe(layer_id, x):
            if last[0] is x:
                m = last[1]
            else:
                m = absmax_per_col(x)
                last[:] = [x, m]
            out[layer_id] = ActivationStats(layer_id, m, chunk.shape[0])
            if reservoir is not None:
                reservoir.add(layer_id, x, bi)

        forward_fp(model, chunk, observer=observe)
        return out

    n_workers = workers or _workers()
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            parts = list(pool.map(run, range(len(starts))))
    else:
        parts = [run(bi) for bi in range(len(starts))]
    stats = {lid: reduce(merge_stats, (p[lid] for p in parts)) for lid in parts[0]}
    log.debug("calibrated %d layers on %d samples", len(stats), tokens.shape[0])
    return stats


def classify_layer(stats: ActivationStats, thresholds: PolicyThresholds = PolicyThresholds()) -> Strategy:
    v = stats.tensor_absmax
    if v <= thresholds.v0:
        return Strategy.STATIC_PER_TENSOR
    if v < thresholds.v1:
        return Strategy.LAE_STATIC_PER_TENSOR
    return Strategy.DYNAMIC_PER_TOKEN


def post_equalization_range(stats: ActivationStats, scales: LaeScales) -> float:
    """Tensor maximum after dividing each channel by its scale."""
    return float(np.max(stats.channel_absmax.astype(np.float64) / scales.s))


def _group_stats(stats: Mapping[str, ActivationStats], ids: list[str]) -> ActivationStats:
    """Joint statistics of sibling layers (they read the same tensor)."""
    gid = ids[0]
    return reduce(merge_stats, (ActivationStats(gid, stats[i].channel_absmax, stats[i].sample_count) for i in ids))


def _require_positive(layer_id: str, v: float) -> float:
    if not v > 0:
        raise ValueError(f"{layer_id}: calibration saw only zeros; cannot set a static scale")
    return v


def build_recipe(
    model: ToyModel,
    stats: Mapping[str, ActivationStats],
    thresholds: PolicyThresholds = PolicyThresholds(),
    lae_cfg: LaeConfig = LaeConfig(),
    quant_cfg: QuantConfig = QuantConfig(),
) -> Recipe:
    """Assign every linear layer its activation strategy.

    Sibling layers fed by one normalization (``q/k/v`` and ``gate/up``) are
    classified on their joint statistics and share one LAE scale vector that
    is fused into that normalization. ``o_proj`` and ``down_proj`` have no
    fusable predecessor: if they land in the LAE band they fall back to
    dynamic per-token quantization and a :class:`PolicyWarning` is issued.
    With activation quantization disabled no equalization is applied.
    """
    missing = [lid for lid in model.linear_layer_ids if lid not in stats]
    if missing:
        raise ValueError(f"stats missing for layers: {missing}")
    act_on = quant_cfg.act_bits != PASS_THROUGH_BITS
    policies: dict[str, LayerPolicy] = {}
    for i in range(model.config.n_layers):
        p = f"layers.{i}."
        for norm, members in SIBLING_GROUPS.items():
            ids = [p + m for m in members]
            joint = _group_stats(stats, ids)
            v = _require_positive(ids[0], joint.tensor_absmax)
            strategy = classify_layer(joint, thresholds)
            if strategy is Strategy.LAE_STATIC_PER_TENSOR and act_on:
                for lid in ids:
                    s = shared_scales_for_siblings([stats[j] for j in ids], lae_cfg, layer_id=lid)
                    policies[lid] = LayerPolicy(
                        lid, strategy, post_equalization_range(joint, s), s, p + norm
                    )
                continue
            if strategy is Strategy.LAE_STATIC_PER_TENSOR:
                strategy = Strategy.STATIC_PER_TENSOR
            for lid in ids:
                policies[lid] = LayerPolicy(lid, strategy, v)
        for name in ("o_proj", "down_proj"):
            lid = p + name
            v = _require_positive(lid, stats[lid].tensor_absmax)
            strategy = classify_layer(stats[lid], thresholds)
            if strategy is Strategy.LAE_STATIC_PER_TENSOR:
                if act_on:
                    warnings.warn(
                        f"{lid}: range {v:.4g} is in the equalization band but the layer has no "
                        "preceding normalization to fuse into; using dynamic per-token",
                        PolicyWarning,
                        stacklevel=2,
                    )
                    strategy = Strategy.DYNAMIC_PER_TOKEN
                else:
                    strategy = Strategy.STATIC_PER_TENSOR
            policies[lid] = LayerPolicy(lid, strategy, v)
    layers = [policies[lid] for lid in model.linear_layer_ids]
    return Recipe(
        model_id=model.model_id,
        thresholds=thresholds,
        lae_alpha=lae_cfg.alpha,
        weight_bits=quant_cfg.weight_bits,
        act_bits=quant_cfg.act_bits,
        group_size=quant_cfg.group_size,
        kv_bits=quant_cfg.kv_bits,
        layers=layers,
    )


def build_naive_recipe(
    model: ToyModel,
    stats: Mapping[str, ActivationStats],
    quant_cfg: QuantConfig = QuantConfig(),
) -> Recipe:
    """Baseline without the layerwise policy: every activation static
    per-tensor, no equalization, plain per-channel weights."""
    layers = [
        LayerPolicy(lid, Strategy.STATIC_PER_TENSOR, _require_positive(lid, stats[lid].tensor_absmax))
        for lid in model.linear_layer_ids
    ]
    return Recipe(
        model_id=model.model_id,
        thresholds=PolicyThresholds(),
        lae_alpha=1.0,
        weight_bits=quant_cfg.weight_bits,
        act_bits=quant_cfg.act_bits,
        group_size=0,
        kv_bits=quant_cfg.kv_bits,
        layers=layers,
    )


@dataclass
class LayerHistogram:
    layer_id: str
    channel_absmax: np.ndarray
    bin_edges: np.ndarray
    count_pre: np.ndarray
    count_post: np.ndarray | None = None

    @property
    def n_values(self) -> int:
        return int(self.count_pre.sum())


def histogram_export(
    reservoir: ActivationReservoir | None,
    bins: int = 64,
    recipe: Recipe | None = None,
) -> dict[str, LayerHistogram]:
    """Binned value counts of the sampled layer inputs.

    For layers the recipe equalizes, the sampled rows are also divided by the
    layer's scales and binned on the same edges (``count_post``).
    """
    if reservoir is None or len(reservoir) == 0:
        raise ValueError("no raw capture")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    out = {}
    for lid in reservoir.layer_ids:
        rows = reservoir.rows(lid)
        post = None
        if recipe is not None and lid in recipe and recipe[lid].lae_scales is not None:
            post = (rows / recipe[lid].lae_scales.s[None, :]).astype(np.float32)
        r = float(np.abs(rows).max())
        if post is not None:
            r = max(r, float(np.abs(post).max()))
        r = r if r > 0 else 1.0
        edges = np.linspace(-r, r, bins + 1)
        count_pre, _ = np.histogram(rows, bins=edges)
        count_post = np.histogram(post, bins=edges)[0] if post is not None else None
        out[lid] = LayerHistogram(lid, np.abs(rows).max(axis=0), edges, count_pre, count_post)
    return out


def build_passthrough_recipe(model: ToyModel) -> Recipe:
    """Recipe that disables every quantizer; its forward equals the float one."""
    layers = [LayerPolicy(lid, Strategy.STATIC_PER_TENSOR, 1.0) for lid in model.linear_layer_ids]
    return Recipe(
        model_id=model.model_id,
        thresholds=PolicyThresholds(),
        lae_alpha=1.0,
        weight_bits=PASS_THROUGH_BITS,
        act_bits=PASS_THROUGH_BITS,
        group_size=0,
        kv_bits=PASS_THROUGH_BITS,
        layers=layers,
    )
