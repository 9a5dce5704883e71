"""Analysis/evaluation report (JSON) and histogram CSV files."""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any

import numpy as np

from .. import __version__
from ..numerics import ActivationStats, effective_bits
from ..quantizers import SUPPORTED_BITS
from ..recipe import Recipe
from .container import atomic_write
from .recipe_json import recipe_digest

HIST_COLUMNS = ("bin_lo", "bin_hi", "count_pre", "count_post")


def _levels_summary(levels: np.ndarray) -> dict[str, float]:
    return {
        "min": float(levels.min()),
        "median": float(np.median(levels)),
        "max": float(levels.max()),
    }


def layer_entries(recipe: Recipe, stats: Mapping[str, ActivationStats] | None = None) -> list:
    """Per-layer rows: range ``v``, strategy, post-equalization range and a
    summary of the per-channel quantization levels before and after it."""
    bits = recipe.act_bits if recipe.act_bits in SUPPORTED_BITS else 8
    rows = []
    for lp in recipe.layers:
        entry: dict[str, Any] = {
            "layer_id": lp.layer_id,
            "strategy": lp.strategy.value,
            "post_lae_range": lp.calibrated_absmax if lp.lae_scales is not None else None,
        }
        st = stats.get(lp.layer_id) if stats is not None else None
        entry["v"] = st.tensor_absmax if st is not None else None
        if st is not None and st.tensor_absmax > 0:
            eff = {"pre": _levels_summary(effective_bits(st, bits))}
            if lp.lae_scales is not None:
                m = st.channel_absmax.astype(np.float64) / lp.lae_scales.s
                eff["post"] = _levels_summary((2.0**bits) * m / m.max())
            entry["effective_levels"] = eff
        else:
            entry["effective_levels"] = None
        rows.append(entry)
    return rows


def build_report(
    recipe: Recipe,
    stats: Mapping[str, ActivationStats] | None = None,
    metrics: Mapping[str, Any] | None = None,
    warnings: Iterable[str] = (),
    **extra: Any,
) -> dict[str, Any]:
    doc = {
        "tool": "fptq",
        "tool_version": __version__,
        "recipe_digest": recipe_digest(recipe),
        "layers": layer_entries(recipe, stats),
        "metrics": dict(metrics) if metrics is not None else None,
        "warnings": list(warnings),
    }
    doc.update(extra)
    return doc


def report_to_text(doc: Mapping[str, Any]) -> str:
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_report(path, doc: Mapping[str, Any]) -> None:
    atomic_write(path, report_to_text(doc).encode())


def read_report(path) -> dict[str, Any]:
    return json.loads(Path(path).read_text())


def histogram_filename(layer_id: str) -> str:
    return f"hist_{layer_id}.csv"


def histogram_to_csv(hist) -> str:
    """``hist`` is a :class:`~fptq.calibration.LayerHistogram`; ``count_post``
    cells stay empty for layers without equalization."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HIST_COLUMNS)
    edges = hist.bin_edges
    for i in range(len(edges) - 1):
        post = "" if hist.count_post is None else int(hist.count_post[i])
        w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(hist.count_pre[i]), post])
    return buf.getvalue()


def write_histograms(directory, hists: Mapping[str, Any]) -> list:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for lid in sorted(hists):
        p = d / histogram_filename(lid)
        atomic_write(p, histogram_to_csv(hists[lid]).encode())
        paths.append(p)
    return paths


def read_histogram(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        r = csv.DictReader(f)
        if tuple(r.fieldnames or ()) != HIST_COLUMNS:
            raise ValueError(f"{path}: expected columns {HIST_COLUMNS}")
        rows = list(r)
    post = [row["count_post"] for row in rows]
    return {
        "bin_lo": np.array([float(row["bin_lo"]) for row in rows]),
        "bin_hi": np.array([float(row["bin_hi"]) for row in rows]),
        "count_pre": np.array([int(row["count_pre"]) for row in rows]),
        "count_post": None if all(p == "" for p in post) else np.array([int(p) for p in post]),
    }
