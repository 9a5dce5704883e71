"""Canonical JSON encoding of :class:`~fptq.recipe.Recipe`.

Keys are sorted, floats use Python's shortest round-trip representation and
nothing else varies, so equal recipes give equal bytes and a digest of the
text identifies the recipe.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

from ..equalization import LaeScales
from ..recipe import LayerPolicy, PolicyThresholds, Recipe, Strategy

SCHEMA = "fptq-recipe/1"

_TOP = {
    "schema": str,
    "model_id": str,
    "thresholds": dict,
    "lae_alpha": float,
    "weight_bits": int,
    "act_bits": int,
    "group_size": int,
    "kv_bits": int,
    "layers": list,
}
_THRESH = {"v0": float, "v1": float}
_LAYER = {
    "layer_id": str,
    "strategy": str,
    "calibrated_absmax": float,
    "lae_scales": (list, type(None)),
    "fusion_target": (str, type(None)),
}


class RecipeFormatError(ValueError):
    """Schema violation; the message starts with the offending field path."""

    def __init__(self, field: str, problem: str):
        super().__init__(f"{field}: {problem}")
        self.field = field


def recipe_to_dict(recipe: Recipe) -> dict[str, Any]:
    return {
        "schema": SCHEMA,
        "model_id": recipe.model_id,
        "thresholds": {"v0": float(recipe.thresholds.v0), "v1": float(recipe.thresholds.v1)},
        "lae_alpha": float(recipe.lae_alpha),
        "weight_bits": recipe.weight_bits,
        "act_bits": recipe.act_bits,
        "group_size": recipe.group_size,
        "kv_bits": recipe.kv_bits,
        "layers": [
            {
                "layer_id": lp.layer_id,
                "strategy": lp.strategy.value,
                "calibrated_absmax": float(lp.calibrated_absmax),
                "lae_scales": None if lp.lae_scales is None else [float(v) for v in lp.lae_scales.s],
                "fusion_target": lp.fusion_target,
            }
            for lp in recipe.layers
        ],
    }


def recipe_to_text(recipe: Recipe) -> str:
    return json.dumps(recipe_to_dict(recipe), sort_keys=True, indent=1, allow_nan=False) + "\n"


def recipe_digest(recipe: Recipe) -> str:
    return hashlib.sha256(recipe_to_text(recipe).encode()).hexdigest()


def _typed(obj: dict, schema: dict, where: str) -> None:
    if not isinstance(obj, dict):
        raise RecipeFormatError(where or "recipe", "expected an object")
    for key in obj:
        if key not in schema:
            raise RecipeFormatError(f"{where}{key}", "unknown field")
    for key, typ in schema.items():
        path = f"{where}{key}"
        if key not in obj:
            raise RecipeFormatError(path, "missing field")
        v = obj[key]
        types = typ if isinstance(typ, tuple) else (typ,)
        if isinstance(v, bool):
            ok = False
        elif float in types:
            ok = isinstance(v, (int, float))
        else:
            ok = isinstance(v, types)
        if not ok:
            raise RecipeFormatError(path, f"expected {' or '.join(t.__name__ for t in types)}, got {type(v).__name__}")


def _reject_constant(name):
    raise RecipeFormatError("recipe", f"non-finite number {name}")


def recipe_from_dict(d: dict[str, Any]) -> Recipe:
    _typed(d, _TOP, "")
    if d["schema"] != SCHEMA:
        raise RecipeFormatError("schema", f"expected {SCHEMA!r}, got {d['schema']!r}")
    _typed(d["thresholds"], _THRESH, "thresholds.")
    layers = []
    for i, ld in enumerate(d["layers"]):
        where = f"layers[{i}]."
        _typed(ld, _LAYER, where)
        try:
            strategy = Strategy(ld["strategy"])
        except ValueError:
            raise RecipeFormatError(where + "strategy", f"unknown strategy {ld['strategy']!r}") from None
        scales = None
        if ld["lae_scales"] is not None:
            vals = ld["lae_scales"]
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
                raise RecipeFormatError(where + "lae_scales", "expected a list of numbers")
            try:
                scales = LaeScales(ld["layer_id"], [float(v) for v in vals])
            except ValueError as exc:
                raise RecipeFormatError(where + "lae_scales", str(exc)) from None
        try:
            layers.append(LayerPolicy(ld["layer_id"], strategy, float(ld["calibrated_absmax"]), scales, ld["fusion_target"]))
        except ValueError as exc:
            raise RecipeFormatError(where.rstrip("."), str(exc)) from None
    try:
        thresholds = PolicyThresholds(float(d["thresholds"]["v0"]), float(d["thresholds"]["v1"]))
    except ValueError as exc:
        raise RecipeFormatError("thresholds", str(exc)) from None
    if not d["lae_alpha"] > 0:
        raise RecipeFormatError("lae_alpha", "must be > 0")
    try:
        return Recipe(
            model_id=d["model_id"],
            thresholds=thresholds,
            lae_alpha=float(d["lae_alpha"]),
            weight_bits=d["weight_bits"],
            act_bits=d["act_bits"],
            group_size=d["group_size"],
            kv_bits=d["kv_bits"],
            layers=layers,
        )
    except ValueError as exc:
        msg = str(exc)
        field = next((f for f in ("weight_bits", "act_bits", "kv_bits", "group_size") if msg.startswith(f)), "layers")
        raise RecipeFormatError(field, msg) from None


def recipe_from_text(text: str) -> Recipe:
    try:
        d = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise RecipeFormatError("recipe", f"invalid JSON: {exc}") from None
    return recipe_from_dict(d)
