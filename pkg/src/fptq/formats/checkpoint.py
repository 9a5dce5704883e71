"""Float and quantized model checkpoints on top of the container format."""

from __future__ import annotations

from ..quantizers import Granularity, QuantParams, QuantTensor
from ..recipe import PASS_THROUGH_BITS
from ..toymodel.model import ModelConfig, ToyModel, parameter_shapes
from ..toymodel.quantized import QuantizedCheckpoint
from .container import (
    Container,
    ManifestError,
    StoredTensor,
    read_container,
    write_container,
)
from .recipe_json import RecipeFormatError, recipe_from_dict, recipe_to_dict

KIND_FP = "fp-checkpoint"
KIND_QUANT = "quantized-checkpoint"
SCALES_SUFFIX = ".scales"
_PAYLOAD_DTYPE = {4: "u8-packed-4bit", 8: "i8"}


def _config(c: Container) -> ModelConfig:
    try:
        return ModelConfig.from_dict(c.model_config)
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"model_config: {exc}") from None


def _expect_kind(c: Container, kind: str) -> None:
    if c.kind != kind:
        raise ManifestError(f"kind: expected {kind!r}, got {c.kind!r}")


def model_to_container(model: ToyModel) -> Container:
    tensors = {name: StoredTensor("f32", t) for name, t in model.params.items()}
    return Container(KIND_FP, model.config.to_dict(), tensors)


def write_checkpoint(path, model: ToyModel) -> None:
    write_container(path, model_to_container(model))


def model_from_container(c: Container) -> ToyModel:
    _expect_kind(c, KIND_FP)
    if c.recipe is not None:
        raise ManifestError("recipe: not allowed in a float checkpoint")
    bad = [n for n, t in c.tensors.items() if t.dtype != "f32"]
    if bad:
        raise ManifestError(f"tensors[{bad[0]}].dtype: float checkpoints hold f32 tensors only")
    try:
        return ToyModel(_config(c), {n: t.array for n, t in c.tensors.items()})
    except ValueError as exc:
        raise ManifestError(f"tensors: {exc}") from None


def read_checkpoint(path) -> ToyModel:
    return model_from_container(read_container(path))


def quantized_to_container(q: QuantizedCheckpoint) -> Container:
    tensors = {name: StoredTensor("f32", t) for name, t in q.tensors.items()}
    for lid, w in q.weights.items():
        name = lid + ".weight"
        if isinstance(w, QuantTensor):
            tensors[name] = StoredTensor(_PAYLOAD_DTYPE[w.params.bits], w.q)
            s = w.params.scales
            tensors[name + SCALES_SUFFIX] = StoredTensor("f32", s.reshape(-1, 1) if s.ndim == 1 else s)
        else:
            tensors[name] = StoredTensor("f32", w)
    return Container(KIND_QUANT, q.config.to_dict(), tensors, recipe_to_dict(q.recipe))


def write_quantized(path, q: QuantizedCheckpoint) -> None:
    write_container(path, quantized_to_container(q))


def quantized_from_container(c: Container) -> QuantizedCheckpoint:
    _expect_kind(c, KIND_QUANT)
    if c.recipe is None:
        raise ManifestError("recipe: missing from quantized checkpoint")
    try:
        recipe = recipe_from_dict(c.recipe)
    except RecipeFormatError as exc:
        raise ManifestError(f"recipe.{exc}") from None
    config = _config(c)
    tensors = dict(c.tensors)
    weights = {}
    for lid in recipe.layer_ids:
        name = lid + ".weight"
        stored = tensors.pop(name, None)
        if stored is None:
            raise ManifestError(f"tensors: {name} missing")
        if recipe.weight_bits == PASS_THROUGH_BITS:
            if stored.dtype != "f32":
                raise ManifestError(f"tensors[{name}].dtype: expected f32")
            weights[lid] = stored.array
            continue
        if stored.dtype != _PAYLOAD_DTYPE[recipe.weight_bits]:
            raise ManifestError(f"tensors[{name}].dtype: expected {_PAYLOAD_DTYPE[recipe.weight_bits]}")
        scales = tensors.pop(name + SCALES_SUFFIX, None)
        if scales is None or scales.dtype != "f32" or scales.array.ndim != 2:
            raise ManifestError(f"tensors: {name + SCALES_SUFFIX} missing or malformed")
        try:
            if recipe.group_size == 0:
                params = QuantParams(recipe.weight_bits, Granularity.PER_CHANNEL, scales.array.reshape(-1))
                if scales.array.shape[1] != 1:
                    raise ValueError("per-channel scales must have one column")
            else:
                params = QuantParams(recipe.weight_bits, Granularity.GROUP_WISE, scales.array, recipe.group_size)
            weights[lid] = QuantTensor(stored.array, params)
        except ValueError as exc:
            raise ManifestError(f"tensors[{name}]: {exc}") from None
    shapes = parameter_shapes(config)
    expected = {n for n in shapes if n[: -len(".weight")] not in weights}
    if set(tensors) != expected:
        odd = sorted(set(tensors) ^ expected)
        raise ManifestError(f"tensors: unexpected or missing entries {odd}")
    for name, t in tensors.items():
        if t.dtype != "f32" or t.array.shape != shapes[name]:
            raise ManifestError(f"tensors[{name}]: expected f32 of shape {shapes[name]}")
    for lid, w in weights.items():
        if w.shape != shapes[lid + ".weight"]:
            raise ManifestError(f"tensors[{lid}.weight].shape: expected {shapes[lid + '.weight']}")
    try:
        return QuantizedCheckpoint(config, recipe, {n: t.array for n, t in tensors.items()}, weights)
    except ValueError as exc:
        raise ManifestError(f"tensors: {exc}") from None


def read_quantized(path) -> QuantizedCheckpoint:
    return quantized_from_container(read_container(path))

