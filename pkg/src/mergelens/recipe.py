"""Declarative merge recipes (JSON documents, unknown keys rejected)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import RecipeError

Method = Literal["linear", "slerp", "task_arithmetic", "ties", "dare_ties"]

# Hyperparameter defaults, used when a recipe leaves a value unset.
DEFAULT_T = 0.5
DEFAULT_LAMBDA = 1.0
DEFAULT_DENSITY = 0.5
DEFAULT_DROP_PROB = 0.5
DEFAULT_SEED = 0

_ALIASES = {
    "linear": "linear",
    "slerp": "slerp",
    "taskarithmetic": "task_arithmetic",
    "task_arithmetic": "task_arithmetic",
    "ties": "ties",
    "dareties": "dare_ties",
    "dare_ties": "dare_ties",
}

_FIELDS_BY_METHOD = {
    "linear": {"weights"},
    "slerp": {"t"},
    "task_arithmetic": {"base", "lambda_"},
    "ties": {"base", "lambda_", "density"},
    "dare_ties": {"base", "lambda_", "density", "drop_prob", "seed"},
}
_OPTIONAL_FIELDS = {"weights", "t", "base", "lambda_", "density", "drop_prob", "seed"}


class MergeRecipe(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)

    method: Method
    parents: list[str] = Field(min_length=1)
    base: Optional[str] = None
    weights: Optional[list[float]] = None
    t: Optional[float] = None
    lambda_: Optional[float] = Field(default=None, alias="lambda")
    density: Optional[float] = None
    drop_prob: Optional[float] = None
    seed: Optional[int] = None

    @field_validator("method", mode="before")
    @classmethod
    def _normalize_method(cls, value):
        if isinstance(value, str):
            key = value.strip().lower().replace("-", "_").replace(" ", "_")
            return _ALIASES.get(key, _ALIASES.get(key.replace("_", ""), value))
        return value

    @field_validator("parents")
    @classmethod
    def _check_parents(cls, parents, info):
        if info.data.get("method") == "slerp" and len(parents) != 2:
            raise ValueError(f"slerp merges exactly 2 parents, got {len(parents)}")
        return parents

    @field_validator("weights")
    @classmethod
    def _check_weights(cls, weights, info):
        if weights is None:
            return weights
        parents = info.data.get("parents")
        if parents is not None and len(weights) != len(parents):
            raise ValueError("weights must have one entry per parent")
        if any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ValueError("weights must be non-negative with a positive sum")
        return weights

    @field_validator("t")
    @classmethod
    def _check_t(cls, t):
        if t is not None and not 0.0 <= t <= 1.0:
            raise ValueError("t must lie in [0, 1]")
        return t

    @field_validator("lambda_")
    @classmethod
    def _check_lambda(cls, lam):
        if lam is not None and not lam > 0:
            raise ValueError("lambda must be > 0")
        return lam

    @field_validator("density")
    @classmethod
    def _check_density(cls, density):
        if density is not None and not 0.0 < density <= 1.0:
            raise ValueError("density must lie in (0, 1]")
        return density

    @field_validator("drop_prob")
    @classmethod
    def _check_drop(cls, p):
        if p is not None and not 0.0 <= p < 1.0:
            raise ValueError("drop_prob must lie in [0, 1)")
        return p

    @field_validator("seed")
    @classmethod
    def _check_seed(cls, seed):
        if seed is not None and not 0 <= seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        return seed

    @model_validator(mode="after")
    def _check_method_fields(self):
        allowed = _FIELDS_BY_METHOD[self.method]
        for name in sorted(_OPTIONAL_FIELDS - allowed):
            if getattr(self, name) is not None:
                label = "lambda" if name == "lambda_" else name
                raise ValueError(f"field '{label}' does not apply to method '{self.method}'")
        if "base" in allowed and not self.base:
            raise ValueError(f"method '{self.method}' requires a base checkpoint")
        return self

    def resolved(self) -> "MergeRecipe":
        """Copy with every applicable hyperparameter filled in with its default."""
        defaults = {
            "t": DEFAULT_T,
            "lambda_": DEFAULT_LAMBDA,
            "density": DEFAULT_DENSITY,
            "drop_prob": DEFAULT_DROP_PROB,
            "seed": DEFAULT_SEED,
        }
        update = {
            k: v
            for k, v in defaults.items()
            if k in _FIELDS_BY_METHOD[self.method] and getattr(self, k) is None
        }
        if self.method == "linear" and self.weights is None:
            update["weights"] = [1.0] * len(self.parents)
        return self.model_copy(update=update)

    def hyperparameters(self) -> dict:
        data = self.resolved().model_dump(by_alias=True, exclude_none=True)
        data.pop("parents")
        data.pop("base", None)
        return data


def first_error(exc: ValidationError) -> tuple[str, str]:
    err = exc.errors()[0]
    loc = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err["loc"]).lstrip(".")
    msg = err["msg"].removeprefix("Value error, ")
    return loc, msg


def parse_recipe(data) -> MergeRecipe:
    try:
        return MergeRecipe.model_validate(data)
    except ValidationError as exc:
        loc, msg = first_error(exc)
        raise RecipeError(f"invalid recipe at '{loc or '<root>'}': {msg}") from None


def load_recipe(path) -> MergeRecipe:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise RecipeError(f"cannot read recipe {path}: {exc}") from None
    return parse_recipe(data)
