from __future__ import annotations

import typing as t

from pydantic import BaseModel, ConfigDict, Field, PositiveInt, model_validator

__all__ = ("LayerAllocation", "SparsityPlan", "PlanMethod")

PlanMethod = t.Literal[
    "uniform", "uniform_plus", "er", "erk", "erk_plus", "erk_last", "external"
]


class LayerAllocation(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    density: float = Field(gt=0.0, le=1.0)  # d^l = 1 - s^l
    retained: PositiveInt
    total: PositiveInt

    @model_validator(mode="after")
    def _check_retained(self) -> LayerAllocation:
        if self.retained > self.total:
            raise ValueError(
                f"layer '{self.name}': retains {self.retained} of {self.total}"
            )
        return self


class SparsityPlan(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    method: PlanMethod
    global_sparsity: float = Field(ge=0.0, lt=1.0)
    layers: tuple[LayerAllocation, ...]
    # Scale factor of the ER/ERK family, None for the other schemes
    scale: float | None = None

    @property
    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    @property
    def densities(self) -> list[float]:
        return [layer.density for layer in self.layers]

    @property
    def retained_counts(self) -> list[int]:
        return [layer.retained for layer in self.layers]

    @property
    def param_counts(self) -> list[int]:
        return [layer.total for layer in self.layers]

    @property
    def total_params(self) -> int:
        return sum(self.param_counts)

    @property
    def total_retained(self) -> int:
        return sum(self.retained_counts)

    @property
    def budget(self) -> int:
        return round((1 - self.global_sparsity) * self.total_params)

    @property
    def realized_sparsity(self) -> float:
        if not self.total_params:
            return 0.0
        return 1 - self.total_retained / self.total_params
