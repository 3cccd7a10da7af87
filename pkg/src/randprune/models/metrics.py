from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, model_validator

__all__ = ("MetricsRecord", "AttackConfig", "RECORD_COLUMNS", "METRIC_COLUMNS")


class AttackConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epsilon: float = Field(default=8 / 255, ge=0.0)
    input_min: float = 0.0
    input_max: float = 1.0

    @model_validator(mode="after")
    def _check_range(self) -> AttackConfig:
        if self.input_min >= self.input_max:
            raise ValueError("input_min must be below input_max")
        return self


class MetricsRecord(BaseModel):
    """One evaluation snapshot of a run. Metrics switched off in the run's
    configuration stay None."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    run: str
    method: str
    epoch: NonNegativeInt
    train_loss: float | None = None
    clean_accuracy: float = Field(ge=0.0, le=1.0)
    ece: float | None = Field(default=None, ge=0.0, le=1.0)
    nll: float | None = Field(default=None, ge=0.0)
    fgsm_accuracy: float | None = Field(default=None, ge=0.0, le=1.0)
    ood_auc: float | None = Field(default=None, ge=0.0, le=1.0)
    ood_auc_heldout: float | None = Field(default=None, ge=0.0, le=1.0)
    grad_flow_norm: float | None = Field(default=None, ge=0.0)
    params: NonNegativeInt
    total_params: NonNegativeInt
    flops: NonNegativeInt
    sparsity: float = Field(ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_sparsity(self) -> MetricsRecord:
        if self.params > self.total_params:
            raise ValueError("params exceed total_params")
        expected = 1 - self.params / self.total_params if self.total_params else 0.0
        if abs(expected - self.sparsity) > 1e-9:
            raise ValueError(
                f"sparsity {self.sparsity} inconsistent with"
                f" {self.params}/{self.total_params} params"
            )
        return self


# Column order of every summary CSV
RECORD_COLUMNS = tuple(MetricsRecord.model_fields)
# Measured quantities, i.e. everything but the identifying columns
METRIC_COLUMNS = tuple(c for c in RECORD_COLUMNS if c not in ("run", "method", "epoch"))
