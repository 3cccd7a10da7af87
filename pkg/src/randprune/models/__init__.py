"""randprune.models

Contains all pydantic documents: architectures, plans, metric records and
experiment/sweep configuration.
"""

from randprune.models.arch import LayerSpec, NetworkSpec
from randprune.models.plan import LayerAllocation, SparsityPlan
from randprune.models.metrics import (
    AttackConfig,
    MetricsRecord,
    RECORD_COLUMNS,
    METRIC_COLUMNS,
)
from randprune.models.experiment import (
    TrainConfig,
    RECIPES,
    NetworkSource,
    DatasetSource,
    SparsitySource,
    MetricToggles,
    ExperimentConfig,
    SweepSpec,
)

__all__ = (
    "LayerSpec",
    "NetworkSpec",
    "LayerAllocation",
    "SparsityPlan",
    "AttackConfig",
    "MetricsRecord",
    "RECORD_COLUMNS",
    "METRIC_COLUMNS",
    "TrainConfig",
    "RECIPES",
    "NetworkSource",
    "DatasetSource",
    "SparsitySource",
    "MetricToggles",
    "ExperimentConfig",
    "SweepSpec",
)
