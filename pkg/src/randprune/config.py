import os
from dataclasses import dataclass
from pathlib import Path

"""
Sample messages:
"network_invalid": "The architecture document could not be parsed.",
"plan_infeasible": "The requested sparsity cannot be met by this scheme.",
"method_unknown": "No such layer-wise ratio scheme.",
"run_not_found": "No run with that name under the output root.",
"""

msg_codes = {
    "plan_created": 0,
    "network_invalid": 1,
    "plan_infeasible": 2,
    "method_unknown": 3,
    "ratios_invalid": 4,
    "run_not_found": 5,
}

# Only environment variable the package reads
OUTPUT_ROOT_ENV = "RANDPRUNE_OUTPUT_ROOT"


@dataclass
class Config:
    development: bool
    msg_codes: dict
    output_root: Path
    ece_bins: int
    fgsm_epsilon: float
    hvp_rel_step: float
    eval_batch_size: int
    run_cache_period: float
    default_sparsity_grid: tuple[float, ...]
    min_retained_per_layer: int


config = Config(
    development=False,
    output_root=Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")),
    msg_codes=msg_codes,
    ece_bins=15,
    fgsm_epsilon=8 / 255,
    hvp_rel_step=1e-4,
    eval_batch_size=256,
    run_cache_period=30.0,  # In seconds
    default_sparsity_grid=(0.7, 0.5, 0.3),
    min_retained_per_layer=1,
)
