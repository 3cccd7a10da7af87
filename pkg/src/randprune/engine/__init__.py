"""randprune.engine

A small numpy network engine: masked forward/backward passes, momentum SGD
with a static mask, finite-difference Hessian-vector products and one-shot
saliency ratios.
"""

from randprune.engine.network import (
    Batch,
    ParamState,
    Gradients,
    init_params,
    apply_mask,
    forward_loss,
    backward,
    value_and_grad,
    input_gradient,
    predict_logits,
)
from randprune.engine.optim import learning_rate, sgd_step
from randprune.engine.saliency import (
    finite_difference_hvp,
    hvp,
    snip_scores,
    grasp_scores,
    ratios_from_scores,
    snip_ratios,
    grasp_ratios,
)
from randprune.engine.training import fit
from randprune.engine.checkpoint import Checkpoint, save_checkpoint, load_checkpoint

__all__ = (
    "Batch",
    "ParamState",
    "Gradients",
    "init_params",
    "apply_mask",
    "forward_loss",
    "backward",
    "value_and_grad",
    "input_gradient",
    "predict_logits",
    "learning_rate",
    "sgd_step",
    "finite_difference_hvp",
    "hvp",
    "snip_scores",
    "grasp_scores",
    "ratios_from_scores",
    "snip_ratios",
    "grasp_ratios",
    "fit",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
)
