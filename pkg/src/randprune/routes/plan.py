from __future__ import annotations

from logging import getLogger

from fastapi import APIRouter, Response
from pydantic import BaseModel, Field

from randprune.alloc import plan_for, plan_from_ratios
from randprune.arch import dense_flops, parse_network
from randprune.config import config
from randprune.exceptions import (
    InfeasiblePlanError,
    NetworkParseError,
    PlanMismatchError,
)

# Metadata at the top for instant accessibility
metadata = {
    "name": "plan",
    "description": "Layer-wise sparsity ratios of an architecture document",
}

router = APIRouter(prefix="/plan", tags=["plan"])
logger = getLogger(__name__)

# Schemes that need nothing but the architecture
PLAN_METHODS = (
    "dense",
    "uniform",
    "uniform_plus",
    "er",
    "erk",
    "erk_plus",
    "erk_last",
    "external",
)


class PlanBody(BaseModel):
    network: str  # architecture document text
    method: str = "erk"
    sparsity: float = 0.0
    last_density: float = 1.0
    power: float = Field(default=1.0, gt=0.0)
    ratios: list[float] | None = None


@router.post("")
async def create_plan(body: PlanBody, response: Response):
    if body.method not in PLAN_METHODS:
        response.status_code = 404
        return {"msg_code": config.msg_codes["method_unknown"]}

    try:
        net = parse_network(body.network)
    except NetworkParseError as err:
        response.status_code = 400
        return {"msg_code": config.msg_codes["network_invalid"], "detail": str(err)}

    try:
        if body.method == "external":
            plan = plan_from_ratios(net, body.ratios or [])
        else:
            plan = plan_for(
                body.method,
                net,
                body.sparsity,
                last_density=body.last_density,
                power=body.power,
            )
    except InfeasiblePlanError as err:
        response.status_code = 422
        return {"msg_code": config.msg_codes["plan_infeasible"], "detail": str(err)}
    except PlanMismatchError as err:
        response.status_code = 400
        return {"msg_code": config.msg_codes["ratios_invalid"], "detail": str(err)}

    return {
        "msg_code": config.msg_codes["plan_created"],
        "plan": plan.model_dump(),
        "total_params": plan.total_params,
        "retained_params": plan.total_retained,
        "dense_flops": dense_flops(net),
    }
