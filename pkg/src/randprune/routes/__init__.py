from fastapi import APIRouter

from randprune.routes import plan, runs

# Main router (all routes go under /api)
router = APIRouter(prefix="/api")

# Include all the subroutes
router.include_router(plan.router)
router.include_router(runs.router)
