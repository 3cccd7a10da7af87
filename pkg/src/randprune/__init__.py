from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

import randprune.docs as docs
import randprune.routes as routes

from randprune.config import config


app = FastAPI(
    title="randprune",
    openapi_tags=docs.tags_metadata,
    description=docs.description,
)
app.include_router(routes.router)

origins: list[str] = []

if config.development:
    origins.append("http://localhost:5173")

app.add_middleware(
    CORSMiddleware,
    allow_origins=origins,
    allow_credentials=True,
    allow_methods=["GET", "POST"],
    allow_headers=["*"],
)
