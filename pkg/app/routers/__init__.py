# Routers package
from .config import router as config_router
from .runs import router as runs_router
