from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from dotenv import load_dotenv
from typing import List, Optional
import argparse
import logging
import os
import sys

# Load environment variables (HTTP server only)
load_dotenv()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# Configure logging
logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
logger = logging.getLogger(__name__)

from app.errors import SimulationError
from app.models.schemas import Subcommand
from app.routers import config_router, runs_router
from app.services.config_service import get_config_service
from app.services.run_service import EXIT_ERROR, get_run_service

# Create FastAPI app
app = FastAPI(
    title="heavytail-ruin",
    description="Importance sampling of first-passage ruin for heavy-tailed multivariate random walks",
    version="1.0.0"
)

# CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include routers
app.include_router(config_router)
app.include_router(runs_router)


@app.on_event("startup")
async def startup_event():
    logger.info("=" * 60)
    logger.info("heavytail-ruin service")
    logger.info("=" * 60)
    logger.info(f"Results directory: {os.getenv('RESULTS_DIR', 'results')}")


@app.get("/health")
async def health_check():
    """Health check endpoint."""
    return {"status": "healthy", "service": "heavytail-ruin", "subcommands": [s.value for s in Subcommand]}


# =====================
# COMMAND LINE
# =====================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="heavytail-ruin", description=app.description)
    commands = parser.add_subparsers(dest="command", required=True)

    for command in Subcommand:
        sub = commands.add_parser(command.value, help=f"run the {command.value} pipeline")
        sub.add_argument("--config", required=True, help="path to a JSON run config")
        sub.add_argument("--out", help="output directory (overrides sim.output_dir)")
        sub.add_argument("--seed", type=int, help="64-bit master seed (overrides sim.seed)")
        sub.add_argument("--workers", type=int, help="worker processes (overrides sim.workers)")
        sub.add_argument("--paths", type=int, help="number of paths (overrides sim.n_paths)")
        sub.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    serve = commands.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--host", default=os.getenv("HOST", "0.0.0.0"))
    serve.add_argument("--port", type=int, default=int(os.getenv("PORT", 8000)))
    serve.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, force=True)

    if args.command == "serve":
        import uvicorn
        uvicorn.run("main:app", host=args.host, port=args.port)
        return 0

    overrides = {"seed": args.seed, "workers": args.workers, "n_paths": args.paths, "output_dir": args.out}
    try:
        context = get_config_service().parse_config(args.config, overrides)
        outcome = get_run_service().run(Subcommand(args.command), context)
    except SimulationError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_ERROR
    return outcome.status


if __name__ == "__main__":
    sys.exit(main())
