from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
import uvicorn
import logging

from evroad import __version__
from evroad.core.config import get_config
from evroad.core.errors import ConfigError, EvroadError, UsageError
from evroad.core.logger import setup_logging
from evroad.routers import api
from evroad.services.predictor import ModelNotLoadedError, get_predictor

# Set up logging
setup_logging()
logger = logging.getLogger(__name__)

# Create FastAPI app
app = FastAPI(
    title="Event Road Segmentation API",
    description="Window classification with a probabilistic-attention event transformer",
    version=__version__
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include routers
app.include_router(api.router, prefix="/api", tags=["api"])

# Eager checkpoint load
@app.on_event("startup")
async def startup_event():
    """Load the configured checkpoint if there is one"""
    predictor = get_predictor()
    if predictor.checkpoint_path and not predictor.is_loaded:
        try:
            predictor.reload(predictor.checkpoint_path)
        except EvroadError as e:
            logger.error(f"Could not load checkpoint {predictor.checkpoint_path}: {e}")


def _status_for(exc: EvroadError) -> int:
    if isinstance(exc, ModelNotLoadedError):
        return 503
    if isinstance(exc, (ConfigError, UsageError)):
        return 400
    return 422


@app.exception_handler(EvroadError)
async def evroad_exception_handler(request: Request, exc: EvroadError):
    status = _status_for(exc)
    logger.warning(f"{request.url.path} rejected ({status}): {exc}")
    return JSONResponse(
        status_code=status,
        content={"detail": type(exc).__name__, "message": str(exc)}
    )

# Global exception handler
@app.exception_handler(Exception)
async def global_exception_handler(request: Request, exc: Exception):
    logger.exception(f"Unhandled exception: {str(exc)}")
    return JSONResponse(
        status_code=500,
        content={"detail": "Internal server error", "message": str(exc)}
    )

@app.get("/", tags=["root"])
async def root():
    """Root endpoint - API is running"""
    return {"status": "API running", "message": "Event road segmentation service"}

@app.get("/health", tags=["health"])
async def health_check():
    """Health check endpoint"""
    return {"status": "healthy"}

@app.get("/api/health", tags=["health"])
async def api_health_check():
    """API health check endpoint"""
    return {
        "status": "healthy",
        "api_ready": True,
        "version": __version__
    }

def start_server(host: str = None, port: int = None, checkpoint: str = None):
    """Start the FastAPI server"""
    server = get_config().server
    host = host or server.host
    port = port or server.port
    if checkpoint:
        get_predictor().reload(checkpoint)

    logger.info(f"Starting event road segmentation API on {host}:{port}")
    uvicorn.run(app, host=host, port=port)

if __name__ == "__main__":
    start_server()
