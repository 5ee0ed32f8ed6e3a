import os
from typing import Optional, Tuple

from dotenv import load_dotenv
from pydantic_settings import BaseSettings

# Load environment variables
load_dotenv()


class Settings(BaseSettings):
    """Application settings"""

    # Runtime
    GCFDM_THREADS: Optional[int] = None  # fallback for --threads
    GCFDM_LOG_LEVEL: str = os.getenv("GCFDM_LOG_LEVEL", "INFO")
    GCFDM_LOG_FILE: Optional[str] = None
    GCFDM_OUTPUT_DIR: str = "runs"

    # Numerics
    INTERFACE_TOLERANCE: float = 1e-12  # shared interface nodes must coincide
    LAYERNORM_EPS: float = 1e-5
    LOSS_WEIGHTS: Tuple[float, float, float, float] = (10.0, 1.0, 1.0, 1e-3)

    # Storage
    WRITE_RETRIES: int = 3

    class Config:
        env_file = ".env"


def resolve_threads(requested: Optional[int] = None) -> int:
    """Worker cap: explicit flag, then GCFDM_THREADS, then available cores"""
    if requested is not None and requested > 0:
        return requested
    if settings.GCFDM_THREADS:
        return max(1, settings.GCFDM_THREADS)
    return os.cpu_count() or 1


# Global settings instance
settings = Settings()
