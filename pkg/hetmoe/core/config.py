"""
Configuration settings for hetmoe.
"""
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-level settings, read from HETMOE_* environment variables."""

    PROJECT_NAME: str = "hetmoe"
    VERSION: str = "0.1.0"

    # Data generation
    THREADS: int = 1  # prefetch queue depth, 0 = synchronous

    # Evaluation
    EVAL_CHUNK: int = 512

    # Gradient checking
    GRADCHECK_TOL: float = 1e-4
    GRADCHECK_STEP: float = 1e-6

    # Joint usage buffer
    BUFFER_MOMENTUM: float = 0.98
    BUFFER_FLOOR: float = 1e-8

    # Checkpoints
    CHECKPOINT_VERSION: int = 1

    # Logging
    LOG_LEVEL: str = "INFO"
    DEBUG: bool = False

    model_config = SettingsConfigDict(
        env_prefix="HETMOE_",
        env_file=".env",
        case_sensitive=True,
        extra="ignore",
    )


# Global settings instance
settings = Settings()
