from functools import lru_cache
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-wide defaults, overridable from .env or DCGMM_* variables"""

    # Project
    PROJECT_NAME: str = "DeepConvGMM"
    VERSION: str = "1.0.0"
    LOG_LEVEL: str = "INFO"
    OUTPUT_DIR: str = "runs"

    # cGMM numerics
    PRECISION_MIN: float = 1e-4
    PRECISION_MAX: float = 1e6
    INIT_CENTROID_RANGE: float = 0.01
    INIT_PRECISION: float = 1.0

    # Classifier inversion
    CLASSIFIER_LOG_FLOOR: float = 1e-3
    CLASSIFIER_POSITIVITY_EPS: float = 1e-6

    # SGD
    LR_CENTROIDS: float = 0.011
    LR_LOGITS: float = 0.011 * 0.1
    LR_PRECISIONS: float = 0.011 * 0.1
    LR_CLASSIFIER: float = 0.05
    BATCH_SIZE: int = 100
    EPOCHS: int = 10
    DELAY_FACTOR: float = 0.1

    # Sharpening
    SHARPEN_ITERATIONS: int = 300
    SHARPEN_STEP: float = 1.0

    # Optional dataset locations (acceptance runs only)
    MNIST_DIR: Optional[str] = None
    FASHION_DIR: Optional[str] = None

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="DCGMM_",
        case_sensitive=True,
        extra="ignore",
    )


@lru_cache()
def get_settings() -> Settings:
    return Settings()


settings = get_settings()
