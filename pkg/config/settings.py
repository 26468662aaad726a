from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field
from typing import Optional
from pathlib import Path

# Load .env from project root
from dotenv import load_dotenv
env_path = Path(__file__).parent.parent / '.env'
load_dotenv(dotenv_path=env_path)

PROJECT_ROOT = Path(__file__).parent.parent


class Settings(BaseSettings):
    """Configuration management using Pydantic"""

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=False, populate_by_name=True, extra="ignore")

    # API Keys (referenced by resource descriptors through `auth`)
    openai_api_key: Optional[str] = Field(default=None, alias="OPENAI_API_KEY")
    groq_api_key: Optional[str] = Field(default=None, alias="GROQ_API_KEY")

    # Paths
    resources_path: Optional[str] = Field(default=None, alias="HAWK_RESOURCES")
    store_root: str = Field(default=".hawk/store", alias="HAWK_STORE")
    templates_dir: str = Field(default=str(PROJECT_ROOT / "data" / "templates"), alias="HAWK_TEMPLATES")
    registry_path: str = Field(default=".hawk/registry.json", alias="HAWK_REGISTRY")

    # Logging
    log_level: str = Field(default="INFO", alias="LOG_LEVEL")
    log_file: Optional[str] = Field(default=None, alias="LOG_FILE")

    # Workflow engine
    default_concurrency_cap: int = Field(default=5, ge=1, alias="DEFAULT_CONCURRENCY_CAP")
    optimizer_failure_high: float = Field(default=0.2, alias="OPTIMIZER_FAILURE_HIGH")
    optimizer_failure_low: float = Field(default=0.05, alias="OPTIMIZER_FAILURE_LOW")
    optimizer_window: int = Field(default=20, ge=1, alias="OPTIMIZER_WINDOW")
    optimizer_backoff_cap: float = Field(default=8.0, gt=0, alias="OPTIMIZER_BACKOFF_CAP")

    # Resources
    default_timeout: float = Field(default=30.0, gt=0, alias="DEFAULT_TIMEOUT")
    default_max_retries: int = Field(default=2, ge=0, alias="DEFAULT_MAX_RETRIES")
    yes_no_samples: int = Field(default=4, ge=1, alias="YES_NO_SAMPLES")

    # Agent registry
    health_check_interval: float = Field(default=30.0, gt=0, alias="HEALTH_CHECK_INTERVAL")
    health_check_timeout: float = Field(default=2.0, gt=0, alias="HEALTH_CHECK_TIMEOUT")

    # CreAgentive
    memory_window: int = Field(default=10, ge=1, alias="MEMORY_WINDOW")
    max_chapters: int = Field(default=50, ge=1, alias="MAX_CHAPTERS")
    writer_max_retries: int = Field(default=2, ge=0, alias="WRITER_MAX_RETRIES")
    goal_retry_budget: int = Field(default=1, ge=0, alias="GOAL_RETRY_BUDGET")
    n_candidates: int = Field(default=3, ge=1, alias="N_CANDIDATES")

    # DNF decision layer
    dnf_alpha_init: float = Field(default=5.0, gt=0, alias="DNF_ALPHA_INIT")


settings = Settings()
