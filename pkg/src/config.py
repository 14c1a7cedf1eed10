# src/config.py
import os
from pathlib import Path
from dataclasses import dataclass
from dotenv import load_dotenv

load_dotenv()

class ConfigError(Exception):
    pass

def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw == '':
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {raw!r}")

@dataclass
class Config:
    ENV: str = os.getenv('ENVIRONMENT', 'development')

    # Paths
    BASE_DIR: Path = Path(__file__).parent.parent
    TEMPLATES_DIR: Path = BASE_DIR / "templates"
    EXPERIMENTS_CONFIG_PATH: Path = Path(
        os.getenv('MDPO_EXPERIMENTS_CONFIG', str(TEMPLATES_DIR / "experiments_config.yaml"))
    )
    LOGS_DIR: Path = Path(os.getenv('MDPO_LOG_DIR', str(BASE_DIR / "logs")))
    OUTPUT_DIR: Path = Path(os.getenv('MDPO_OUTPUT_DIR', str(BASE_DIR / "runs")))

    # Numerical defaults shared by every experiment
    VOCAB_SIZE: int = _env_int('MDPO_VOCAB_SIZE', 1016)
    SEED: int = _env_int('MDPO_SEED', 0)
    MC_TRIALS: int = _env_int('MDPO_MC_TRIALS', 100_000)

    DEBUG: bool = ENV == 'development'
    LOG_LEVEL: str = os.getenv('MDPO_LOG_LEVEL', 'INFO').upper()

    def __post_init__(self):
        self._setup_directories()
        self._validate_config()

    def _validate_config(self):
        """Validate the configuration"""
        if self.VOCAB_SIZE < 2:
            raise ConfigError(f"MDPO_VOCAB_SIZE must be at least 2, got {self.VOCAB_SIZE}")
        if self.MC_TRIALS < 1:
            raise ConfigError(f"MDPO_MC_TRIALS must be positive, got {self.MC_TRIALS}")
        if self.SEED < 0:
            raise ConfigError(f"MDPO_SEED must be non-negative, got {self.SEED}")
        if not self.EXPERIMENTS_CONFIG_PATH.exists():
            raise ConfigError(f"Experiments config not found: {self.EXPERIMENTS_CONFIG_PATH}")

    def _setup_directories(self):
        """Create necessary directories"""
        self.LOGS_DIR.mkdir(parents=True, exist_ok=True)

config = Config()
