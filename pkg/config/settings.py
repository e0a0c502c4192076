# config/settings.py
import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


def _int_env(name: str, default: int) -> int:
    try:
        return max(1, int(os.getenv(name, default)))
    except (TypeError, ValueError):
        return default


class Config:
    """Base configuration class"""
    ENV = os.getenv('RD_ENV', 'development')

    # Parallelism: ceiling on worker threads, --threads may only lower it
    THREADS = _int_env('RD_THREADS', os.cpu_count() or 1)

    # Logging
    LOG_LEVEL = os.getenv('RD_LOG_LEVEL', 'INFO')
    LOG_FORMAT = os.getenv('RD_LOG_FORMAT', 'text').lower()

    # Numerics
    PRECISION = os.getenv('RD_PRECISION', 'float64').lower()

    # Outputs
    OUTPUT_DIR = os.getenv('RD_OUTPUT_DIR', 'output')

    @property
    def LOGGING_CONFIG(self):
        return {
            'level': self.LOG_LEVEL,
            'fmt': self.LOG_FORMAT
        }

    @property
    def RUNTIME(self):
        return {
            'threads': self.THREADS,
            'precision': self.PRECISION,
            'output_dir': self.OUTPUT_DIR
        }


class DevelopmentConfig(Config):
    """Interactive use: readable logs"""
    LOG_FORMAT = os.getenv('RD_LOG_FORMAT', 'text').lower()


class ProductionConfig(Config):
    """Batch runs: structured logs"""
    LOG_FORMAT = os.getenv('RD_LOG_FORMAT', 'json').lower()


# Configuration dictionary
config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'default': DevelopmentConfig
}


def get_config():
    """Get configuration based on environment"""
    env = os.getenv('RD_ENV', 'development')
    return config.get(env, config['default'])()
