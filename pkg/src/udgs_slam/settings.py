import os
from pathlib import Path

from dotenv import load_dotenv

# Load environment variables from the repository .env file, if any
dotenv_path = Path(__file__).resolve().parent.parent.parent / '.env'
load_dotenv(dotenv_path=dotenv_path)


def get_thread_count() -> int:
    """
    Number of worker threads the rasterizer may use for tiles.
    Read on every call so tests and the CLI can override UDGS_THREADS at runtime.
    """
    raw = os.getenv("UDGS_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError:
        raise EnvironmentError(f"UDGS_THREADS must be an integer, got {raw!r}")
    return max(1, threads)


def get_log_level() -> str:
    return os.getenv("UDGS_LOG_LEVEL", "INFO").upper()
