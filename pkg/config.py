import os
from typing import Optional
from dotenv import load_dotenv

load_dotenv()


def _int_env(name: str, default: Optional[int] = None) -> Optional[int]:
    raw = (os.getenv(name) or "").strip()
    if not raw:
        return default
    try:
        return int(raw, 0)
    except ValueError:
        raise ValueError(f"{name} must be an integer, got {raw!r}.")


PQ_SEED = _int_env("PQ_SEED")

PQ_THREADS = _int_env("PQ_THREADS", 1)
if PQ_THREADS is None or PQ_THREADS < 1:
    raise ValueError("PQ_THREADS must be >= 1.")

LOG_FILE_PATH = os.getenv("LOG_FILE_PATH") or os.path.join(os.path.dirname(os.path.abspath(__file__)), "log.txt")
LOG_TRUNCATE_ON_START = (os.getenv("LOG_TRUNCATE_ON_START", "1").strip() == "1")
