import os
from pathlib import Path
from typing import Optional

from dotenv import find_dotenv, load_dotenv

load_dotenv(find_dotenv(usecwd=True))

__all__ = [
    "RESULTS_PATH",
    "LOG_LEVEL",
    "NUM_CPU",
    "CDMS_SEED",
]


def _optional_int(name: str) -> Optional[int]:
    value = os.getenv(name)
    if value is None or value.strip() == "":
        return None
    return int(value)


RESULTS_PATH = Path(os.getenv("RESULTS_PATH", default="results"))
LOG_LEVEL = os.getenv("LOG_LEVEL", default="INFO")
NUM_CPU = os.cpu_count() or 1


def seed_override() -> Optional[int]:
    """Seed from the ``CDMS_SEED`` environment variable, read at call time."""
    return _optional_int("CDMS_SEED")


CDMS_SEED = seed_override()
