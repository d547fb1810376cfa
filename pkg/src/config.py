"""Environment-backed defaults for the command-line flags"""

import os

from dotenv import load_dotenv

load_dotenv()

__version__ = "1.0.0"

DEFAULT_SEED = int(os.getenv("INFLUENTIAL_SEED", "0"))
DEFAULT_JOBS = int(os.getenv("INFLUENTIAL_JOBS", "1"))
DEFAULT_OUT = os.getenv("INFLUENTIAL_OUT", "results")

# Horizon grid 2^7 .. 2^14
DEFAULT_HORIZONS = "128:16384:x2"
DEFAULT_SEEDS_PER_INSTANCE = 100
DEFAULT_MIN_EVENTS = 4096
DEFAULT_RATING_MAX = 5.0
