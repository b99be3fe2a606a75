import os
import logging
from dotenv import load_dotenv

# Load environment variables (LRBM_THREADS, LRBM_LOG_LEVEL)
load_dotenv()

# --- Logging ---
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
LOG_LEVEL = getattr(logging, os.getenv("LRBM_LOG_LEVEL", "INFO").upper(), logging.INFO)

# --- Parallelism ---
THREADS_ENV_VAR = "LRBM_THREADS"
DEFAULT_THREADS = min(4, os.cpu_count() or 1)

# --- Training Parameters (Defaults) ---
DEFAULT_EPOCHS = 250
DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_CD_STEPS = 1
DEFAULT_MF_SWEEPS = 10
DEFAULT_MOMENTUM = 0.5
DEFAULT_WEIGHT_DECAY = 1e-4
DEFAULT_MINIBATCH = 16
DEFAULT_CANDIDATES = 10
DEFAULT_STABILITY_MARGIN = 0.05
DEFAULT_N_HIDDEN = 80
DEFAULT_SEED = 0
INIT_WEIGHT_STD = 0.01
LOG_EVERY_EPOCHS = 50

# Validation split: candidate selection, c_ij and alpha all use it
DEFAULT_VAL_FRACTION = 0.2

# --- Classification ---
ALPHA_GRID_MIN = 0.01
ALPHA_GRID_MAX = 100.0
ALPHA_GRID_SIZE = 30
SCORING_MODES = ["soft", "vote"]
DEFAULT_SCORING = "soft"

# --- Preprocessing ---
DEFAULT_SMOOTH_WINDOW = 3
NORM_STD_FLOOR = 1e-6
MAX_CORRUPTION_FRACTION = 0.5
BONE_EPS = 1e-12

# --- Exact oracle limits ---
ORACLE_MAX_N_H = 12
ORACLE_MAX_D = 4
ORACLE_MAX_N_T = 4

# --- File formats ---
DATASET_FORMAT = "lrbm-dataset"
DATASET_VERSION = 1
BUNDLE_FORMAT = "lrbm-bundle"
BUNDLE_VERSION = 1
MODELS_FORMAT = "lrbm-models"

# --- Exit codes ---
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
