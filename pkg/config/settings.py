import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Worker Network
# --------------
# Address a `worker` process binds its inbox to (zmq endpoint syntax)
WORKER_BIND = os.getenv("DCSMC_BIND", "tcp://127.0.0.1:5570")

# Address the driver binds for replies; '*' lets zmq pick a free port
DRIVER_BIND = os.getenv("DCSMC_DRIVER_BIND", "tcp://127.0.0.1:*")

# Receive timeout for the socket transport, in milliseconds
WORKER_TIMEOUT_MS = int(os.getenv("DCSMC_WORKER_TIMEOUT_MS", 600_000))

# Logging
# -------
# An empty DCSMC_LOG_DIR disables the rotating file sink
LOG_DIR = os.getenv("DCSMC_LOG_DIR", "logs")
LOG_LEVEL = os.getenv("DCSMC_LOG_LEVEL", "INFO")

# Engine Limits
# -------------
# Maximum number of N^C support points a mixture merge may enumerate
MIXTURE_BUDGET = int(os.getenv("DCSMC_MIXTURE_BUDGET", 10_000_000))

# Number of support points used when adapting alpha-star on large merges
ALPHA_STAR_SUPPORT = int(os.getenv("DCSMC_ALPHA_STAR_SUPPORT", 1 << 20))

# Rows evaluated at once when streaming a pairwise mixture table
MIXTURE_CHUNK_ENTRIES = int(os.getenv("DCSMC_MIXTURE_CHUNK_ENTRIES", 1 << 22))

# Concurrent replicates in run_experiment
N_JOBS = int(os.getenv("DCSMC_N_JOBS", 1))

# Algorithm Defaults
# ------------------
DEFAULT_CESS_THRESHOLD = 0.995
DEFAULT_ALPHA_STAR_CESS = 0.95
DEFAULT_RESAMPLE_ESS_FRACTION = 0.5
DEFAULT_RESAMPLING_SCHEME = "multinomial"
DEFAULT_MCMC_SWEEPS = 1

# Bisection tolerances for the tempering schedule
ALPHA_STAR_TOLERANCE = 1e-3
ALPHA_STEP_FLOOR = 1e-4

# Continuous-site kernels and initializers
DEFAULT_RW_STEP_SD = 0.132
GSM_GRID_POINTS = 4096

if MIXTURE_BUDGET < 1:
    print("⚠️ Warning: DCSMC_MIXTURE_BUDGET must be positive; mixture merges will be refused.")
