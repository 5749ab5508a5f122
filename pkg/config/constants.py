"""Constants for the DC-SMC engine"""

import numpy as np

# App Metadata
APP_NAME = "dcsmc"
APP_TAGLINE = "Divide-and-Conquer Sequential Monte Carlo"

# Method Roster
# D&C variants first, then the baselines
DC_METHODS = ("dc-sir", "dc-mix", "dc-ann", "dc-mix-ann")
BASELINE_METHODS = ("std-smc", "postorder", "mh", "gibbs")
METHODS = DC_METHODS + BASELINE_METHODS

# Which methods make sense for which model family
LATTICE_METHODS = DC_METHODS + ("std-smc", "mh")
HIERARCHICAL_METHODS = ("dc-sir", "postorder", "gibbs")

RESAMPLING_SCHEMES = ("multinomial", "residual", "systematic")
LATTICE_SCHEMES = ("bisection", "quadrants", "binary-with-dummies")

# Where the tree is split between workers
CUT_RULES = ("shallowest", "deepest")

# Model Tags
# Wire code and state dtype per registered model family
MODEL_TAGS = {
    "ising": (1, np.dtype("<i1")),
    "gsm": (2, np.dtype("<f8")),
    "hier": (3, np.dtype("<f8")),
}

# Seed Stages
# Disambiguate random draws made at the same tree node
STAGE_PROPOSE = 0
STAGE_CHILD_RESAMPLE = 1
STAGE_MIXTURE = 2
STAGE_ALPHA_STAR = 3
STAGE_ANNEAL_RESAMPLE = 4
STAGE_ANNEAL_MOVE = 5
STAGE_CHAIN = 6
STAGE_REINSTANTIATE = 7

# Hierarchical Dataset
DATASET_COLUMNS = ("county", "district", "school", "year", "trials", "successes")
EXCLUDED_DISTRICTS = ("75",)
EXCLUDED_YEARS = (2010, 2011)

# Wire Format
ENVELOPE_MAGIC = b"DCSMCPOP"
ENVELOPE_VERSION = 2
ENVELOPE_NODE_ID_BYTES = 96
ENVELOPE_MAX_LINEAGE_DEPTH = 48

# Message kinds exchanged by workers and the driver
MSG_TASK = b"task"
MSG_POPULATION = b"population"
MSG_DONE = b"done"
MSG_ERROR = b"error"
MSG_PING = b"ping"
MSG_PONG = b"pong"
MSG_STOP = b"stop"

# Output
RESULTS_CSV = "results.csv"
SUMMARY_JSON = "summary.json"

# User-facing messages
MESSAGES = {
    "RUN_STARTED": "▶️ Running {replicates} replicate(s) of {method} on {model}",
    "RUN_FINISHED": "✅ Wrote {rows} row(s) to {path}",
    "REPLICATE_FAILED": "❌ Replicate {replicate} failed: {error}",
    "WORKER_READY": "🛰️ Worker listening on {address}",
    "NO_ROSTER": "⚠️ No workers configured; running serially.",
}
