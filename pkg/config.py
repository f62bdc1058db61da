import os
from dotenv import load_dotenv  # Loads key=value pairs from a .env file into the process environment

# Load environment variables from .env file
# Run configs describe experiments; these settings describe the machine they run on
load_dotenv()

# Reproducibility
_seed = os.getenv('GFFM_SEED', '').strip()
GFFM_SEED = int(_seed) if _seed else None  # When set, overrides the run-config seed

# Outputs
GFFM_OUTPUT_DIR = os.getenv('GFFM_OUTPUT_DIR', 'runs')  # Used when --out is omitted
GFFM_WORKERS = int(os.getenv('GFFM_WORKERS', '1'))      # Worker pool size for grids and sweeps

# Results ledger (SQLAlchemy URL)
GFFM_RESULTS_DB = os.getenv('GFFM_RESULTS_DB', 'sqlite:///gffm_results.db')

# Logging Configuration
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
LOG_FILE = os.getenv('LOG_FILE', 'gffm.log')
