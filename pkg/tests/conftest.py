import sys
from pathlib import Path

# Make the shared test helpers (path_oracle, fixture_utils) importable.
sys.path.insert(0, str(Path(__file__).parent))
