"""Entry point script for the dpn-building command line."""

import os
import sys
from pathlib import Path

from dpn_building.cli import main

# Artifact directory used when --out is not given
default_out = Path(os.environ.get("DPN_OUT", "artifacts"))

# Log level; --verbose switches to DEBUG
log_level = os.environ.get("DPN_LOG_LEVEL", "INFO")

if __name__ == "__main__":
    sys.exit(main(sys.argv[1:], default_out=default_out, log_level=log_level))
