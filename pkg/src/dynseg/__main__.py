"""Run the command-line interface with ``python -m dynseg``."""

import sys

from dynseg.cli import main

sys.exit(main())
