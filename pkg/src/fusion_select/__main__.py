"""
Entry point for running the module with python -m fusion_select
"""

import sys

from fusion_select.cli import main

if __name__ == "__main__":
    sys.exit(main())
