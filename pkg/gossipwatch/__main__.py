"""
Main entry point for running the package as a module.

Usage:
    python -m gossipwatch simulate --scenario basic_50 --seed 7 --out sim/
"""

import sys
from .cli import main

if __name__ == '__main__':
    sys.exit(main())
