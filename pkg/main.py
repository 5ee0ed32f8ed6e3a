#!/usr/bin/env python3
"""
GC-FDM
Multi-block finite-difference residuals of the steady incompressible
Navier-Stokes equations as graph convolutions, with a graph network
trained against them and direct solvers that serve as references.
"""

import sys
from pathlib import Path

# Add the package directory to the Python path
sys.path.insert(0, str(Path(__file__).parent))

from gcfdm.cli import run

if __name__ == "__main__":
    run()
