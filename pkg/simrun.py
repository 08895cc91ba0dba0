"""
Launcher for the rrsim experiment runner.

Usage:
  python simrun.py run --scheme baseline,oo_vr
  python simrun.py sweep-bw --link-gbps 32,64,128,1024
"""

import sys

from rrsim.cli import main

if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n[simrun] Stopped.")
        sys.exit(130)
