#!/usr/bin/env python3
"""
Run a longicause command from a source checkout.

Usage:
    python scripts/longicause.py generate --config configs/desk.json --seeds 1,2
    python scripts/longicause.py ablate --config configs/desk.json --seeds 1,2,3,4,5
"""
import sys
from pathlib import Path

# Add parent directory to path to import longicause
sys.path.insert(0, str(Path(__file__).parent.parent))

from longicause.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
