#!/usr/bin/env python3
"""
HATK entry point

Run: python hatk.py <command> [options]   (python hatk.py --help)
"""
import sys
from pathlib import Path

# Add project root to path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

if __name__ == "__main__":
    from app.cli import main

    try:
        sys.exit(main())
    except KeyboardInterrupt:
        sys.exit(130)
