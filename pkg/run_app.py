#!/usr/bin/env python3
import os
import sys

# Add project root to Python path
sys.path.insert(0, os.path.abspath(os.path.dirname(__file__)))

from evroad.cli import main

if __name__ == "__main__":
    sys.exit(main())
