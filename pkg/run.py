#!/usr/bin/env python3
"""
graphalign - Few-shot object alignment with graph energy models

This is the main entry point for the application.
"""

import sys
from src.graphalign.cli import main

if __name__ == '__main__':
    sys.exit(main())
