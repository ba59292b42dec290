#!/usr/bin/env python3
"""
Entry point for generating synthetic panels

Run this script with a simulation config to write data.csv and truth.json.
"""

import sys

from rded.cli import main

if __name__ == '__main__':
    sys.exit(main(['simulate', *sys.argv[1:]]))
