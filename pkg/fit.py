#!/usr/bin/env python3
"""
Entry point for learning a model from a long CSV

Run this script with a run config to fit (default), evaluate or compare.
"""

import sys

from rded.cli import COMMANDS, main

if __name__ == '__main__':
    args = sys.argv[1:]
    if not args or args[0] not in COMMANDS:
        args = ['fit', *args]
    sys.exit(main(args))
