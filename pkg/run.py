#!/usr/bin/env python3
"""
Run the hetmoe command line.
"""
from hetmoe.cli.commands import main

if __name__ == "__main__":
    raise SystemExit(main())
