#!/usr/bin/env python3
"""Standalone entrypoint for the steerdec package.

Lets ``./steerdec.py <command>`` work from a checkout without installing.
"""

from __future__ import annotations

import sys

from steerdec.cli import main


if __name__ == "__main__":
    sys.exit(main())
