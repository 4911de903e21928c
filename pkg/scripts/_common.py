"""Shared argument handling for the experiment scripts."""

import argparse
from pathlib import Path

from clothtrack.cli import write_report


def parser(description: str, out: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--out", type=Path, default=Path("results") / out, help="CSV report path")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--image-size", type=int, default=64)
    return p


def report(path: Path, rows) -> None:
    write_report(path, rows)
    print(f"wrote {path}")
