"""Helpers shared by the experiment scripts."""
from __future__ import annotations

import argparse
import logging
from pathlib import Path

from pcperm.harness import PipelineConfig, generate_dataset

DESK_CONFIG = Path(__file__).with_name("desk.json")


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", default=str(DESK_CONFIG), help="pipeline config (JSON)")
    p.add_argument("--out", default="runs/desk", help="working directory; the dataset lives in OUT/data")
    p.add_argument("--threads", type=int, default=1, help="generation worker processes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def prepare(args) -> tuple[PipelineConfig, Path]:
    """Load the config and make sure the dataset exists (generation is resumable)."""
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    config = PipelineConfig.load(args.config)
    data = Path(args.out) / "data"
    generate_dataset(config, data, workers=args.threads)
    return config, data
