#!/usr/bin/env python3
"""Train the two float baselines every experiment config points at.

Writes models/lenet5_mnist.axm (2 epochs, full MNIST) and
models/alexnet_mini_mnist.axm (2 epochs, first 20k images). Training is
deterministic, so re-running reproduces the same files byte for byte.
"""

import sys
from pathlib import Path

from axdnn.cli import main

REPO = Path(__file__).resolve().parent.parent

CONFIGS = [
    REPO / "configs" / "lenet5_mnist_grid.toml",
    REPO / "configs" / "alexnet_mini_mnist.toml",
]

if __name__ == "__main__":
    for config in CONFIGS:
        print(f"== training baseline from {config.name}")
        code = main(["train", "--config", str(config)])
        if code != 0:
            sys.exit(code)
