"""Baseline vs ReCal grid over both learning rates; thin wrapper over `recalnet ablate`."""

import sys

from recalnet.cli import main

if __name__ == "__main__":
    args = sys.argv[1:] or ["--out", "runs/ablation"]
    sys.exit(main(["ablate", *args]))
