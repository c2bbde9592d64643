"""Run the strategy comparison (teacher once, three student modes per seed).

    python3 scripts/run_ablation.py --config configs/desk.cfg --seeds 0,1,2,3,4
"""
import sys

from retro.cli import main

if __name__ == "__main__":
    sys.exit(main(["ablation", *sys.argv[1:]]))
