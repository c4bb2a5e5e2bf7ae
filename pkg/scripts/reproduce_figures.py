"""Write the three figure tables (policy, mean-field map, trajectories) for the
four reference graphons, for both the finite and the infinite horizon.

    python scripts/reproduce_figures.py --out results/figures
"""

import argparse
import sys
from pathlib import Path

from gmfg.cli import main as gmfg

ROOT = Path(__file__).resolve().parents[1]


def run(out):
    codes = []
    for name in ("malware_finite", "malware_infinite"):
        cfg = ROOT / "configs" / f"{name}.yaml"
        codes.append(gmfg(["figures", "--config", str(cfg), "--out", str(Path(out) / name)]))
    return max(codes)


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results/figures")
    sys.exit(run(p.parse_args().out))
