"""Regenerate the bundled sample extract (raw CSV schema, short synthetic lives).

Cells carry the ids used by cases A and B plus ten batch-2 cells for case C.
"""
import shutil
import sys
from pathlib import Path

from battpinn import synth
from battpinn.data import SAMPLE_DIR

BATCH3 = ["91", "100", "101", "108", "116", "120", "124"]
BATCH2 = [str(i) for i in range(42, 52)]


def main(out=SAMPLE_DIR):
    out = Path(out)
    if out.exists():
        shutil.rmtree(out)
    synth.write_raw_dataset(out, BATCH2 + BATCH3, [2] * len(BATCH2) + [3] * len(BATCH3),
                            heterogeneity=0.25, seed=2024, n_points=60)
    print(f"sample extract written to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:])
