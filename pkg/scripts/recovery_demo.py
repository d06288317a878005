"""Pull a uniform model map onto a synthetic 3-fixation gaze map with the gaze loss.

    python scripts/recovery_demo.py --size 32 --steps 500 --out /tmp/recovery
"""

import argparse
import time
from pathlib import Path

from gaze_align import demo
from gaze_align.saliency import save_atnm, save_pgm16


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--lr", type=float, default=2.0)
    ap.add_argument("--out", type=Path, help="directory for ATNM/PGM outputs")
    args = ap.parse_args()

    start = time.perf_counter()
    res = demo.run(size=args.size, steps=args.steps, lr=args.lr)
    elapsed = time.perf_counter() - start
    h = res.history
    for step in sorted({0, len(h) // 4, len(h) // 2, len(h) - 1}):
        print(f"step {step:4d}  loss {h[step]:.6f}")
    print(f"JSD {res.jsd_bits:.4f} bits  CoM distance {res.com_distance_px:.3f} px  "
          f"{elapsed:.2f} s")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        for name, amap in (("model", res.model), ("gaze", res.gaze)):
            save_atnm(args.out / f"{name}.atnm", amap)
            save_pgm16(args.out / f"{name}.pgm", amap)
        print(f"maps written to {args.out}")


if __name__ == "__main__":
    main()
