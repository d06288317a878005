"""Write a synthetic corpus and run every CLI stage over it.

    python scripts/smoke_pipeline.py /tmp/gaze-smoke --studies 5
"""

import argparse
import json
import sys
import time
from collections import Counter
from pathlib import Path

from gaze_align import synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("workdir", type=Path)
    ap.add_argument("--studies", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    start = time.perf_counter()
    manifest = synthetic.make_corpus(args.workdir, args.studies, args.seed)
    run = synthetic.run_smoke(manifest)
    elapsed = time.perf_counter() - start

    counts = Counter((s.stage, s.exit_code) for s in run.stages)
    for (stage, code), n in sorted(counts.items()):
        print(f"{stage:18s} exit {code}  x{n}")
    batch = json.loads((args.workdir / "metrics_batch.json").read_text())["summary"]
    print(f"pearson r {batch['pearson_r']['mean']:.3f} +/- {batch['pearson_r']['std']:.3f}, "
          f"JSD {batch['jsd_bits']['mean']:.3f} +/- {batch['jsd_bits']['std']:.3f}")
    print(f"{len(run.stages)} stage runs in {elapsed:.2f} s; manifest {manifest}")
    sys.exit(0 if run.ok else 1)


if __name__ == "__main__":
    main()
