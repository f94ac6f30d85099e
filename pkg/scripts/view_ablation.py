"""Held-out PSNR as a function of the number of training views (dynamic phantom)."""

import argparse
import json
from pathlib import Path

from attenvox.experiments import desk_config, run_desk
from attenvox.phantom import default_phantom


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--views", type=int, nargs="+", default=[10, 20, 30])
    ap.add_argument("--iters", type=int, default=3000)
    ap.add_argument("--dims", type=int, default=64)
    ap.add_argument("--out", default="runs/views")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    field = default_phantom()
    rows = []
    for n in args.views:
        run = run_desk(field, n, desk_config(args.iters, args.dims, 4))
        rows.append({"views": n, "psnr_2d_heldout": run.heldout_psnr, "seconds": run.result.seconds})
        print(f"{n:3d} views: {run.heldout_psnr:.2f} dB")
    (out / "summary.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
