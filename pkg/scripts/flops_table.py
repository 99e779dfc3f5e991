"""Static GFLOPs of the shipped architectures, plus the cost-only R(2+1)D-18 table.

Usage: python scripts/flops_table.py [--strict] [--out results/flops.csv]
"""

import argparse
import csv
import sys
from pathlib import Path

from vared.models import get_spec, gate_flops_total, model_flops

PUBLISHED = {8: 27.7, 16: 55.2, 32: 110.5}  # reference values the cost spec is checked against


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--strict", action="store_true", help="count a multiply-add as two FLOPs")
    ap.add_argument("--out", type=Path)
    args = ap.parse_args(argv)
    rows = []
    for frames in (8, 16, 32):
        spec = get_spec("r2plus1d18", frames=frames, res=128)
        g = model_flops(spec, strict=args.strict) / 1e9
        ref = PUBLISHED[frames] * (2 if args.strict else 1)
        rows.append({"arch": "r2plus1d18", "frames": frames, "res": 128, "gflops": f"{g:.4f}",
                     "gate_gflops": f"{gate_flops_total(spec) / 1e9:.6f}", "reference": ref,
                     "rel_diff": f"{(g - ref) / ref:+.2%}"})
    for arch in ("toy3d", "r2plus1d_tiny"):
        spec = get_spec(arch)
        rows.append({"arch": arch, "frames": spec.input[1], "res": spec.input[2],
                     "gflops": f"{model_flops(spec, strict=args.strict) / 1e9:.6f}",
                     "gate_gflops": f"{gate_flops_total(spec) / 1e9:.6f}", "reference": "", "rel_diff": ""})
    fh = args.out.open("w", newline="") if args.out else sys.stdout
    w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.out:
        fh.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
