"""Print the class-balancing plan for FER2013 and RAF-DB under every augmentation scheme.

    python3 scripts/table2_plan.py [--json out.json]
"""

from __future__ import annotations

import argparse
import json

from resemote.augment import AugmentationScheme, compute_plan
from resemote.data import EmotionClass

ORIGINAL = {  # training-split class counts, keyed by class name
    "FER2013": {"Angry": 3995, "Disgust": 436, "Fear": 4097, "Happy": 7215, "Neutral": 4965, "Sad": 4830, "Surprise": 3171},
    "RAF-DB": {"Angry": 705, "Disgust": 717, "Fear": 281, "Happy": 4772, "Neutral": 2524, "Sad": 1982, "Surprise": 1290},
}
SCHEMES = ("aug1", "aug2", "aug3", "aug4")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--json", help="also write every plan to this file")
    args = ap.parse_args()

    plans = {}
    for dataset, by_name in ORIGINAL.items():
        histogram = [by_name[c.title] for c in EmotionClass]
        plans[dataset] = {s: compute_plan(histogram, AugmentationScheme.parse(s), dataset) for s in SCHEMES}

    header = f"{'class':<10}" + "".join(f"{d[:3] + ' ' + col:>14}" for d in ORIGINAL for col in ("orig",) + SCHEMES)
    print(header)
    for c in EmotionClass:
        row = f"{c.title:<10}"
        for dataset in ORIGINAL:
            row += f"{ORIGINAL[dataset][c.title]:>14}"
            row += "".join(f"{plans[dataset][s].targets[c]:>14}" for s in SCHEMES)
        print(row)
    print()
    for dataset in ORIGINAL:
        for s in SCHEMES:
            print(f"{dataset:<8} {s}: {sum(plans[dataset][s].deficits):>6} synthetic images to generate")

    if args.json:
        out = {d: {s: p.to_dict() for s, p in by_scheme.items()} for d, by_scheme in plans.items()}
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(out, fh, indent=2)


if __name__ == "__main__":
    main()
