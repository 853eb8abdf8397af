"""Generate one frame from a preset and print its boxes, point count and range-mask corners."""
import argparse

from promptdet.prompts import compute_range_mask
from promptdet.synthdata import CLASS_NAMES, GLOBAL_RANGE, generate_frame, preset_specs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("preset", choices=sorted(preset_specs()))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    spec = preset_specs()[args.preset]
    f = generate_frame(spec, args.seed)
    print(f"{spec.name}: {len(f.points)} points, {len(f.boxes)} boxes")
    for b in f.boxes:
        print(f"  {CLASS_NAMES[b.class_id]:>10}  center {tuple(round(v, 2) for v in b.center)}"
              f"  size {tuple(round(v, 2) for v in b.size)}")
    print("range-mask corners on 188x188:", compute_range_mask(spec, GLOBAL_RANGE, 188, 188).corners)


if __name__ == "__main__":
    main()
