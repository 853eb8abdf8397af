"""Print per-class size W1 (length, width, height) for each stage of an ablate-stages run."""
import json
import sys
from pathlib import Path


def main(run_dir):
    summary = json.loads((Path(run_dir) / "report.json").read_text())
    for stage, entry in summary.items():
        for ds, classes in entry["w1"].items():
            for cls, w in classes.items():
                cells = "degenerate" if w is None else " ".join(f"{v:.3f}" for v in w)
                print(f"{stage:>14} {ds:>8} {cls:>10}  {cells}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "runs/ablate")
