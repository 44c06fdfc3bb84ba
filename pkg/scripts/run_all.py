"""Run every config in configs/ through the CLI and collect the artifacts in one directory."""
import argparse
import pathlib
import sys

from mobq.cli import run

ROOT = pathlib.Path(__file__).resolve().parent.parent
STUDY_OF = {"step": "integrate", "sphere": "converge", "matern_grid": "converge", "illumination": "illumination"}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(ROOT / "results"))
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--skip-multifidelity", action="store_true")
    args = ap.parse_args()
    status = 0
    for cfg in sorted((ROOT / "configs").glob("*.json")):
        study = STUDY_OF.get(cfg.stem, "multifidelity" if cfg.stem.startswith("mf_") else None)
        if study is None or (study == "multifidelity" and args.skip_multifidelity):
            continue
        out = pathlib.Path(args.out) / cfg.stem
        print(f"== {cfg.name} ({study})", flush=True)
        rc = run([study, "--config", str(cfg), "--out", str(out), "--threads", str(args.threads)])
        status = max(status, rc)
    return status


if __name__ == "__main__":
    sys.exit(main())
