"""Run every bundled spec and write its reports under results/<name>/."""
import argparse
import time
from pathlib import Path

from pbackup.sim.experiments import load_spec, run, write_reports

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("names", nargs="*", help="spec names without extension (default: all)")
    ap.add_argument("--out", default=str(ROOT / "results"))
    args = ap.parse_args()
    paths = [ROOT / "specs" / f"{n}.spec" for n in args.names] or sorted((ROOT / "specs").glob("*.spec"))
    for path in paths:
        t = time.monotonic()
        spec = load_spec(path)
        write_reports(run(spec), Path(args.out) / spec.name, spec)
        print(f"{spec.name}: {time.monotonic() - t:.0f}s", flush=True)


if __name__ == "__main__":
    main()
