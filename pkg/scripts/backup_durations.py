"""Time to k-th replica on always-on and lab traces against the pipeline bound."""
import argparse
from pathlib import Path

from pbackup.sim.checks import pipeline_bound
from pbackup.sim.experiments import load_spec, report_backup_durations, run

SPECS = Path(__file__).resolve().parent.parent / "specs"
DAY = 86400.0


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--skip-days", type=float, default=2.0, help="days after warmup excluded as transient")
    args = ap.parse_args()
    means = {}
    for name in ("backup_always_on", "backup_lab"):
        spec = load_spec(SPECS / f"{name}.spec")
        dur = report_backup_durations(run(spec), from_time=spec.warmup + args.skip_days * DAY)
        means[name] = {k: d["mean"] for k, d in dur.items()}
        print(name, {k: (d["count"], round(d["mean"])) for k, d in dur.items()}, flush=True)
    spec = load_spec(SPECS / "backup_always_on.spec")
    for k in (1, 2, 3):
        bound = pipeline_bound(spec.data.chunks_per_node[0], spec.data.chunk_size, spec.data.bandwidth[0],
                               spec.policy.N_r, k)
        ratio = means["backup_lab"][k] / means["backup_always_on"][k]
        print(f"replica {k}: bound {bound:.0f}s  always-on {means['backup_always_on'][k]:.0f}s  lab/always {ratio:.2f}")


if __name__ == "__main__":
    main()
