"""Randomized delivery schedules for the synchro-peer messenger."""
import argparse

from pbackup.sim.msgcheck import run_schedule

ap = argparse.ArgumentParser()
ap.add_argument("-n", type=int, default=100_000)
ap.add_argument("--start", type=int, default=0)
args = ap.parse_args()
sent = dup = 0
for seed in range(args.start, args.start + args.n):
    st = run_schedule(seed)
    sent += st.sent
    dup += st.duplicates_injected
print(f"{args.n} schedules clean: {sent} messages, {dup} injected duplicates")
