"""Exhaustively explore the contract scenarios and print state counts."""
import sys
import time

from pbackup.sim.modelcheck import SCENARIOS, explore

names = sys.argv[1:] or list(SCENARIOS)
for name in names:
    build, budget = SCENARIOS[name]
    t = time.monotonic()
    rep = explore(name, build(), budget)
    print(f"{name:24s} {budget} states={rep.states} leaves={rep.leaves} "
          f"violations={rep.violations[:3] or 'none'} {time.monotonic() - t:.1f}s", flush=True)
