import dataclasses
from unittest import mock

import pytest

from pbackup.contracts import ContractEngine
from pbackup.protocol import DropData
from pbackup.sim import modelcheck as mc


@pytest.mark.parametrize("name, budget", [
    ("swap", mc.Budget(drops=1, crashes=1, ticks=2)),
    ("async_revoke", mc.Budget(drops=1, crashes=1, ticks=2)),
    ("double_swap", mc.Budget(drops=0, crashes=0, ticks=1)),
])
def test_small_budgets_are_clean(name, budget):
    build, _ = mc.SCENARIOS[name]
    rep = mc.explore(name, build(), budget)
    assert rep.violations == []
    assert rep.leaves > 0


def test_clone_is_independent():
    w = mc.scenario_swap()
    c = w.clone()
    assert c.key() == w.key()
    c.now += 1
    c.net.pop() if c.net else c.disks[next(iter(c.disks))].clear()
    assert c.key() != w.key()


_orig_revoke = ContractEngine.on_revoke
_orig_commit = ContractEngine.commit_due_contracts


def _eager_revoke(self, owner, chunk, reply=True):
    # bug: drop the bytes as soon as a revoke arrives
    effects = _orig_revoke(self, owner, chunk, reply)
    if self.replicas.get(chunk) is not None:
        self.replicas.remove(chunk)
    return effects + [DropData(chunk)]


def _ungated(self, now, ctx):
    # bug: ignore the commit period
    cfg = self.cfg
    self.cfg = dataclasses.replace(cfg, commit_period=0.0)
    try:
        return _orig_commit(self, now, ctx)
    finally:
        self.cfg = cfg


def _no_repair(self, digest, malformed=0):
    return [], []


@pytest.mark.parametrize("method, bug, expect", [
    ("on_revoke", _eager_revoke, "last replicated copy deleted"),
    ("commit_due_contracts", _ungated, "two migrations within one commit period"),
    ("repair_exchange", _no_repair, "disagreement"),
])
def test_injected_bugs_are_caught(method, bug, expect):
    with mock.patch.object(ContractEngine, method, bug):
        rep = mc.explore("swap", mc.scenario_swap(), mc.Budget(drops=1, crashes=0, ticks=2), max_states=5000)
    assert any(expect in v for v in rep.violations)


def test_state_budget_is_reported():
    rep = mc.explore("swap", mc.scenario_swap(), mc.Budget(drops=1, crashes=1, ticks=2), max_states=10)
    assert "state budget exhausted" in rep.violations
