import hashlib

import pytest

from pbackup.model import PeerId, derive_peer_id


def key(n: int) -> bytes:
    return f"test-key-{n}".encode()


def pid(n: int) -> PeerId:
    return derive_peer_id(key(n))


def raw_pid(b: int) -> PeerId:
    """Peer id with a chosen first byte, for ring-order tests."""
    return PeerId(bytes([b]) + hashlib.sha256(bytes([b])).digest()[:31])


@pytest.fixture
def peers():
    return [pid(i) for i in range(8)]


ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def verdict(request):
    """Record one acceptance line; the test still asserts on its own."""
    name = request.node.name.split("_")[1].upper()

    def record(ok: bool, detail: str):
        ACCEPTANCE[name] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda n: int(n[2:])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")
