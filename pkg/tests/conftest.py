import threading
import time

import pytest

from flowfabric.auth import TokenStore


@pytest.fixture
def tokens(tmp_path):
    store = TokenStore()
    store.add_principal("alice", "Alice", "human")
    store.add_principal("bob", "Bob", "human")
    store.add_principal("svc", "Fabric service", "service")
    return store


@pytest.fixture
def alice_token(tokens):
    return tokens.mint_token("alice", ["*"]).secret


@pytest.fixture
def bob_token(tokens):
    return tokens.mint_token("bob", ["*"]).secret


def wait_until(predicate, timeout=10.0, interval=0.01, message="condition"):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    raise AssertionError(f"timed out waiting for {message}")


@pytest.fixture
def waiter():
    return wait_until
