import numpy as np
import pytest

from lbsf.data import PaymentBehavior, UserRecord
from lbsf.encoding import AmountStats
from lbsf.model import LbsfModel, ModelConfig

DAY = 86400
T0 = 1_700_000_000


def behavior(merchant, ts, amount=10.0, description="payment"):
    return PaymentBehavior(merchant, description, int(ts), float(amount))


def record(user_id, items, label=None):
    """``items`` is a list of (merchant, ts) or (merchant, ts, amount) tuples."""
    bs = [behavior(*it) for it in items]
    bs.sort(key=lambda b: b.timestamp)
    return UserRecord(user_id, tuple(bs), label)


def random_record(rng, user_id, n_merchants=4, max_per=5, label=None):
    items = []
    for j in range(n_merchants):
        for _ in range(int(rng.integers(1, max_per + 1))):
            ts = T0 + int(rng.integers(0, 90 * DAY))
            items.append((f"shop {j} {user_id}", ts, float(rng.uniform(0, 300))))
    return record(user_id, items, label)


def tiny_model(**kw):
    cfg = dict(M=4, L_max=6, hash_buckets=64, token_dim=8, d_model=16, n_heads=2, seed=0)
    cfg.update(kw)
    return LbsfModel(ModelConfig(**cfg), AmountStats(3.0, 1.5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
