import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from magnn import autodiff as ad  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.RESULTS:
        terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def float64_mode():
    with ad.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def movielens_csv(rows, header="userId,movieId,rating,timestamp"):
    return (header + "\n" + "\n".join(",".join(str(x) for x in r) for r in rows) + "\n").encode()


@pytest.fixture
def toy_csv(tmp_path):
    """30 users x 14 items, every rating 5, distinct timestamps; a few low ratings mixed in."""
    rng = np.random.default_rng(7)
    rows = []
    t = 1000
    for u in range(30):
        for i in rng.permutation(14)[:12]:
            rows.append((f"u{u}", f"m{i}", 5.0, t))
            t += 1
        rows.append((f"u{u}", "m99", 2.0, t))
        t += 1
    path = tmp_path / "ratings.csv"
    path.write_bytes(movielens_csv(rows))
    return path
