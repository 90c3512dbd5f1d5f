import time

import numpy as np
import pytest
from shapely.geometry import box

from geodose.mesh import build_mesh


@pytest.fixture(scope="session")
def small_mesh():
    """About 35 nodes on a 6 km square, no extension band."""
    m = build_mesh(box(0, 0, 6_000, 6_000), 1200, 1600, 25.0, extension=0.0)
    assert m.n_nodes <= 50
    return m


@pytest.fixture(scope="session")
def mesh_20():
    """About 20 nodes."""
    return build_mesh(box(0, 0, 6_000, 6_000), 1400, 2000, 25.0, extension=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    """The bundled synthetic survey (mixed variant) written once per session."""
    from geodose.simulate import write_fixture

    out = tmp_path_factory.mktemp("fixture")
    write_fixture(out)
    return out


def config_variant(src_dir, dst, replace: dict):
    """Copy the fixture config into dst's directory with text substitutions."""
    text = (src_dir / "config.ini").read_text()
    for old, new in replace.items():
        assert old in text, old
        text = text.replace(old, new)
    dst.write_text(text)
    return dst


# --------------------------------------------------------------------------
# acceptance reporting
# --------------------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


class Criterion:
    """Times one acceptance criterion and records a PASS/FAIL line.

    Checks are collected with ``require``; the block fails if any check fails,
    an exception escapes, or the runtime budget is exceeded.
    """

    def __init__(self, number: int, title: str, budget_s: float | None):
        self.number = number
        self.title = title
        self.budget_s = budget_s
        self.details: list[str] = []
        self.failed: list[str] = []

    def require(self, ok: bool, detail: str) -> None:
        self.details.append(detail)
        if not ok:
            self.failed.append(detail)

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        if exc_type is not None:
            self.failed.append(f"{exc_type.__name__}: {exc}")
        if self.budget_s is not None and elapsed >= self.budget_s:
            self.failed.append(f"runtime {elapsed:.1f} s exceeds {self.budget_s:g} s")
        budget = f" / {self.budget_s:g} s" if self.budget_s is not None else ""
        status = "FAIL" if self.failed else "PASS"
        shown = self.failed if self.failed else self.details
        line = f"criterion {self.number:2d} {status} {self.title} [{elapsed:.1f} s{budget}]: " + "; ".join(shown)
        ACCEPTANCE_LINES.append(line)
        print(line)
        if exc_type is None and self.failed:
            raise AssertionError(line)
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
