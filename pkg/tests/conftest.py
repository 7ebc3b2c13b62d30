"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion at the end of the run."""
import pytest

CRITERIA = {
    1: "resolvent against the Neumann series, O(h^2) residual",
    2: "mean intensity against the closed form",
    3: "simulated E[H_T] against the analytic mean",
    4: "shifted expectation against simulate_shifted",
    5: "covariance: general vs separable, MC variance, Poisson, unit ratio",
    6: "operator suite: T^n recursion, compatibility, factorial law",
    7: "Mecke check with theta-cap doubling",
    8: "Wald identity, analytic and Monte Carlo",
}

_results: dict = {}


class Recorder:
    def __call__(self, n: int, ok: bool, detail: str = "") -> bool:
        prev_ok, prev = _results.get(n, (True, []))
        _results[n] = (prev_ok and bool(ok), prev + [f"{detail} [{'ok' if ok else 'fail'}]"] if detail else prev)
        return bool(ok)


@pytest.fixture(scope="session")
def acceptance():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for n, title in CRITERIA.items():
        ok, details = _results.get(n, (False, ["not run to completion"]))
        tr.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}")
        for d in details:
            tr.write_line(f"    {d}")
