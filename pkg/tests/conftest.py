"""Shared fixtures and the acceptance-criteria summary.

Tests marked ``criterion(k, title)`` are reported once more at the end of
the run as a single ``ACCEPTANCE k PASS/FAIL`` line, together with any
measured values they registered through the ``report`` fixture.
"""
import threading

import pytest

_RESULTS = {}
_DETAILS = {}

# (test node id, score residual) for every GEE/WGEE fit produced in the run
SCORE_AUDIT = []
_AUDIT_LOCK = threading.Lock()
_CURRENT = {"node": None}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    _install_score_audit()


def pytest_collection_modifyitems(items):
    """Run the acceptance suite after the unit battery, and the score audit
    (criterion 4) after every other fit has been recorded."""
    def key(it):
        mark = it.get_closest_marker("criterion")
        return (mark is not None, mark is not None and mark.args[0] == 4)
    items.sort(key=key)


def _install_score_audit():
    """Wrap the GEE solver so each converged fit's score is re-checked.

    Installed before collection so that names imported by test modules pick
    up the wrapper too.
    """
    import longit
    import longit.cli
    import longit.gee
    import longit.wgee
    from helpers import fit_score_residual

    real = longit.gee.fit_gee

    def audited(*args, **kwargs):
        fit = real(*args, **kwargs)
        if fit.converged:
            r = fit_score_residual(fit)
            with _AUDIT_LOCK:
                SCORE_AUDIT.append((_CURRENT["node"], r))
        return fit

    for mod in (longit, longit.gee, longit.wgee, longit.cli):
        mod.fit_gee = audited


@pytest.fixture(autouse=True)
def _audit_node(request):
    _CURRENT["node"] = request.node.nodeid
    yield


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _RESULTS[mark.args[0]] = (mark.args[1], rep.outcome, item.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_RESULTS):
        title, outcome, nodeid = _RESULTS[k]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        extra = _DETAILS.get(nodeid, "")
        terminalreporter.write_line(f"ACCEPTANCE {k:2d} {verdict}: {title}"
                                    + (f" [{extra}]" if extra else ""))


@pytest.fixture
def report(request):
    """Attach a short measured-value note to the acceptance summary line."""
    def add(text):
        prev = _DETAILS.get(request.node.nodeid)
        _DETAILS[request.node.nodeid] = f"{prev}; {text}" if prev else text
        print(text)
    return add


@pytest.fixture
def small_mar():
    """A modest two-arm MAR dropout dataset shared by several modules."""
    from longit.sim import SimSpec, simulate
    spec = SimSpec(N=400, intercepts=(-1.0, -0.4, 0.2, 0.8), effects=((0.3, 0.5, 0.7, 0.9),),
                   sigma=1.2, psi_intercept=-1.5, psi_prev=1.0, seed=17)
    return simulate(spec)
