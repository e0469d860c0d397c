import numpy as np
import pytest

from instrumentnet.dataset import SynthSpec, synth_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Three classes, four 3 s training excerpts each, four short test mixtures."""
    root = tmp_path_factory.mktemp("corpus")
    synth_corpus(root, SynthSpec(n_classes=3, train_per_class=4, n_test=4, seed=11,
                                 test_seconds=(3.0, 6.0)))
    return root


# ---------------------------------------------------------------------------
# acceptance bookkeeping: each ``@pytest.mark.criterion(n, title)`` test gets
# one PASS/FAIL line, printed as it finishes and again in the final summary


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config._criteria = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if report.passed else "FAIL"
    line = f"criterion {number:>2} {status}: {title}" + (f" ({detail})" if detail else "")
    item.config._criteria.append((number, line))
    writer = item.config.pluginmanager.get_plugin("terminalreporter")
    if writer is not None:
        writer.write_line("")
        writer.write_line(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config._criteria:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(config._criteria):
            terminalreporter.write_line(line)
