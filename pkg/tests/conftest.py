import numpy as np
import pytest

from planefield.data import BlobSpec, SynthSpec, synth_scene
from planefield.trainer import TrainConfig


def tiny_config(**overrides):
    """A model small enough for sub-second training steps."""
    base = dict(iters=40, batch_rays=32, resolutions=(8, 16), samplenet_resolutions=(8,),
                feat_dim=4, oneblob_bins=4, n_coarse=8, n_fine=8, decoder_width=16,
                samplenet_width=8, checkpoint_every=10, seed=3)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def small_scene():
    spec = SynthSpec(width=12, height=12, frames=4, focal=12.0)
    return synth_scene(spec)


@pytest.fixture(scope="session")
def static_scene():
    blob = BlobSpec(start=(0.0, 0.0, -2.2), end=(0.0, 0.0, -2.2), std=0.35, peak=6.0,
                    color=(0.8, 0.4, 0.2))
    spec = SynthSpec(width=12, height=12, frames=3, focal=12.0, blobs=[blob], tool=False)
    return synth_scene(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary ----------------------------------------------------------------
# Tests marked ``criterion(n, title)`` report one pass/fail line each at the end
# of the run; details come from ``record_property("detail", ...)``.

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    n, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if report.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    _CRITERIA[n] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n} ({title}): {status}  {detail}".rstrip())
