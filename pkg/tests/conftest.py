from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

FIXTURE_DIR = Path(__file__).parent / "fixtures" / "desk"

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE_RESULTS: dict = {}


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    with threadpool_limits(1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_manifest_path():
    return FIXTURE_DIR / "manifest.json"


@pytest.fixture(scope="session")
def desk_training(tmp_path_factory, desk_manifest_path):
    """One seeded desk-scale training run shared by the slow tests."""
    from dense_stego.image_io import DatasetManifest
    from dense_stego.network import NetworkConfig
    from dense_stego.training import HyperParams, train_loop
    import time

    out = tmp_path_factory.mktemp("desk_run")
    manifest = DatasetManifest.load(desk_manifest_path)
    start = time.perf_counter()
    result = train_loop(manifest, NetworkConfig.desk(), HyperParams.desk(seed=0), out_dir=out)
    result.elapsed = time.perf_counter() - start
    result.out_dir = out
    return result


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
