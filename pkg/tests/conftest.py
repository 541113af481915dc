import logging

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")

logging.getLogger("cmoe").setLevel(logging.WARNING)

# one line per release-gate check, echoed after the run summary so the
# verdicts survive pytest's output capturing
GATE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("release gate")
        for line in GATE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """24-source synthetic set with cached 60x48 mel features, shared by the
    trainer and CLI tests."""
    from cmoe import data as D
    from cmoe.features import EffectiveBand

    root = tmp_path_factory.mktemp("tiny")
    spec = D.SyntheticSpec(num_classes=4, train_per_class=4, test_per_class=2, seed=5)
    manifest, sidecar = D.generate_synthetic(spec, root / "wav")
    train_idx, test_idx = D.build_split(manifest)
    store = D.FeatureStore(
        root / "cache",
        extract_fn=D.make_extract_fn(
            manifest, "mel", EffectiveBand(50.0, 1000.0),
            frame_ms=1000.0, shift_ms=500.0, n_filters=48),
        memo=True)
    for seg in list(train_idx) + list(test_idx):
        store.get(seg)
    return dict(root=root, spec=spec, manifest=manifest, sidecar=sidecar,
                train=train_idx, test=test_idx, store=store,
                names=manifest.class_names)
