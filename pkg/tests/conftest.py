import os

import numpy as np
import pytest
from hypothesis import settings

from ckt_surrogate.data import build_dataset
from ckt_surrogate.model import InsightConfig, InsightModel, SequenceLayout

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    return InsightConfig(d_model=16, heads=2, layers=2, out_heads=3)


def toy_model(n=3, m=3, cfg=None, seed=0, perturb=True):
    cfg = cfg or InsightConfig(d_model=8, heads=2, layers=2, out_heads=3)
    layout = SequenceLayout([f"x{i}" for i in range(n)], [f"y{i}" for i in range(m)])
    model = InsightModel(cfg, layout, seed=seed)
    if perturb:
        r = np.random.default_rng(seed + 100)
        for name, p in model.params.items():
            if name.endswith(".g"):
                p.value[...] = 1.0 + r.normal(0, 0.3, p.shape)
            else:
                p.value[...] = r.normal(0, 0.3 if p.value.ndim == 1 else 0.2, p.shape)
    return model


@pytest.fixture(scope="session")
def ota_data():
    return build_dataset("ota2_nmos", "synth45", 400, seed=5)


@pytest.fixture(scope="session")
def ota_pretrained():
    """Default-size INSIGHT on the NMOS OTA at 1500:500 (shared by the slow tests)."""
    import time

    from ckt_surrogate.data import split
    from ckt_surrogate.train import TrainRunConfig, train_insight

    ds = build_dataset("ota2_nmos", "synth45", 2000, seed=1)
    tr, te = split(ds, 1500, 500, seed=0)
    t0 = time.perf_counter()
    ck, _ = train_insight(tr, InsightConfig(), TrainRunConfig(epochs=100, seed=0))
    return ck, tr, te, time.perf_counter() - t0


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
