import sys
import time
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

EVAL_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def trained():
    """Models trained once at the default desk scale, with stage timings.

    The AAE dataset holds the three evaluation scenes plus one extra scene.
    """
    from sarad.eval import benchmark_scene
    from sarad.pipeline import PipelineConfig, train_models

    cfg = PipelineConfig(seed=0)
    stamps = []
    t0 = time.perf_counter()
    scenes = [benchmark_scene(s, cfg.scene_size, cfg.scene_size) for s in EVAL_SEEDS]
    models = train_models(cfg, scenes, say=lambda msg: stamps.append(time.perf_counter()))
    t_end = time.perf_counter()
    marks = stamps + [t_end]
    timing = {
        "despeckler": marks[1] - marks[0],
        "aae": marks[2] - marks[1],
        "aae_noisy": marks[3] - marks[2],
        "total": t_end - t0,
    }
    return {"cfg": cfg, "scenes": scenes, "models": models, "timing": timing}


def pytest_collection_modifyitems(items):
    for item in items:
        if "trained" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)
