import time

import pytest

from advlab import data, nn, pipeline


@pytest.fixture(scope="session")
def small_ds():
    return data.ingest({"kind": "synthetic", "count": 160, "seed": 7})


@pytest.fixture(scope="session")
def small_model(small_ds):
    # tiny and quick; unit tests need wiring, not accuracy
    return nn.train_model(
        small_ds.train_images, small_ds.train_labels,
        config=nn.TrainConfig(epochs=3, learning_rate=0.02, seed=0), seed=0)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """One full default-config experiment run, shared by the acceptance
    tests.  Takes a few minutes; everything downstream reads from it."""
    out = tmp_path_factory.mktemp("desk")
    config = pipeline.ExperimentConfig()
    start = time.monotonic()
    report = pipeline.run_pipeline(config, out)
    runtime = time.monotonic() - start
    ds = data.ingest(config.dataset, split_ratio=config.split_ratio,
                     split_seed=config.split_seed)
    return {
        "config": config,
        "report": report,
        "out": out,
        "ds": ds,
        "model": nn.load_model(out / "model.json"),
        "runtime": runtime,
    }
