"""Shared fixtures: small corpora for unit tests, one full training run
reused by the end-to-end acceptance criteria."""

from __future__ import annotations

import time

import pytest

from qcnet import data, phantom, qc, train
from qcnet import model as model_mod


@pytest.fixture(scope="session")
def announce(request):
    """Write a line straight to the terminal, bypassing output capture."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def _announce(line):
        if reporter is not None:
            reporter.ensure_newline()
            reporter.write_line(line)
        else:
            print(line)

    return _announce


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """12 subjects x 3 volumes at desk-32 dims; enough for io/data/qc tests."""
    root = tmp_path_factory.mktemp("corpus-small")
    manifest = phantom.generate_dataset(12, 3, 0.35, None, 11, root)
    return manifest


@pytest.fixture(scope="session")
def tiny_model():
    """Smallest legal model; used where only shapes/serialization matter."""
    config = model_mod.ModelConfig(input_dims=(16, 16, 8), seed=1)
    return model_mod.build_model(config)


@pytest.fixture(scope="session")
def e2e(tmp_path_factory):
    """The full synthetic pipeline used by the end-to-end criteria.

    Distribution A: 200 training volumes + 60 held-out test volumes, strong
    artifacts. Distribution B: same sizes but subtler artifacts and smoother
    texture. Returns every intermediate artifact plus wall-clock timings so
    the acceptance tests can check runtime budgets.
    """
    root = tmp_path_factory.mktemp("e2e")
    out = {}

    t0 = time.time()
    out["trainA"] = phantom.generate_dataset(50, 4, 0.3, None, 101, root / "trainA")
    out["testA"] = phantom.generate_dataset(15, 4, 0.3, None, 202, root / "testA")
    out["split_train"], out["split_val"] = data.stratified_subject_split(
        out["trainA"], data.SplitSpec(0.25, seed=7)
    )
    config = model_mod.preset_config("desk-32", seed=0)
    model = model_mod.build_model(config)
    tc = train.TrainConfig(epochs=20, batch_size=5, lr=1e-4, seed=0)
    model, history = train.train(model, out["split_train"], out["split_val"], tc)
    out["base_model"] = model
    out["history"] = history
    out["train_seconds"] = time.time() - t0

    predA, failures = qc.predict(model, out["testA"])
    assert not failures
    out["predA"] = predA
    decisions = [qc.apply_threshold(r.predicted_prob, 0.5) for r in predA.records]
    out["metricsA"] = qc.compute_metrics(decisions, [r.label for r in predA.records])

    t1 = time.time()
    shift = dict(texture_sigma=0.8, severity=phantom.SUBTLE)
    out["poolB"] = phantom.generate_dataset(50, 4, 0.3, None, 303, root / "poolB", **shift)
    out["testB"] = phantom.generate_dataset(15, 4, 0.3, None, 404, root / "testB", **shift)

    predB, _ = qc.predict(model, out["testB"])
    out["predB_base"] = predB
    decisions = [qc.apply_threshold(r.predicted_prob, 0.5) for r in predB.records]
    out["metricsB_base"] = qc.compute_metrics(decisions, [r.label for r in predB.records])

    out["subsetB"] = train.select_finetune_subset(out["poolB"], 0.1, 5)
    tuned = train.finetune(
        model, out["subsetB"], train.TrainConfig(lr=1e-4, seed=0, finetune_epochs=5)
    )
    out["tuned_model"] = tuned
    predB2, _ = qc.predict(tuned, out["testB"])
    out["predB_tuned"] = predB2
    decisions = [qc.apply_threshold(r.predicted_prob, 0.5) for r in predB2.records]
    out["metricsB_tuned"] = qc.compute_metrics(decisions, [r.label for r in predB2.records])
    out["finetune_seconds"] = time.time() - t1
    out["root"] = root
    return out
