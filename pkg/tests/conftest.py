"""Shared fixtures: the toy dataset and the trained checkpoints.

Training fixtures are session-scoped so the expensive runs happen once and
are shared between the integration tests and the acceptance suite. All of
them are fully seeded; reruns produce identical artifacts.
"""

import numpy as np
import pytest

from meer import evaluation as ev
from meer import face_data as fd
from meer import training as tr
from meer.losses import LossWeights
from meer.model_core import ModelConfig

# desk-scale recipe: identity weight and learning rate retuned for a
# few-hundred-step budget (the defaults assume a many-epoch schedule)
TOY_LAM = 0.1
TOY_LR = 0.003
TOY_IMAGE_SIZE = 32


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    return tmp_path_factory.mktemp("toy")


@pytest.fixture(scope="session")
def toy_manifest(toy_root):
    return fd.synthesize_dataset(
        toy_root / "data", n_ids=16, imgs_per_id=8, masked_ratio=0.25,
        size=TOY_IMAGE_SIZE, seed=0,
    )


@pytest.fixture(scope="session")
def toy_model_cfg():
    return ModelConfig(image_size=TOY_IMAGE_SIZE, embed_dim=128)


@pytest.fixture(scope="session")
def toy_weights():
    return LossWeights(lam=TOY_LAM)


def toy_train_cfg(epochs, **overrides):
    params = dict(batch_size=16, epochs=epochs, seed=0, lr_initial=TOY_LR)
    params.update(overrides)
    return tr.TrainConfig(**params)


def _timed(fn, *args, **kwargs):
    import time

    t0 = time.perf_counter()
    result = fn(*args, **kwargs)
    result.build_seconds = time.perf_counter() - t0
    return result


@pytest.fixture(scope="session")
def stage1_result(toy_root, toy_manifest, toy_model_cfg, toy_weights):
    return _timed(tr.train_stage1, toy_manifest, toy_train_cfg(12), toy_model_cfg,
                  toy_weights, toy_root / "stage1")


@pytest.fixture(scope="session")
def stage2_result(toy_root, toy_manifest, stage1_result):
    return _timed(tr.train_stage2, stage1_result.checkpoint_path, toy_manifest,
                  toy_train_cfg(60), toy_root / "stage2")


@pytest.fixture(scope="session")
def stage2_eta0_result(toy_root, toy_manifest, stage1_result, toy_weights):
    import dataclasses
    w = dataclasses.replace(toy_weights, eta=0.0)
    return _timed(tr.train_stage2, stage1_result.checkpoint_path, toy_manifest,
                  toy_train_cfg(60), toy_root / "stage2_eta0", weights=w)


@pytest.fixture(scope="session")
def stage2_mis_off_result(toy_root, toy_manifest, stage1_result):
    return _timed(tr.train_stage2, stage1_result.checkpoint_path, toy_manifest,
                  toy_train_cfg(60, mis_on=False), toy_root / "stage2_mis_off")


@pytest.fixture(scope="session")
def toy_dataset(toy_manifest):
    return tr.FaceDataset(toy_manifest, TOY_IMAGE_SIZE)


@pytest.fixture(scope="session")
def toy_pairs_file(toy_root, toy_manifest):
    pairs = ev.balanced_pairs_from_manifest(toy_manifest, seed=0, per_identity=6)
    path = toy_root / "pairs.tsv"
    ev.write_pairs_file(pairs, path)
    return path


# ---------------------------------------------------------------------------
# acceptance reporting: one pass/fail line per criterion

_acceptance_reports = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call" or "test_acceptance" not in str(item.fspath):
        return
    marker = item.get_closest_marker("criterion")
    if marker:
        num, desc = marker.args
        _acceptance_reports[num] = (desc, report.outcome)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_reports:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_acceptance_reports):
        desc, outcome = _acceptance_reports[num]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d} [{status}] {desc}")


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(num, description): acceptance criterion metadata")
