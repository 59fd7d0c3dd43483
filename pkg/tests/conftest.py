"""Shared fixtures: small synthetic datasets and quickly trained models.

These are deliberately undersized (minutes-scale suite); the full-scale
evaluation lives in test_acceptance.py.
"""

import numpy as np
import pytest

from lrdetect import data, detector as det, models


@pytest.fixture(scope="session")
def train_set():
    return data.make_dataset(1500, seed=101)


@pytest.fixture(scope="session")
def test_set():
    return data.make_dataset(600, seed=102)


@pytest.fixture(scope="session")
def detector_set():
    return data.make_dataset(1500, seed=103)


@pytest.fixture(scope="session")
def mlp_model(train_set):
    x, y = train_set
    model = models.Classifier.build(models.ModelConfig(arch="mlp"), seed=0)
    models.train_classifier(model, x, y, models.TrainConfig(epochs=2, seed=1))
    return model


@pytest.fixture(scope="session")
def cnn_model(train_set):
    x, y = train_set
    model = models.Classifier.build(models.ModelConfig(arch="small_cnn"), seed=0)
    models.train_classifier(model, x, y, models.TrainConfig(epochs=1, seed=1))
    return model


@pytest.fixture(scope="session")
def mlp_detector(mlp_model, detector_set):
    x, _ = detector_set
    spec = det.make_tap_spec(mlp_model, order_policy="fixed", seed=2)
    hyper = det.RegressorTrainConfig(epochs=25, input_dropout=0.15, seed=3)
    return det.train_regressor(mlp_model, spec, x, hyper)


@pytest.fixture(scope="session")
def mlp_detector_randomized(mlp_model, detector_set):
    x, _ = detector_set
    spec = det.make_tap_spec(mlp_model, order_policy="randomized", order_seed=9, seed=2)
    hyper = det.RegressorTrainConfig(epochs=25, input_dropout=0.15, seed=3)
    return det.train_regressor(mlp_model, spec, x, hyper)
