import math

import numpy as np
import pytest

from core.datagen import TaskBatch
from core.exceptions import ConfigurationError
from core.objectives import (
    LossSpec,
    MetaObjective,
    batch_loss_grads,
    batch_loss_values,
    loss_grad_wrt_prediction,
    loss_value,
    meta_value,
    task_losses,
    validation_gradient,
)
from core.models import per_sample_task_gradients, predict


def test_closed_form_losses():
    assert loss_value(LossSpec("mse"), [0.3, -1.0], [0.3, -1.0]) == 0.0
    assert loss_value(LossSpec("bce-with-logits"), [1.0], [0.0]) == pytest.approx(math.log(2), abs=1e-9)
    assert loss_value(LossSpec("ce-with-logits"), 0, [0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-9)


def test_mse_is_mean_over_dimensions():
    assert loss_value(LossSpec("mse"), [1.0, 0.0], [0.0, 0.0]) == pytest.approx(0.5)


def test_closed_form_gradients():
    np.testing.assert_array_equal(loss_grad_wrt_prediction(LossSpec("mse"), [2.0], [2.0]), [0.0])
    np.testing.assert_allclose(loss_grad_wrt_prediction(LossSpec("bce-with-logits"), [1.0], [0.0]), [-0.5])
    np.testing.assert_allclose(loss_grad_wrt_prediction(LossSpec("ce-with-logits"), 1, [0.0, 0.0]), [0.5, -0.5])


def test_bce_is_stable_for_large_logits():
    values = batch_loss_values(LossSpec("bce-with-logits"), np.array([[1.0], [0.0]]), np.array([[800.0], [-800.0]]))
    assert np.all(np.isfinite(values))
    np.testing.assert_allclose(values, 0.0, atol=1e-12)
    assert loss_value(LossSpec("bce-with-logits"), [0.0], [800.0]) == pytest.approx(800.0)


def test_ce_is_stable_for_large_logits():
    value = loss_value(LossSpec("ce-with-logits"), 1, [1000.0, 0.0])
    assert value == pytest.approx(1000.0)


def test_unknown_loss_tag():
    with pytest.raises(ConfigurationError):
        LossSpec("hinge")


def test_invalid_class_index():
    with pytest.raises(ConfigurationError):
        loss_value(LossSpec("ce-with-logits"), 3, [0.0, 0.0, 0.0])
    with pytest.raises(ConfigurationError):
        batch_loss_grads(LossSpec("ce-with-logits"), np.array([-1]), np.zeros((1, 2)))


def test_target_shape_mismatch():
    with pytest.raises(ConfigurationError):
        batch_loss_values(LossSpec("mse"), np.zeros((3, 2)), np.zeros((3, 1)))


def test_meta_objective_requires_loss():
    with pytest.raises(ConfigurationError):
        MetaObjective(metric="accuracy")


def test_validation_gradient_matches_per_sample_mean(small_net, regression_batch, mse_specs):
    grads = per_sample_task_gradients(small_net, regression_batch, mse_specs)
    val_grad = validation_gradient(small_net, regression_batch, mse_specs, MetaObjective(main_task=0))
    np.testing.assert_allclose(val_grad, grads[0].sum(axis=0) / len(regression_batch), rtol=1e-10, atol=1e-13)
    assert not np.any(val_grad[small_net.layout.head(1)])


def test_validation_gradient_vanishes_at_optimum(small_net, regression_batch, mse_specs):
    predictions = predict(small_net, regression_batch.X)
    exact = TaskBatch(regression_batch.X, tuple(predictions), regression_batch.corrupted, regression_batch.indices)
    val_grad = validation_gradient(small_net, exact, mse_specs, MetaObjective())
    assert not np.any(val_grad)


def test_validation_gradient_rejects_empty_batch(small_net, mse_specs):
    empty = TaskBatch(np.zeros((0, 4)), (np.zeros((0, 1)), np.zeros((0, 2))), np.zeros((2, 0), dtype=bool), np.arange(0))
    with pytest.raises(ConfigurationError):
        validation_gradient(small_net, empty, mse_specs, MetaObjective())


def test_meta_value_is_main_task_mean_loss(small_net, regression_batch, mse_specs):
    losses = task_losses(small_net, regression_batch, mse_specs)
    assert losses.shape == (2,)
    assert meta_value(small_net, regression_batch, mse_specs, MetaObjective()) == pytest.approx(losses[0])
