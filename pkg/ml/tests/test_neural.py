"""
Tests for the from-scratch network: forward/backward passes, losses, Adam and checkpoints.
"""

import json
import math

import numpy as np
import pytest

from ml.errors import NumericError, ShapeError
from ml.models.neural import (
    AdamState,
    LayerKind,
    NetworkSpec,
    adam_step,
    backward,
    clip_gradients,
    cross_entropy_batch,
    cross_entropy_loss,
    dense,
    dropout,
    forward,
    gradient_check,
    init_params,
    l2_penalty,
    load_checkpoint,
    output,
    random_network,
    recurrent,
    save_checkpoint,
)


@pytest.fixture
def drqn_spec():
    return NetworkSpec.drqn(input_size=5, hidden_sizes=(6, 4), recurrent_size=3, output_size=2)


class TestNetworkSpec:
    def test_drqn_layout(self, drqn_spec):
        kinds = [layer.kind for layer in drqn_spec.layers]
        assert kinds == [LayerKind.DENSE, LayerKind.RELU, LayerKind.DENSE, LayerKind.RELU,
                         LayerKind.RECURRENT, LayerKind.OUTPUT]
        assert drqn_spec.output_size == 2
        assert drqn_spec.layer_inputs() == [5, 6, 6, 4, 4, 3]

    def test_drqn_with_dropout(self):
        spec = NetworkSpec.drqn(4, (8,), 4, 3, dropout_rate=0.2)
        assert [layer.kind for layer in spec.layers][:3] == [LayerKind.DENSE, LayerKind.RELU, LayerKind.DROPOUT]

    @pytest.mark.parametrize("layers", [
        (dense(3),),
        (output(2), dense(3)),
        (recurrent(3), recurrent(3), output(2)),
        (dropout(1.0), output(2)),
        (dense(0), output(2)),
    ])
    def test_rejects_invalid_layouts(self, layers):
        with pytest.raises(ShapeError):
            NetworkSpec(input_size=3, layers=layers)

    def test_dict_round_trip(self, drqn_spec):
        assert NetworkSpec.from_dict(json.loads(json.dumps(drqn_spec.to_dict()))) == drqn_spec

    def test_glorot_init(self, drqn_spec, rng):
        params = init_params(drqn_spec, rng)
        assert set(params) == {'0.W', '0.b', '2.W', '2.b', '4.W', '4.U', '4.b', '5.W', '5.b'}
        assert params['0.W'].shape == (6, 5)
        assert np.abs(params['0.W']).max() <= math.sqrt(6.0 / 11.0)
        assert not params['4.b'].any()


class TestForward:
    def test_zero_params_give_zero_logits(self, drqn_spec, rng):
        params = {name: np.zeros_like(value) for name, value in init_params(drqn_spec, rng).items()}
        outputs, _ = forward(params, drqn_spec, rng.normal(size=(4, 5)))
        assert outputs.shape == (4, 2)
        assert not outputs.any()

    def test_single_dense_layer(self):
        spec = NetworkSpec(input_size=3, layers=(output(2),))
        params = {'0.W': np.array([[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]]), '0.b': np.array([0.5, -0.5])}
        x = np.array([[1.0, 1.0, 2.0]])
        outputs, _ = forward(params, spec, x)
        np.testing.assert_array_equal(outputs, [[9.5, -0.5]])

    def test_recurrence_carries_state(self, rng):
        spec = NetworkSpec(input_size=2, layers=(recurrent(3), output(2)))
        params = init_params(spec, rng)
        outputs, _ = forward(params, spec, np.ones((2, 2)))
        assert not np.allclose(outputs[0], outputs[1])
        params['0.U'] = np.zeros((3, 3))
        outputs, _ = forward(params, spec, np.ones((2, 2)))
        np.testing.assert_array_equal(outputs[0], outputs[1])

    def test_batches_are_independent(self, drqn_spec, rng):
        params = init_params(drqn_spec, rng)
        inputs = rng.normal(size=(3, 4, 5))
        batched, _ = forward(params, drqn_spec, inputs)
        single, _ = forward(params, drqn_spec, inputs[1])
        np.testing.assert_allclose(batched[1], single, atol=1e-12)

    def test_eval_is_deterministic(self, rng):
        spec = NetworkSpec.drqn(5, (6,), 3, 2, dropout_rate=0.5)
        params = init_params(spec, rng)
        inputs = rng.normal(size=(4, 5))
        first, _ = forward(params, spec, inputs)
        second, _ = forward(params, spec, inputs)
        assert first.tobytes() == second.tobytes()

    def test_dropout_preserves_expectation(self):
        spec = NetworkSpec(input_size=1, layers=(dense(50), dropout(0.3), output(1)))
        params = {'0.W': np.ones((50, 1)), '0.b': np.zeros(50),
                  '2.W': np.full((1, 50), 1.0 / 50), '2.b': np.zeros(1)}
        inputs = np.ones((10_000, 1, 1))
        evaluated, _ = forward(params, spec, inputs)
        trained, _ = forward(params, spec, inputs, train=True, rng=0)
        assert evaluated.mean() == pytest.approx(1.0)
        assert trained.mean() == pytest.approx(1.0, rel=0.02)
        assert trained.std() > 0

    def test_train_dropout_needs_rng(self, rng):
        spec = NetworkSpec.drqn(5, (6,), 3, 2, dropout_rate=0.5)
        with pytest.raises(ValueError):
            forward(init_params(spec, rng), spec, np.zeros((2, 5)), train=True)

    def test_input_size_mismatch(self, drqn_spec, rng):
        with pytest.raises(ShapeError):
            forward(init_params(drqn_spec, rng), drqn_spec, np.zeros((2, 4)))


class TestBackward:
    def test_linear_layer_row(self):
        spec = NetworkSpec(input_size=3, layers=(output(2),), l2_scale=0.0)
        params = {'0.W': np.ones((2, 3)), '0.b': np.zeros(2)}
        x = np.array([[0.5, -1.0, 2.0]])
        _, trace = forward(params, spec, x)
        grads = backward(params, spec, trace, np.array([[0.0, 1.0]]))
        np.testing.assert_array_equal(grads['0.W'][1], x[0])
        np.testing.assert_array_equal(grads['0.W'][0], 0.0)
        np.testing.assert_array_equal(grads['0.b'], [0.0, 1.0])

    def test_l2_only_gradient(self, drqn_spec, rng):
        params = init_params(drqn_spec, rng)
        outputs, trace = forward(params, drqn_spec, rng.normal(size=(3, 5)))
        grads = backward(params, drqn_spec, trace, np.zeros_like(outputs))
        for name, value in params.items():
            expected = np.zeros_like(value) if name.endswith('.b') else 2.0 * drqn_spec.l2_scale * value
            np.testing.assert_allclose(grads[name], expected, atol=1e-15)

    def test_l2_penalty(self):
        spec = NetworkSpec(input_size=2, layers=(output(1),), l2_scale=0.5)
        params = {'0.W': np.array([[1.0, 2.0]]), '0.b': np.array([10.0])}
        assert l2_penalty(params, spec) == pytest.approx(2.5)

    def test_matches_finite_differences(self):
        for trial in range(20):
            spec, params, inputs = random_network(np.random.default_rng([0, trial]))
            report = gradient_check(spec, params, inputs, seed=trial)
            assert report.passed, report.to_dict()
            assert report.entries_checked == sum(value.size for value in params.values())

    def test_sign_flip_is_detected(self):
        spec, params, inputs = random_network(np.random.default_rng([0, 0]))
        report = gradient_check(spec, params, inputs, sign_flip=True)
        assert not report.passed
        assert report.max_rel_error > 1e-4


class TestCrossEntropy:
    def test_symmetric(self):
        loss, grad = cross_entropy_loss(np.array([0.0, 0.0]), 0)
        assert loss == pytest.approx(math.log(2.0))
        np.testing.assert_allclose(grad, [-0.5, 0.5])

    def test_confident(self):
        loss, _ = cross_entropy_loss(np.array([10.0, -10.0]), 0)
        assert loss == pytest.approx(2.06e-9, rel=0.01)

    def test_gradient_sums_to_zero(self, rng):
        for _ in range(50):
            logits = rng.normal(scale=5.0, size=7)
            _, grad = cross_entropy_loss(logits, int(rng.integers(7)))
            assert grad.sum() == pytest.approx(0.0, abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ShapeError):
            cross_entropy_loss(np.zeros(3), 3)

    def test_batch_matches_rows(self, rng):
        logits = rng.normal(size=(4, 5))
        labels = np.array([0, 4, 2, 2])
        losses, grads = cross_entropy_batch(logits, labels)
        for row in range(4):
            loss, grad = cross_entropy_loss(logits[row], int(labels[row]))
            assert losses[row] == pytest.approx(loss)
            np.testing.assert_allclose(grads[row], grad)


class TestAdam:
    @pytest.fixture
    def params(self):
        return {'0.W': np.array([[1.0, -2.0]]), '0.b': np.array([0.5])}

    def test_zero_gradients(self, params):
        state = AdamState.create(params)
        grads = {name: np.zeros_like(value) for name, value in params.items()}
        updated, state = adam_step(params, grads, state)
        for name in params:
            np.testing.assert_array_equal(updated[name], params[name])
        assert state.t == 1

    def test_constant_gradient_step_is_lr_sign(self, params):
        state = AdamState.create(params, lr=0.01)
        grads = {'0.W': np.array([[3.0, -0.2]]), '0.b': np.array([1e-3])}
        current = params
        for _ in range(200):
            previous = current
            current, state = adam_step(current, grads, state)
        assert state.t == 200
        for name in params:
            np.testing.assert_allclose(previous[name] - current[name], 0.01 * np.sign(grads[name]), rtol=1e-4)

    def test_does_not_mutate_inputs(self, params):
        original = {name: value.copy() for name, value in params.items()}
        state = AdamState.create(params)
        adam_step(params, {name: np.ones_like(value) for name, value in params.items()}, state)
        for name in params:
            np.testing.assert_array_equal(params[name], original[name])
        assert state.t == 0

    def test_rejects_non_finite(self, params):
        grads = {'0.W': np.array([[np.nan, 0.0]]), '0.b': np.zeros(1)}
        with pytest.raises(NumericError):
            adam_step(params, grads, AdamState.create(params))

    def test_rejects_shape_mismatch(self, params):
        grads = {'0.W': np.zeros((2, 1)), '0.b': np.zeros(1)}
        with pytest.raises(ShapeError):
            adam_step(params, grads, AdamState.create(params))


class TestClipGradients:
    def test_scales_to_max_norm(self):
        clipped, norm = clip_gradients({'a': np.array([3.0]), 'b': np.array([4.0])}, max_norm=1.0)
        assert norm == pytest.approx(5.0)
        assert clipped['a'][0] == pytest.approx(0.6)
        assert clipped['b'][0] == pytest.approx(0.8)

    def test_small_gradients_untouched(self):
        grads = {'a': np.array([0.3, 0.4])}
        clipped, norm = clip_gradients(grads)
        assert clipped is grads
        assert norm == pytest.approx(0.5)


class TestCheckpoints:
    def test_round_trip(self, drqn_spec, rng, tmp_path):
        params = init_params(drqn_spec, rng)
        path = str(tmp_path / 'ckpt' / 'net.json')
        save_checkpoint(path, drqn_spec, params, step_counter=42, rng_state={'seed': 3})
        spec, loaded, meta = load_checkpoint(path)
        assert spec == drqn_spec
        assert meta == {'rng_state': {'seed': 3}, 'step_counter': 42}
        for name, value in params.items():
            assert loaded[name].tobytes() == value.tobytes()

    def test_version_mismatch(self, drqn_spec, rng, tmp_path):
        path = tmp_path / 'net.json'
        save_checkpoint(str(path), drqn_spec, init_params(drqn_spec, rng))
        payload = json.loads(path.read_text())
        payload['format_version'] = 99
        path.write_text(json.dumps(payload))
        with pytest.raises(ValueError, match='format version'):
            load_checkpoint(str(path))

    def test_shape_mismatch(self, drqn_spec, rng, tmp_path):
        path = tmp_path / 'net.json'
        save_checkpoint(str(path), drqn_spec, init_params(drqn_spec, rng))
        payload = json.loads(path.read_text())
        payload['params']['0.W'] = {'shape': [5, 6], 'data': [0.0] * 30}
        path.write_text(json.dumps(payload))
        with pytest.raises(ShapeError):
            load_checkpoint(str(path))
