from dataclasses import replace

import numpy as np
import pytest
from scipy.special import softmax

from randprune.alloc import plan_erk, plan_from_ratios, plan_uniform
from randprune.arch import mlp_network, parse_network
from randprune.engine import (
    Batch,
    Checkpoint,
    Gradients,
    apply_mask,
    backward,
    finite_difference_hvp,
    fit,
    forward_loss,
    grasp_ratios,
    hvp,
    init_params,
    input_gradient,
    learning_rate,
    load_checkpoint,
    predict_logits,
    ratios_from_scores,
    save_checkpoint,
    sgd_step,
    snip_ratios,
    snip_scores,
    value_and_grad,
)
from randprune.engine.checkpoint import checkpoint_from_bytes, checkpoint_to_bytes
from randprune.engine.training import epoch_order
from randprune.exceptions import ArtifactError, PlanMismatchError, SaliencyError
from randprune.mask import Mask, full_mask, layer_generator, sample_mask
from randprune.models import RECIPES, TrainConfig
from randprune.runner.datasets import gaussian_mixture

# conv with max pooling, padded conv with average pooling, classifier
CONV_NET = """\
input 2 6 6
classes 3
conv 2->3 k3 pos16
pool max 2
conv 3->4 k3 pos4 pad1
pool avg 2
fc 4->3
"""

LINEAR_NET = "input 6 1 1\nclasses 3\nfc 6->3\n"

NO_MOMENTUM = TrainConfig(
    epochs=1,
    learning_rate=0.1,
    momentum=0.0,
    weight_decay=0.0,
    decay_milestones=(),
)


@pytest.fixture
def conv_net():
    return parse_network(CONV_NET)


@pytest.fixture
def image_batch():
    rng = np.random.default_rng(0)
    return Batch(rng.random((8, 2, 6, 6)), rng.integers(0, 3, size=8))


def numeric_gradient(loss, array, step=1e-6):
    """Central differences of ``loss()`` w.r.t. every entry of ``array``,
    which is perturbed in place."""
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + step
        upper = loss()
        array[index] = original - step
        lower = loss()
        array[index] = original
        grad[index] = (upper - lower) / (2 * step)
    return grad


def test_weight_gradients(conv_net, image_batch):
    params = init_params(conv_net, seed=1)
    mask = sample_mask(plan_uniform(conv_net, 0.5), conv_net, seed=2)
    weights = [w.copy() for w in params.weights]
    shifted = params.with_weights(weights)
    grads = backward(shifted, mask, image_batch)

    def loss():
        return forward_loss(shifted, mask, image_batch)[0]

    for w, g, keep in zip(weights, grads.weights, mask.layers):
        np.testing.assert_allclose(g, numeric_gradient(loss, w), rtol=1e-4, atol=1e-7)
        assert np.all(g[~keep] == 0.0)


def test_bias_gradients(conv_net, image_batch):
    params = init_params(conv_net, seed=1)
    rng = np.random.default_rng(3)
    biases = [0.1 * rng.standard_normal(b.shape) for b in params.biases]
    params = replace(params, biases=biases)
    mask = full_mask(conv_net)
    grads = backward(params, mask, image_batch)

    def loss():
        return forward_loss(params, mask, image_batch)[0]

    for b, g in zip(biases, grads.biases):
        np.testing.assert_allclose(g, numeric_gradient(loss, b), rtol=1e-4, atol=1e-7)


def test_input_gradient(conv_net, image_batch):
    params = init_params(conv_net, seed=4)
    mask = full_mask(conv_net)
    inputs = image_batch.inputs.copy()
    batch = Batch(inputs, image_batch.labels)
    grad = input_gradient(params, mask, batch)

    def loss():
        return forward_loss(params, mask, batch)[0]

    assert grad.shape == inputs.shape
    np.testing.assert_allclose(
        grad, numeric_gradient(loss, inputs), rtol=1e-4, atol=1e-7
    )


def test_zero_weights_zero_input_gradient(conv_net, image_batch):
    params = init_params(conv_net, seed=4)
    params = params.with_weights([np.zeros_like(w) for w in params.weights])
    grad = input_gradient(params, full_mask(conv_net), image_batch)
    assert not grad.any()


def test_flat_inputs_are_reshaped():
    net = parse_network("input 1 2 2\nclasses 2\nconv 1->2 k1 pos4\nfc 8->2\n")
    params = init_params(net, seed=0)
    rng = np.random.default_rng(1)
    flat = Batch(rng.random((5, 4)), rng.integers(0, 2, size=5))
    image = Batch(flat.inputs.reshape(5, 1, 2, 2), flat.labels)
    mask = full_mask(net)
    assert forward_loss(params, mask, flat)[0] == forward_loss(params, mask, image)[0]


def test_batch_checks(conv_net, image_batch):
    params = init_params(conv_net, seed=0)
    mask = full_mask(conv_net)
    with pytest.raises(PlanMismatchError):
        Batch(np.zeros((3, 4)), np.zeros(2, dtype=np.int64))
    with pytest.raises(PlanMismatchError, match="labels"):
        backward(params, mask, Batch(image_batch.inputs, image_batch.labels + 3))
    with pytest.raises(PlanMismatchError, match="input shape"):
        backward(params, mask, Batch(np.zeros((2, 1, 6, 6)), np.zeros(2, dtype=int)))


def test_init_is_seeded_kaiming(conv_net):
    first, again = init_params(conv_net, seed=9), init_params(conv_net, seed=9)
    assert all(np.array_equal(a, b) for a, b in zip(first.weights, again.weights))
    assert all(not b.any() for b in first.biases)
    wide = init_params(mlp_network((400, 1, 1), 2, 400, 1), seed=0)
    assert wide.weights[0].std() == pytest.approx(np.sqrt(2 / 400), rel=0.02)


def test_apply_mask(conv_net):
    mask = sample_mask(plan_uniform(conv_net, 0.5), conv_net, seed=2)
    params = apply_mask(init_params(conv_net, seed=1), mask)
    for w, keep in zip(params.weights, mask.layers):
        assert np.all(w[~keep] == 0.0)
        assert not np.signbit(w[~keep]).any()


def test_predict_logits_chunks(conv_net, image_batch):
    params = init_params(conv_net, seed=1)
    mask = full_mask(conv_net)
    _, logits = forward_loss(params, mask, image_batch)
    chunked = predict_logits(params, mask, image_batch.inputs, batch_size=3)
    np.testing.assert_allclose(chunked, logits, rtol=1e-12)
    assert predict_logits(params, mask, image_batch.inputs[:0]).shape == (0, 3)


def test_learning_rate_schedule():
    cifar = RECIPES["cifar_resnet"]
    assert learning_rate(cifar, 0) == 0.1
    assert learning_rate(cifar, 79) == 0.1
    assert learning_rate(cifar, 80) == pytest.approx(0.01)
    assert learning_rate(cifar, 100) == pytest.approx(0.01)
    assert learning_rate(cifar, 130) == pytest.approx(0.001)


def test_recipe_lookup():
    assert TrainConfig.recipe("imagenet_wrn_sparse").decay_milestones == (30, 60, 90)
    with pytest.raises(ValueError, match="unknown recipe"):
        TrainConfig.recipe("mnist")


def test_milestones_validated():
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, decay_milestones=(5, 5))
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, decay_milestones=(10,))


def test_single_sgd_step(conv_net, image_batch):
    mask = sample_mask(plan_uniform(conv_net, 0.5), conv_net, seed=2)
    params = apply_mask(init_params(conv_net, seed=1), mask)
    grads = backward(params, mask, image_batch)
    stepped = sgd_step(params, mask, grads, NO_MOMENTUM, epoch=0)
    for w, g, new in zip(params.weights, grads.weights, stepped.weights):
        np.testing.assert_allclose(new, w - 0.1 * g)
    for b, g, new in zip(params.biases, grads.biases, stepped.biases):
        np.testing.assert_allclose(new, b - 0.1 * g)


def test_zero_gradient_is_a_no_op(conv_net):
    mask = full_mask(conv_net)
    params = init_params(conv_net, seed=1)
    zeros = Gradients(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
    )
    stepped = sgd_step(params, mask, zeros, NO_MOMENTUM, epoch=0)
    assert all(np.array_equal(a, b) for a, b in zip(params.weights, stepped.weights))
    assert all(np.array_equal(a, b) for a, b in zip(params.biases, stepped.biases))


def test_momentum_accumulates(conv_net, image_batch):
    config = NO_MOMENTUM.model_copy(update={"momentum": 0.9})
    mask = full_mask(conv_net)
    params = init_params(conv_net, seed=1)
    first = backward(params, mask, image_batch)
    once = sgd_step(params, mask, first, config, epoch=0)
    second = backward(once, mask, image_batch)
    twice = sgd_step(once, mask, second, config, epoch=0)
    for w1, g1, g2, w2 in zip(
        once.weights, first.weights, second.weights, twice.weights
    ):
        np.testing.assert_allclose(w2, w1 - 0.1 * (0.9 * g1 + g2))


def test_static_sparsity_over_training():
    inputs, labels = gaussian_mixture(4, 1600, 8, noise=0.1, seed=0)
    train = Batch(inputs, labels)
    net = mlp_network((8, 1, 1), 4, 32, 2)
    mask = sample_mask(plan_erk(net, 0.8), net, seed=5)
    config = TrainConfig(
        epochs=5, batch_size=16, learning_rate=0.05, decay_milestones=(3,)
    )
    losses = []
    params = fit(
        init_params(net, seed=6),
        mask,
        train,
        config,
        order_seed=7,
        on_epoch=lambda epoch, params, loss: losses.append(loss),
    )
    # 100 steps per epoch
    assert len(losses) == 5
    assert losses[-1] < losses[0]
    for w, buf, keep in zip(params.weights, params.momentum, mask.layers):
        assert np.all(w[~keep] == 0.0) and not np.signbit(w[~keep]).any()
        assert np.all(buf[~keep] == 0.0) and not np.signbit(buf[~keep]).any()


def test_training_is_deterministic():
    inputs, labels = gaussian_mixture(3, 200, 4, noise=0.1, seed=1)
    train = Batch(inputs, labels)
    net = mlp_network((4, 1, 1), 3, 8, 1)
    mask = sample_mask(plan_erk(net, 0.5), net, seed=0)
    config = TrainConfig(epochs=2, batch_size=32, decay_milestones=())
    runs = [fit(init_params(net, 1), mask, train, config, order_seed=2) for _ in "ab"]
    for a, b in zip(runs[0].weights, runs[1].weights):
        assert np.array_equal(a, b)


def test_epoch_order():
    first = epoch_order(3, 0, 50)
    assert sorted(first) == list(range(50))
    assert np.array_equal(first, epoch_order(3, 0, 50))
    assert not np.array_equal(first, epoch_order(3, 1, 50))


def test_masking_matches_smaller_network():
    inputs, labels = gaussian_mixture(3, 96, 4, noise=0.1, seed=2)
    train = Batch(inputs, labels)
    big_net = mlp_network((4, 1, 1), 3, 8, 1)
    small_net = mlp_network((4, 1, 1), 3, 4, 1)
    big = init_params(big_net, seed=3)

    # Hidden units 4..7 are cut off on both sides
    keep_in = np.zeros((8, 4), dtype=bool)
    keep_in[:4] = True
    keep_out = np.zeros((3, 8), dtype=bool)
    keep_out[:, :4] = True
    mask = Mask(
        names=("fc1", "fc2"),
        layers=(keep_in, keep_out),
        prunable=(True, True),
        seed=0,
        mode="exact",
    )
    small = replace(
        init_params(small_net, seed=0),
        weights=[big.weights[0][:4].copy(), big.weights[1][:, :4].copy()],
        biases=[big.biases[0][:4].copy(), big.biases[1].copy()],
    )

    config = TrainConfig(
        epochs=3, batch_size=16, learning_rate=0.1, decay_milestones=()
    )
    big_losses, small_losses = [], []
    fit(big, mask, train, config, 4, lambda e, p, loss: big_losses.append(loss))
    fit(
        small,
        full_mask(small_net),
        train,
        config,
        4,
        lambda e, p, loss: small_losses.append(loss),
    )
    np.testing.assert_allclose(big_losses, small_losses, rtol=0, atol=1e-10)


def test_hvp_on_quadratic():
    rng = np.random.default_rng(0)
    root = rng.standard_normal((6, 6))
    hessian = root @ root.T + np.eye(6)
    w, v = rng.standard_normal(6), rng.standard_normal(6)
    result = finite_difference_hvp(lambda x: hessian @ x, w, v)
    np.testing.assert_allclose(result, hessian @ v, rtol=1e-5)
    assert not finite_difference_hvp(lambda x: hessian @ x, w, np.zeros(6)).any()

    # GraSP score -w * Hg with g the quadratic's gradient
    g = hessian @ w
    scores = -w * finite_difference_hvp(lambda x: hessian @ x, w, g)
    np.testing.assert_allclose(scores, -w * (hessian @ g), rtol=1e-5)


def analytic_linear_hvp(params, batch, v):
    """Hessian of softmax cross-entropy of a linear classifier times v."""
    x = batch.inputs.reshape(len(batch), -1)
    probs = softmax(x @ params.weights[0].T + params.biases[0], axis=1)
    u = x @ v.T
    s = probs * u - probs * (probs * u).sum(axis=1, keepdims=True)
    return s.T @ x / len(batch)


def test_network_hvp_matches_analytic():
    net = parse_network(LINEAR_NET)
    params = init_params(net, seed=0)
    rng = np.random.default_rng(1)
    batch = Batch(rng.random((20, 6)), rng.integers(0, 3, size=20))
    v = rng.standard_normal((3, 6))
    (result,) = hvp(params, full_mask(net), batch, [v])
    expected = analytic_linear_hvp(params, batch, v)
    np.testing.assert_allclose(result, expected, rtol=1e-5, atol=1e-7)


def test_hvp_is_symmetric():
    net = parse_network(LINEAR_NET)
    params = init_params(net, seed=2)
    rng = np.random.default_rng(3)
    batch = Batch(rng.random((20, 6)), rng.integers(0, 3, size=20))
    u, v = rng.standard_normal((3, 6)), rng.standard_normal((3, 6))
    mask = full_mask(net)
    (hv,) = hvp(params, mask, batch, [v])
    (hu,) = hvp(params, mask, batch, [u])
    assert np.sum(u * hv) == pytest.approx(np.sum(v * hu), rel=1e-4)


def test_snip_scores(conv_net, image_batch):
    params = init_params(conv_net, seed=1)
    grads = backward(params, full_mask(conv_net), image_batch)
    scores = snip_scores(params, image_batch)
    for s, g, w in zip(scores, grads.weights, params.weights):
        np.testing.assert_allclose(s, np.abs(g * w))


def test_ratios_from_scores():
    scores = [np.array([1.0, 2.0, 3.0, 4.0]), np.array([5.0, 6.0])]
    assert ratios_from_scores(scores, 0.5) == [0.25, 1.0]
    # the second layer loses both weights and is floored to one
    assert ratios_from_scores(scores, 0.5, prune_highest=True) == [0.75, 0.5]
    assert ratios_from_scores(scores, 0.0) == [1.0, 1.0]


def test_ratios_ties_are_stable():
    scores = [np.ones(4), np.ones(4)]
    assert ratios_from_scores(scores, 0.5) == [0.25, 1.0]


def test_ranking_across_layers():
    # every first-layer score beats every second-layer score
    scores = [np.full(6, 10.0), np.linspace(0.0, 1.0, 6)]
    assert ratios_from_scores(scores, 0.5) == [1.0, 1 / 6]


def test_snip_ratios(conv_net, image_batch):
    assert snip_ratios(conv_net, 1, image_batch, 0.0) == [1.0, 1.0, 1.0]
    ratios = snip_ratios(conv_net, 1, image_batch, 0.5)
    assert ratios == snip_ratios(conv_net, 1, image_batch, 0.5)
    plan = plan_from_ratios(conv_net, ratios)
    assert plan.global_sparsity == pytest.approx(0.5, abs=4 / plan.total_params)


def test_grasp_ratios(conv_net, image_batch):
    assert grasp_ratios(conv_net, 1, image_batch, 0.0) == [1.0, 1.0, 1.0]
    ratios = grasp_ratios(conv_net, 1, image_batch, 0.7)
    assert all(0 < d <= 1 for d in ratios)
    plan = plan_from_ratios(conv_net, ratios)
    assert plan.global_sparsity == pytest.approx(0.7, abs=4 / plan.total_params)


def test_saliency_needs_samples(conv_net):
    empty = Batch(np.empty((0, 2, 6, 6)), np.empty(0, dtype=np.int64))
    with pytest.raises(SaliencyError):
        snip_ratios(conv_net, 1, empty, 0.5)
    with pytest.raises(SaliencyError):
        grasp_ratios(conv_net, 1, empty, 0.5)


def test_checkpoint_round_trip(tmp_path, image_batch):
    net = parse_network(CONV_NET.replace("fc 4->3", "fc 4->3 nobias"))
    mask = sample_mask(plan_uniform(net, 0.5), net, seed=2)
    params = apply_mask(init_params(net, seed=1), mask)
    _, grads = value_and_grad(params, mask, image_batch)
    config = TrainConfig(epochs=1, decay_milestones=())
    params = sgd_step(params, mask, grads, config, 0)
    rng = layer_generator(5, 3, 1)
    state = {"order_seed": 5, "next": rng.bit_generator.state}
    ckpt = Checkpoint(params, mask, 1, state)

    data = checkpoint_to_bytes(ckpt)
    restored = checkpoint_from_bytes(data)
    assert checkpoint_to_bytes(restored) == data
    assert restored.epoch == 1
    assert restored.mask.equals(mask)
    assert restored.params.net == net
    assert restored.params.biases[-1] is None
    for group in ("weights", "momentum"):
        for a, b in zip(getattr(params, group), getattr(restored.params, group)):
            assert np.array_equal(a, b)

    # the stored generator state continues the same stream
    resumed = layer_generator(0, 0, 0)
    resumed.bit_generator.state = restored.rng_state["next"]
    assert np.array_equal(resumed.random(4), rng.random(4))

    save_checkpoint(ckpt, tmp_path / "checkpoint.bin")
    assert checkpoint_to_bytes(load_checkpoint(tmp_path / "checkpoint.bin")) == data


def test_corrupt_checkpoint(tmp_path, conv_net):
    ckpt = Checkpoint(init_params(conv_net, 0), full_mask(conv_net), 0, {})
    data = checkpoint_to_bytes(ckpt)
    with pytest.raises(ArtifactError, match="truncated"):
        checkpoint_from_bytes(data[:5])
    with pytest.raises(ArtifactError, match="not a checkpoint"):
        checkpoint_from_bytes(b"XXXXXX" + data[6:])
    with pytest.raises(ArtifactError):
        checkpoint_from_bytes(data[:-3])
    with pytest.raises(ArtifactError):
        load_checkpoint(tmp_path / "missing.bin")
