import json
import numpy as np
import pytest
from xlinfluence.errors import ContractViolation, FormatError
from xlinfluence.model import (Example, Parameters, SubnetworkMask, init_model, forward, forward_batch,
                               loss_and_grad, gate_grad, gated_loss, per_example_gradients, predict,
                               evaluate, parameter_count)
from xlinfluence.verify import gradient_checks, micro_example, relative_error


def test_init_is_deterministic(micro_config):
    a, b, c = init_model(micro_config, 0), init_model(micro_config, 0), init_model(micro_config, 1)
    assert a.equals(b), "same seed produced different parameters"
    assert not a.equals(c), "different seeds produced identical parameters"
    assert a.flat.size == parameter_count(micro_config)


def test_layer_norm_and_bias_init(micro_config):
    arrays = init_model(micro_config, 0).unflatten()
    assert np.all(arrays["embed.norm.gain"] == 1.0)
    assert np.all(arrays["layers.0.attn.query_bias"] == 0.0)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_probabilities(micro_config, seed):
    params = init_model(micro_config, seed)
    probs = forward(params, micro_example(micro_config, seed), SubnetworkMask.full(micro_config))
    assert probs.shape == (micro_config.num_classes,)
    assert np.all(probs >= 0), f"negative probability for seed {seed}"
    assert abs(probs.sum() - 1.0) < 1e-9, f"probabilities do not sum to 1 for seed {seed}"


def test_all_ones_mask_equals_ungated(micro_config):
    params = init_model(micro_config, 0)
    examples = [micro_example(micro_config, s, uid=s) for s in range(4)]
    gated = forward_batch(params, examples, SubnetworkMask.full(micro_config))
    ungated = forward_batch(params, examples, None)
    assert np.allclose(gated, ungated, rtol=0, atol=1e-12)


def test_all_zero_mask_still_classifies(micro_config):
    params = init_model(micro_config, 0)
    probs = forward(params, micro_example(micro_config, 0), SubnetworkMask.zeros(2, 2))
    assert abs(probs.sum() - 1.0) < 1e-9


def test_all_zero_mask_ignores_attention_parameters(micro_config):
    params = init_model(micro_config, 0)
    attention = np.zeros(params.layout.size, dtype=bool)
    for layer in range(micro_config.num_layers):
        attention |= params.layout.prefix_selector(f"layers.{layer}.attn.")
    noise = np.random.default_rng(1).normal(0.0, 1.0, size=params.layout.size)
    perturbed = params.replace(np.where(attention, params.flat + noise, params.flat))
    exs = [micro_example(micro_config, s) for s in range(4)]
    zeros = SubnetworkMask.zeros(2, 2)
    assert np.allclose(forward_batch(perturbed, exs, zeros), forward_batch(params, exs, zeros),
                       rtol=0, atol=1e-12), "attention parameters leak through an all-zero mask"
    assert not np.allclose(forward_batch(perturbed, exs), forward_batch(params, exs)), \
        "the perturbation should matter for the ungated model"


def test_mask_shape_is_checked(micro_config):
    params = init_model(micro_config, 0)
    with pytest.raises(ContractViolation):
        forward(params, micro_example(micro_config, 0), SubnetworkMask.ones(3, 2))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(seed):
    results = gradient_checks(seeds=[seed], max_coordinates=150)
    for r in results:
        assert r.passed, f"{r.name} ({r.detail}): relative error {r.value:.2e} >= {r.threshold:.0e}"


@pytest.mark.parametrize("analytic, numeric, expected", [
    ([2.0, 0.0], [1.0, 0.0], 0.5),
    ([1.0, 1e-9], [1.0, 2e-9], 1e-9),
    ([0.0, 0.0], [0.0, 0.0], 0.0),
])
def test_relative_error_is_norm_wise(analytic, numeric, expected):
    assert relative_error(np.array(analytic), np.array(numeric)) == pytest.approx(expected, abs=1e-15)


def test_disabled_head_gets_zero_gradient(micro_config):
    params = init_model(micro_config, 3)
    bits = np.ones((2, 2), dtype=np.uint8)
    bits[1, 0] = 0
    g = loss_and_grad(params, micro_example(micro_config, 3), SubnetworkMask(bits)).values
    for s in params.layout.head_slices(layer=0, head=1):
        assert np.all(g[s] == 0.0), f"disabled head parameters at {s} received gradient"
    assert np.any(g[params.layout.head_slices(layer=0, head=0)[0]] != 0.0)


def test_gate_gradient_reports_disabled_heads(micro_config):
    params = init_model(micro_config, 0)
    mask = SubnetworkMask(np.array([[1, 0], [1, 1]], dtype=np.uint8))
    gg = gate_grad(params, micro_example(micro_config, 0), mask)
    assert gg.values.shape == (2, 2)
    assert gg.disabled.tolist() == [[False, True], [False, False]]
    assert abs(gg.loss - gated_loss(params, micro_example(micro_config, 0), mask.bits)) < 1e-12


def test_batch_gradient_is_mean_of_examples(micro_config):
    from xlinfluence.model import batch_loss_and_grad
    params = init_model(micro_config, 0)
    examples = [micro_example(micro_config, s, uid=s) for s in range(3)]
    grads, losses = per_example_gradients(params, examples)
    loss, grad = batch_loss_and_grad(params, examples)
    assert abs(loss - losses.mean()) < 1e-12
    assert np.allclose(grad, grads.mean(axis=0), rtol=0, atol=1e-12)


def test_threaded_gradients_match_serial(micro_config):
    params = init_model(micro_config, 0)
    examples = [micro_example(micro_config, s, uid=s) for s in range(6)]
    serial, _ = per_example_gradients(params, examples, workers=1)
    threaded, _ = per_example_gradients(params, examples, workers=3)
    assert np.array_equal(serial, threaded), "thread pool changed gradient order or values"


def test_predict_and_evaluate(micro_config):
    params = init_model(micro_config, 0)
    examples = [micro_example(micro_config, s, uid=s) for s in range(5)]
    preds = predict(params, examples)
    acc = evaluate(params, examples)
    assert acc == pytest.approx(np.mean(preds == np.array([ex.label for ex in examples])))
    with pytest.raises(ContractViolation):
        evaluate(params, [])


def test_example_bounds(micro_config):
    bad = Example(uid=9, tokens=(1, 99), label=0, language="xx", latent_id=9)
    with pytest.raises(ContractViolation):
        forward(init_model(micro_config, 0), bad)


def test_parameters_save_load(tmp_path, micro_config):
    params = init_model(micro_config, 5)
    path = str(tmp_path / "p.params")
    params.save(path)
    again = Parameters.load(path)
    assert again.equals(params) and again.content_hash() == params.content_hash()
    (tmp_path / "junk.params").write_bytes(b"nope")
    with pytest.raises(FormatError):
        Parameters.load(str(tmp_path / "junk.params"))


def test_parameters_are_read_only(micro_config):
    params = init_model(micro_config, 0)
    with pytest.raises(ValueError):
        params.flat[0] = 1.0


def test_mask_json_is_layer_major(tmp_path):
    mask = SubnetworkMask(np.array([[1, 0, 1], [0, 1, 1]], dtype=np.uint8))
    obj = json.loads(mask.to_json())
    assert obj["layers"] == 3 and obj["heads"] == 2
    assert obj["bits"] == [[1, 0], [0, 1], [1, 1]]
    path = str(tmp_path / "m.mask.json")
    mask.save(path)
    assert SubnetworkMask.load(path) == mask
    assert mask.sparsity == 2 and mask.enabled_count == 4
    assert mask.enabled() == {(0, 0), (1, 1), (2, 0), (2, 1)}


@pytest.mark.parametrize("bits", [np.array([[2, 0]]), np.array([1, 0, 1]), np.array([[0.5, 1.0]])])
def test_invalid_mask_bits(bits):
    with pytest.raises(ContractViolation):
        SubnetworkMask(bits)


def test_expand_mask(micro_config):
    layout = init_model(micro_config, 0).layout
    mask = SubnetworkMask(np.array([[1, 0], [1, 1]], dtype=np.uint8))
    keep = layout.expand_mask(mask)
    frozen = np.flatnonzero(~keep)
    expected = np.concatenate([np.arange(s.start, s.stop) for s in layout.head_slices(layer=1, head=0)])
    assert np.array_equal(frozen, np.sort(expected))
