import numpy as np
import pytest
from xlinfluence.enums import STOP_REASON
from xlinfluence.errors import ContractViolation
from xlinfluence.model import SubnetworkMask, init_model, evaluate
from xlinfluence.prune import (HeadImportanceMap, PruneTrace, head_importance, heads_per_step, prune_step,
                               find_subnetwork, shuffle_mask)
from xlinfluence.verify import micro_example


def examples(config, n, offset=0):
    return [micro_example(config, offset + s, uid=offset + s) for s in range(n)]


@pytest.mark.parametrize("total, rate, k", [(8, 0.1, 1), (8, 0.25, 2), (48, 0.1, 4), (144, 0.1, 14)])
def test_heads_per_step(total, rate, k):
    assert heads_per_step(total, rate) == k


def test_prune_step_lowest_importance():
    mask = SubnetworkMask.ones(2, 2)
    importance = HeadImportanceMap(values=np.array([[0.3, 0.1], [0.2, 0.4]]), count=1)
    pruned = prune_step(mask, importance, 0.25)
    assert pruned.bits.tolist() == [[1, 0], [1, 1]]


def test_prune_step_ties_prefer_lower_layer_then_head():
    mask = SubnetworkMask.ones(2, 2)
    pruned = prune_step(mask, HeadImportanceMap(values=np.zeros((2, 2)), count=1), 0.5)
    assert pruned.bits.tolist() == [[0, 1], [0, 1]], "ties must disable layer 0 first"
    again = prune_step(pruned, HeadImportanceMap(values=np.zeros((2, 2)), count=1), 0.25)
    assert again.bits.tolist() == [[0, 0], [0, 1]]


def test_prune_step_contract():
    imp = HeadImportanceMap(values=np.zeros((2, 2)), count=1)
    with pytest.raises(ContractViolation):
        prune_step(SubnetworkMask(np.array([[1, 0], [0, 0]])), imp, 0.5)
    with pytest.raises(ContractViolation):
        prune_step(SubnetworkMask.zeros(2, 2), imp, 0.25)
    with pytest.raises(ContractViolation):
        prune_step(SubnetworkMask.ones(2, 2), imp, 1.0)
    with pytest.raises(ContractViolation):
        HeadImportanceMap(values=np.array([[-1.0]]), count=1)


def test_head_importance(micro_config):
    params = init_model(micro_config, 0)
    mask = SubnetworkMask(np.array([[1, 0], [1, 1]], dtype=np.uint8))
    imp = head_importance(params, examples(micro_config, 4), mask)
    assert imp.values.shape == (2, 2) and imp.count == 4
    assert imp.values[1, 0] > 0.0 and imp.values[0, 1] == 0.0
    threaded = head_importance(params, examples(micro_config, 4), mask, workers=2)
    assert np.allclose(threaded.values, imp.values, rtol=0, atol=1e-15)
    with pytest.raises(ContractViolation):
        head_importance(params, [])


def test_find_subnetwork_exhausts_at_zero_threshold(micro_config):
    params = init_model(micro_config, 0)
    mask, trace = find_subnetwork(params, examples(micro_config, 4), examples(micro_config, 6, 10),
                                  threshold=0.0, rate=0.25)
    assert trace.stop_reason == STOP_REASON.EXHAUSTED
    assert len(trace) == 4 and mask.enabled_count == 0
    for prev, nxt in zip(trace.masks, trace.masks[1:]):
        assert np.all(nxt.bits <= prev.bits), "pruning iterates must be nested"
        assert nxt.sparsity == prev.sparsity + 1


def test_find_subnetwork_respects_threshold(micro_config):
    params = init_model(micro_config, 2)
    dev = examples(micro_config, 8, 20)
    mask, trace = find_subnetwork(params, examples(micro_config, 4), dev, threshold=1.0, rate=0.25)
    assert evaluate(params, dev, mask) >= trace.base_accuracy
    if trace.selected >= 0:
        assert mask == trace.masks[trace.selected]
    else:
        assert mask == SubnetworkMask.full(micro_config)
    if trace.stop_reason != STOP_REASON.EXHAUSTED:
        assert trace.accuracies[-1] < trace.base_accuracy, "the failing iterate stays in the trace"
        assert len(trace) == trace.selected + 2
    with pytest.raises(ContractViolation):
        find_subnetwork(params, examples(micro_config, 2), dev, threshold=1.5)


def test_shuffle_mask():
    mask = SubnetworkMask(np.array([[1, 0, 0, 1], [0, 0, 1, 0], [0, 0, 0, 1]], dtype=np.uint8))
    a, b = shuffle_mask(mask, 0), shuffle_mask(mask, 0)
    assert a == b, "shuffle is not deterministic"
    assert a.sparsity == mask.sparsity and a.bits.shape == mask.bits.shape
    assert any(shuffle_mask(mask, s) != mask for s in range(5))


def test_trace_save_load(tmp_path):
    trace = PruneTrace(base_accuracy=0.8, threshold=0.95, rate=0.1,
                       masks=[SubnetworkMask(np.array([[1, 0], [1, 1]])), SubnetworkMask(np.array([[1, 0], [0, 1]]))],
                       accuracies=[0.79, 0.5], stop_reason=STOP_REASON.THRESHOLD, selected=0)
    path = trace.save(str(tmp_path), stem="en")
    again = PruneTrace.load(path)
    assert again.masks == trace.masks and again.accuracies == trace.accuracies
    assert again.stop_reason == STOP_REASON.THRESHOLD and again.selected_accuracy == 0.79
