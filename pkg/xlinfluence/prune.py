"""
Language-specific subnetworks by iterative head pruning.
"""
import os
import json
import math
import logging
import concurrent.futures
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union
import numpy as np
from tqdm import tqdm
from xlinfluence.enums import STOP_REASON, PRUNING, FILES
from xlinfluence.errors import ContractViolation, FormatError
from xlinfluence.model import Example, Parameters, SubnetworkMask, evaluate, gate_grad


logger = logging.getLogger("root_logger")


@dataclass(frozen=True)
class HeadImportanceMap:
    """
    Mean absolute gate gradient per head (heads x layers) and the number of
    examples it was estimated on.
    """
    values: np.ndarray
    count: int

    def __post_init__(self):
        if not (np.all(np.isfinite(self.values)) and np.all(self.values >= 0)):
            raise ContractViolation("Head importance must be finite and non-negative.")


def head_importance(params: Parameters,
                    examples: Sequence[Example],
                    mask: Optional[SubnetworkMask] = None,
                    workers: int = 1,
                    progress: bool = False
                    ) -> HeadImportanceMap:
    """
    Expected absolute sensitivity of the loss to each head gate.

    Parameters
    ----------
    params: Parameters
    examples: Sequence[Example]
        One language's training slice.
    mask: Optional[SubnetworkMask]
        Current gates; defaults to the full model. Disabled heads get 0.
    workers: int, default=1
        Thread pool size; the sum runs in input order.

    Raises
    -------
    ContractViolation:
        If `examples` is empty.

    Returns
    -------
    HeadImportanceMap
    """
    examples = list(examples)
    if not examples:
        raise ContractViolation("head_importance needs a non-empty slice.")
    mask = mask if mask is not None else SubnetworkMask.full(params.config)
    total = np.zeros(mask.bits.shape, dtype=np.float64)
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            results = executor.map(lambda ex: gate_grad(params, ex, mask), examples)
            for g in tqdm(results, total=len(examples), desc="importance", disable=not progress):
                total += np.abs(g.values)
    else:
        for ex in tqdm(examples, desc="importance", disable=not progress):
            total += np.abs(gate_grad(params, ex, mask).values)
    values = total / len(examples)
    values[mask.bits == 0] = 0.0
    return HeadImportanceMap(values=values, count=len(examples))


def heads_per_step(total_heads: int, rate: float) -> int:
    return max(1, math.floor(rate * total_heads))


def prune_step(mask: SubnetworkMask, importance: HeadImportanceMap, rate: float) -> SubnetworkMask:
    """
    Disable the `max(1, floor(rate * total_heads))` enabled heads of lowest
    importance. Ties go to the lower (layer, head).

    Raises
    -------
    ContractViolation:
        If `rate` is outside (0, 1), no head is enabled, or fewer enabled heads
        remain than would be removed.
    """
    if not 0.0 < rate < 1.0:
        raise ContractViolation(f"rate must lie in (0, 1), got {rate}")
    if importance.values.shape != mask.bits.shape:
        raise ContractViolation("Importance map and mask shapes differ.")
    if mask.enabled_count == 0:
        raise ContractViolation("All heads are already disabled.")
    k = heads_per_step(mask.size, rate)
    if k > mask.enabled_count:
        raise ContractViolation(f"Cannot disable {k} heads; only {mask.enabled_count} remain enabled.")
    heads, layers = np.nonzero(mask.bits)
    scores = importance.values[heads, layers]
    order = np.lexsort((heads, layers, scores))[:k]
    bits = mask.bits.copy()
    bits[heads[order], layers[order]] = 0
    return SubnetworkMask(bits)


@dataclass
class PruneTrace:
    """
    Every pruning iterate with its dev accuracy. `selected` indexes the
    returned iterate (-1 for the unpruned all-ones mask).
    """
    base_accuracy: float
    threshold: float
    rate: float
    masks: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)
    stop_reason: Optional[STOP_REASON] = None
    selected: int = -1

    def __len__(self) -> int:
        return len(self.masks)

    @property
    def selected_accuracy(self) -> float:
        return self.base_accuracy if self.selected < 0 else self.accuracies[self.selected]

    def save(self, directory: Union[str, os.PathLike], stem: str = "trace") -> str:
        os.makedirs(directory, exist_ok=True)
        files = []
        for i, m in enumerate(self.masks):
            fname = f"{stem}_iter_{i + 1}{FILES.MASK_SUFFIX.value}"
            m.save(os.path.join(directory, fname))
            files.append(fname)
        path = os.path.join(directory, f"{stem}.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"base_accuracy": self.base_accuracy, "threshold": self.threshold,
                       "rate": self.rate, "stop_reason": self.stop_reason.value if self.stop_reason else None,
                       "selected": self.selected,
                       "iterations": [{"mask": fn, "accuracy": a} for fn, a in zip(files, self.accuracies)]},
                      f, indent=2)
        return path

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "PruneTrace":
        directory = os.path.dirname(os.path.abspath(path))
        try:
            with open(path, encoding="utf-8") as f:
                obj = json.load(f)
            trace = cls(base_accuracy=float(obj["base_accuracy"]), threshold=float(obj["threshold"]),
                        rate=float(obj["rate"]),
                        stop_reason=STOP_REASON(obj["stop_reason"]) if obj["stop_reason"] else None,
                        selected=int(obj["selected"]))
            for it in obj["iterations"]:
                trace.masks.append(SubnetworkMask.load(os.path.join(directory, it["mask"])))
                trace.accuracies.append(float(it["accuracy"]))
        except (KeyError, ValueError) as e:
            raise FormatError(f"Malformed prune trace {path}: {e}") from e
        return trace


def find_subnetwork(params: Parameters,
                    train_slice: Sequence[Example],
                    dev_slice: Sequence[Example],
                    threshold: float = PRUNING.THRESHOLD.value,
                    rate: float = PRUNING.RATE.value,
                    workers: int = 1,
                    progress: bool = False
                    ) -> tuple[SubnetworkMask, PruneTrace]:
    """
    Iterate importance estimation, pruning and dev evaluation without
    retraining, and return the last mask whose dev accuracy is at least
    `threshold` times the unpruned accuracy.

    The iterate that falls below the threshold is kept in the trace but not
    returned. When the very first iterate already falls below, the all-ones
    mask is returned with stop reason `none-prunable`; when the next step
    would need more heads than remain enabled the reason is `exhausted`.

    Returns
    -------
    tuple[SubnetworkMask, PruneTrace]
    """
    if not 0.0 <= threshold <= 1.0:
        raise ContractViolation(f"threshold must lie in [0, 1], got {threshold}")
    mask = SubnetworkMask.full(params.config)
    base = evaluate(params, dev_slice, mask)
    trace = PruneTrace(base_accuracy=base, threshold=threshold, rate=rate)
    k = heads_per_step(mask.size, rate)
    with tqdm(total=mask.size // k, desc="pruning", disable=not progress) as bar:
        while True:
            if k > mask.enabled_count:
                trace.stop_reason = STOP_REASON.EXHAUSTED
                break
            importance = head_importance(params, train_slice, mask, workers=workers)
            candidate = prune_step(mask, importance, rate)
            acc = evaluate(params, dev_slice, candidate)
            trace.masks.append(candidate)
            trace.accuracies.append(acc)
            bar.update(1)
            if acc < threshold * base:
                trace.stop_reason = STOP_REASON.NONE_PRUNABLE if len(trace) == 1 else STOP_REASON.THRESHOLD
                break
            mask = candidate
            trace.selected = len(trace) - 1
    logger.info(f"Pruning stopped ({trace.stop_reason.value}) with {mask.sparsity} of {mask.size} "
                f"heads disabled; dev accuracy {trace.selected_accuracy:.4f} vs base {base:.4f}")
    return mask, trace


def shuffle_mask(mask: SubnetworkMask, seed: int) -> SubnetworkMask:
    """
    Uniformly random permutation of all bits; sparsity is preserved.
    """
    rng = np.random.default_rng(seed)
    flat = mask.bits.reshape(-1)
    return SubnetworkMask(flat[rng.permutation(flat.size)].reshape(mask.bits.shape))
