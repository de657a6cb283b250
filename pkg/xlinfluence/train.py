"""
Full fine-tuning and sparse fine-tuning (SFT) with AdamW and per-epoch
checkpoints.
"""
import os
import json
import time
import logging
from dataclasses import dataclass, replace
from typing import Iterator, Optional, Union
import numpy as np
from tqdm import tqdm
from xlinfluence.config import TrainConfig
from xlinfluence.data import Corpus, corpus_hash, language_slice
from xlinfluence.enums import MODE, BATCHING, TASK, FILES
from xlinfluence.errors import (ConfigurationError, ContractViolation, NumericalError,
                                TrainingError, FormatError)
from xlinfluence.model import (Parameters, SubnetworkMask, batch_loss_and_grad, evaluate)
from xlinfluence.stores.optimizer_store import OptimizerNPZ
from xlinfluence.utils.hashing_utils import sha256_file


logger = logging.getLogger("root_logger")


@dataclass(frozen=True)
class OptimizerState:
    """
    AdamW moments aligned to the flat parameter layout.
    """
    m: np.ndarray
    v: np.ndarray
    step: int
    learning_rate: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float

    @classmethod
    def zeros(cls, p: int, config: TrainConfig, task: Optional[TASK] = None) -> "OptimizerState":
        return cls(m=np.zeros(p), v=np.zeros(p), step=0,
                   learning_rate=config.resolved_learning_rate(task),
                   beta1=config.beta1, beta2=config.beta2, eps=config.eps,
                   weight_decay=config.weight_decay)

    def hyper(self) -> np.ndarray:
        return np.array([self.learning_rate, self.beta1, self.beta2, self.eps, self.weight_decay])

    def save(self, path: Union[str, os.PathLike]) -> None:
        OptimizerNPZ(path).write(m=self.m, v=self.v, step=self.step, hyper=self.hyper())
        return

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "OptimizerState":
        arrays = OptimizerNPZ(path).read()
        lr, b1, b2, eps, wd = (float(x) for x in arrays["hyper"])
        return cls(m=arrays["m"].astype(np.float64), v=arrays["v"].astype(np.float64),
                   step=int(arrays["step"]), learning_rate=lr, beta1=b1, beta2=b2,
                   eps=eps, weight_decay=wd)

    def equals(self, other: "OptimizerState") -> bool:
        return (self.step == other.step and np.array_equal(self.m, other.m)
                and np.array_equal(self.v, other.v) and np.array_equal(self.hyper(), other.hyper()))


def adamw_step(state: OptimizerState,
               params: Parameters,
               grad: np.ndarray,
               update_mask: Optional[np.ndarray] = None
               ) -> tuple[OptimizerState, Parameters]:
    """
    One AdamW update with decoupled weight decay.

    Coordinates where `update_mask` is False are frozen: no gradient step, no
    decay and no moment update. The step counter advances regardless.

    Raises
    -------
    ContractViolation:
        If lengths disagree.
    NumericalError:
        If the gradient has non-finite entries.
    """
    theta = params.flat
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise ContractViolation(f"Gradient ({grad.shape}), moments ({state.m.shape}) and "
                                f"parameters ({theta.shape}) must be aligned.")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("Non-finite gradient passed to adamw_step")
    t = state.step + 1
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new = theta * (1.0 - lr * state.weight_decay) - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if update_mask is not None:
        new = np.where(update_mask, new, theta)
        m = np.where(update_mask, m, state.m)
        v = np.where(update_mask, v, state.v)
    return replace(state, m=m, v=v, step=t), params.replace(new)


def train_step(state: OptimizerState,
               params: Parameters,
               examples: list,
               mask: Optional[SubnetworkMask] = None,
               update_mask: Optional[np.ndarray] = None
               ) -> tuple[float, OptimizerState, Parameters]:
    """
    One optimizer step on a batch run through `mask`. Gradients outside
    `update_mask` are zeroed before AdamW sees them, so those coordinates stay
    bit-identical.
    """
    loss, grad = batch_loss_and_grad(params, examples, mask)
    if update_mask is not None:
        grad = np.where(update_mask, grad, 0.0)
    state, params = adamw_step(state, params, grad, update_mask)
    return loss, state, params


@dataclass(frozen=True)
class Checkpoint:
    epoch: int
    params: Parameters
    dev_accuracy: dict


class CheckpointStore:
    """
    Per-epoch parameter snapshots with their dev accuracies.

    Persisted as a directory holding `manifest.json` and one
    `epoch_<e>.params` file per epoch, plus the latest optimizer state.
    """
    def __init__(self, provenance: Optional[dict] = None) -> None:
        self.checkpoints: list[Checkpoint] = []
        self.provenance = dict(provenance or {})
        self.optimizer: Optional[OptimizerState] = None

    def __len__(self) -> int:
        return len(self.checkpoints)

    def __iter__(self) -> Iterator[Checkpoint]:
        return iter(self.checkpoints)

    def __getitem__(self, i) -> Checkpoint:
        return self.checkpoints[i]

    def __repr__(self):
        return f"CheckpointStore(epochs={self.epochs})"

    @property
    def epochs(self) -> list[int]:
        return [c.epoch for c in self.checkpoints]

    @property
    def final(self) -> Checkpoint:
        if not self.checkpoints:
            raise ContractViolation("CheckpointStore is empty.")
        return self.checkpoints[-1]

    def params(self) -> list[Parameters]:
        return [c.params for c in self.checkpoints]

    def append(self, checkpoint: Checkpoint) -> None:
        if self.checkpoints and checkpoint.epoch <= self.checkpoints[-1].epoch:
            raise ContractViolation(f"Epoch {checkpoint.epoch} does not follow "
                                    f"{self.checkpoints[-1].epoch}")
        self.checkpoints.append(checkpoint)
        return

    def save(self, directory: Union[str, os.PathLike]) -> None:
        os.makedirs(directory, exist_ok=True)
        entries = []
        for c in self.checkpoints:
            fname = f"epoch_{c.epoch}{FILES.PARAMS_SUFFIX.value}"
            fpath = os.path.join(directory, fname)
            if not os.path.isfile(fpath):
                c.params.save(fpath)
            entries.append({"epoch": c.epoch, "file": fname, "sha256": sha256_file(fpath),
                            "dev_accuracy": c.dev_accuracy})
        if self.optimizer is not None:
            self.optimizer.save(os.path.join(directory, "optimizer.npz"))
        with open(os.path.join(directory, FILES.MANIFEST.value), "w", encoding="utf-8") as f:
            json.dump({"provenance": self.provenance, "checkpoints": entries}, f, indent=2, sort_keys=True)
        return

    @classmethod
    def load(cls, directory: Union[str, os.PathLike], verify: bool = True) -> "CheckpointStore":
        """
        Raises
        --------
        FileNotFoundError:
            If the manifest is missing.
        FormatError:
            If a snapshot's hash disagrees with the manifest.
        """
        manifest = os.path.join(directory, FILES.MANIFEST.value)
        if not os.path.isfile(manifest):
            raise FileNotFoundError(f"Checkpoint manifest not found at: {manifest}")
        with open(manifest, encoding="utf-8") as f:
            obj = json.load(f)
        store = cls(provenance=obj.get("provenance"))
        for e in obj["checkpoints"]:
            fpath = os.path.join(directory, e["file"])
            if verify and sha256_file(fpath) != e["sha256"]:
                raise FormatError(f"Checkpoint {fpath} does not match its manifest hash")
            store.append(Checkpoint(epoch=int(e["epoch"]), params=Parameters.load(fpath),
                                    dev_accuracy={k: float(v) for k, v in e["dev_accuracy"].items()}))
        opt = os.path.join(directory, "optimizer.npz")
        if os.path.isfile(opt):
            store.optimizer = OptimizerState.load(opt)
        return store


def batch_schedule(corpus: Corpus,
                   batch_size: int,
                   batching: BATCHING,
                   rng: np.random.Generator
                   ) -> list[tuple[Optional[str], np.ndarray]]:
    """
    Batches of one epoch as (language, positions). Mixed batches have language
    None; homogeneous batches are built per language and drawn in random order.
    """
    if batching == BATCHING.MIXED:
        perm = rng.permutation(len(corpus))
        return [(None, perm[i:i + batch_size]) for i in range(0, len(perm), batch_size)]
    batches = []
    for lang in corpus.languages:
        positions = np.asarray(corpus.index.get(lang, ()), dtype=np.int64)
        if positions.size == 0:
            continue
        perm = positions[rng.permutation(positions.size)]
        batches += [(lang, perm[i:i + batch_size]) for i in range(0, perm.size, batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def _dev_accuracy(params: Parameters, dev: Optional[Corpus], masks: Optional[dict]) -> dict:
    if dev is None or len(dev) == 0:
        return {}
    acc = {}
    for lang in dev.languages:
        if not dev.index.get(lang):
            continue
        mask = masks[lang] if masks else SubnetworkMask.full(params.config)
        acc[lang] = evaluate(params, language_slice(dev, lang), mask)
    return acc


def _provenance(params: Parameters, corpus: Corpus, config: TrainConfig, masks: Optional[dict]) -> dict:
    return {"config_hash": config.content_hash(),
            "corpus_hash": corpus_hash(corpus),
            "init_hash": params.content_hash(),
            "masks": {k: m.content_hash() for k, m in sorted((masks or {}).items())}}


def _run(params: Parameters,
         corpus: Corpus,
         config: TrainConfig,
         dev: Optional[Corpus],
         masks: Optional[dict],
         batching: BATCHING,
         task: Optional[TASK],
         checkpoint_dir: Optional[str],
         progress: bool
         ) -> CheckpointStore:
    if len(corpus) == 0:
        raise ContractViolation("Cannot train on an empty corpus.")
    provenance = _provenance(params, corpus, config, masks)
    store, state = CheckpointStore(provenance), OptimizerState.zeros(params.layout.size, config, task)
    if checkpoint_dir and os.path.isfile(os.path.join(checkpoint_dir, FILES.MANIFEST.value)):
        previous = CheckpointStore.load(checkpoint_dir)
        if previous.provenance == provenance and previous.optimizer is not None and len(previous):
            store, state, params = previous, previous.optimizer, previous.final.params
            logger.info(f"Resuming training after epoch {store.final.epoch} from {checkpoint_dir}")
    keep = {lang: params.layout.expand_mask(m) for lang, m in (masks or {}).items()}
    start = store.final.epoch + 1 if len(store) else 1
    for epoch in tqdm(range(start, config.epochs + 1), desc=f"{config.mode.value} epochs",
                      disable=not progress):
        t0 = time.time()
        rng = np.random.default_rng([config.seed, epoch])
        losses = []
        for step, (lang, positions) in enumerate(batch_schedule(corpus, config.batch_size, batching, rng)):
            examples = [corpus.examples[i] for i in positions]
            mask, update = None, None
            if masks is not None:
                if lang not in masks:
                    raise ConfigurationError(f"No SFT mask for language '{lang}'")
                mask, update = masks[lang], keep[lang]
            try:
                loss, state, params = train_step(state, params, examples, mask, update)
            except NumericalError as e:
                raise TrainingError(f"Divergence ({e})", epoch=epoch, step=step) from e
            losses.append(loss)
        dev_acc = _dev_accuracy(params, dev, masks)
        store.append(Checkpoint(epoch=epoch, params=params, dev_accuracy=dev_acc))
        store.optimizer = state
        rounded = {k: round(v, 4) for k, v in dev_acc.items()}
        logger.info(f"epoch {epoch}: mean loss {np.mean(losses):.4f}, "
                    f"dev accuracy {rounded} ({time.time() - t0:.1f}s)")
        if checkpoint_dir:
            store.save(checkpoint_dir)
    return store


def train_full(params: Parameters,
               corpus: Corpus,
               config: TrainConfig,
               dev: Optional[Corpus] = None,
               task: Optional[TASK] = None,
               checkpoint_dir: Optional[str] = None,
               progress: bool = False
               ) -> CheckpointStore:
    """
    Fine-tune every parameter on the multilingual corpus.

    Parameters
    ----------
    params: Parameters
        Starting point (normally `init_model`).
    corpus: Corpus
        Training corpus; all languages concatenated.
    config: TrainConfig
        `mode` must be `full`; `batching` selects mixed (default) or
        language-homogeneous batches.
    dev: Optional[Corpus]
        Scored after every epoch, per language.
    checkpoint_dir: Optional[str]
        When given, the store is written there after each epoch and an
        interrupted run with the same provenance resumes from it.

    Raises
    -------
    ContractViolation:
        If `config.mode` is not `full`.
    TrainingError:
        On a non-finite loss or gradient, naming epoch and step.

    Returns
    -------
    CheckpointStore
        One snapshot per epoch.
    """
    if config.mode != MODE.FULL:
        raise ContractViolation(f"train_full needs mode='full', got '{config.mode.value}'")
    return _run(params, corpus, config, dev, None, config.batching, task, checkpoint_dir, progress)


def train_sft(params: Parameters,
              corpus: Corpus,
              config: TrainConfig,
              dev: Optional[Corpus] = None,
              task: Optional[TASK] = None,
              checkpoint_dir: Optional[str] = None,
              progress: bool = False
              ) -> CheckpointStore:
    """
    Sparse fine-tuning: language-homogeneous batches, each run through its
    language's mask, with the parameters of that mask's disabled heads frozen.

    Raises
    -------
    ContractViolation:
        If `config.mode` is not `sft`.
    ConfigurationError:
        If a training language has no mask, or a mask does not fit the model.
    """
    if config.mode != MODE.SFT:
        raise ContractViolation(f"train_sft needs mode='sft', got '{config.mode.value}'")
    masks = config.masks or {}
    missing = [lang for lang in corpus.languages if corpus.index.get(lang) and lang not in masks]
    if missing:
        raise ConfigurationError(f"No SFT mask for language(s) {missing}")
    for lang, m in masks.items():
        if not isinstance(m, SubnetworkMask):
            raise ConfigurationError(f"SFT mask for '{lang}' is not a SubnetworkMask")
        try:
            m.check_shape(params.config)
        except ContractViolation as e:
            raise ConfigurationError(str(e)) from e
    return _run(params, corpus, config, dev, masks, BATCHING.HOMOGENEOUS, task, checkpoint_dir, progress)
