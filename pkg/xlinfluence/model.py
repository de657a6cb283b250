"""
Micro transformer encoder classifier with per-head gates.

Every attention head's output is multiplied by its gate before the output
projection, so a binary `SubnetworkMask` disables heads and the derivative of
the loss with respect to a gate (`gate_grad`) is the head-importance signal.
All arithmetic is float64 and there are no stochastic layers, so per-example
gradients are exact and reproducible.
"""
import json
import math
import logging
import concurrent.futures
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Optional, Sequence, Union
import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm
from xlinfluence.config import ModelConfig
from xlinfluence.enums import TOKENS
from xlinfluence.errors import ConfigurationError, ContractViolation, NumericalError, FormatError
from xlinfluence.stores.params_store import ParamsFile
from xlinfluence.utils.hashing_utils import sha256_array, sha256_text


logger = logging.getLogger("root_logger")
DTYPE = torch.float64
LN_EPS = 1e-5


@dataclass(frozen=True)
class Block:
    """
    A named parameter tensor inside the flat parameter vector.
    """
    name: str
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.offset + self.size

    @property
    def matrix_shape(self) -> tuple[int, int]:
        """
        2-D view used by factored sketches: leading axes are merged into rows,
        vectors become single columns.
        """
        if len(self.shape) == 1:
            return self.shape[0], 1
        return int(np.prod(self.shape[:-1])), self.shape[-1]


class ParameterLayout:
    """
    Stable flat index layout of the model parameters.

    Parameters
    ----------
    blocks: Sequence[tuple[str, tuple]]
        Ordered (name, shape) pairs.
    head_blocks: Optional[dict[int, list[str]]]
        For each layer, names of blocks whose first axis indexes attention heads.
    """
    def __init__(self,
                 blocks: Sequence[tuple[str, tuple]],
                 head_blocks: Optional[dict[int, list[str]]] = None
                 ) -> None:
        offset, self.blocks = 0, []
        for name, shape in blocks:
            b = Block(name=name, shape=tuple(int(s) for s in shape), offset=offset)
            self.blocks.append(b)
            offset = b.stop
        self.size = offset
        self._by_name = {b.name: b for b in self.blocks}
        if len(self._by_name) != len(self.blocks):
            raise ConfigurationError("Duplicate block names in parameter layout.")
        self.head_blocks = head_blocks or {}
        return

    def __repr__(self):
        return f"ParameterLayout(blocks={len(self.blocks)}, size={self.size})"

    def __getitem__(self, name: str) -> Block:
        return self._by_name[name]

    def __eq__(self, other) -> bool:
        return isinstance(other, ParameterLayout) and self.descriptor() == other.descriptor()

    def __hash__(self):
        return hash(self.content_hash())

    @classmethod
    def for_config(cls, config: ModelConfig) -> "ParameterLayout":
        D, H, F_, S = config.model_dim, config.heads_per_layer, config.ffn_dim, config.max_seq_len
        dh, Ch, K = config.head_dim, config.classifier_hidden_dim, config.num_classes
        blocks = [("embed.token", (config.vocab_size, D)),
                  ("embed.position", (S, D)),
                  ("embed.norm.gain", (D,)),
                  ("embed.norm.bias", (D,))]
        head_blocks = {}
        for layer in range(config.num_layers):
            p = f"layers.{layer}"
            per_head = [(f"{p}.attn.query", (H, D, dh)), (f"{p}.attn.query_bias", (H, dh)),
                        (f"{p}.attn.key", (H, D, dh)), (f"{p}.attn.key_bias", (H, dh)),
                        (f"{p}.attn.value", (H, D, dh)), (f"{p}.attn.value_bias", (H, dh)),
                        (f"{p}.attn.output", (H, dh, D))]
            head_blocks[layer] = [name for name, _ in per_head]
            blocks += per_head
            blocks += [(f"{p}.norm1.gain", (D,)), (f"{p}.norm1.bias", (D,)),
                       (f"{p}.ffn.in", (D, F_)), (f"{p}.ffn.in_bias", (F_,)),
                       (f"{p}.ffn.out", (F_, D)), (f"{p}.ffn.out_bias", (D,)),
                       (f"{p}.norm2.gain", (D,)), (f"{p}.norm2.bias", (D,))]
        blocks += [("classifier.hidden", (D, Ch)), ("classifier.hidden_bias", (Ch,)),
                   ("classifier.output", (Ch, K)), ("classifier.output_bias", (K,))]
        return cls(blocks, head_blocks)

    def descriptor(self) -> list[dict]:
        return [{"name": b.name, "shape": list(b.shape), "offset": b.offset} for b in self.blocks]

    def content_hash(self) -> str:
        return sha256_text(json.dumps(self.descriptor()))

    def head_slices(self, layer: int, head: int) -> list[slice]:
        """
        Flat index ranges of all parameters private to head `head` of `layer`.
        """
        slices = []
        for name in self.head_blocks.get(layer, []):
            b = self._by_name[name]
            per_head = b.size // b.shape[0]
            start = b.offset + head * per_head
            slices.append(slice(start, start + per_head))
        return slices

    def expand_mask(self, mask: "SubnetworkMask") -> np.ndarray:
        """
        Boolean vector over the flat layout: False exactly on the parameters of
        heads disabled in `mask`; every non-head coordinate is True.
        """
        keep = np.ones(self.size, dtype=bool)
        for head, layer in zip(*np.nonzero(mask.bits == 0)):
            for s in self.head_slices(int(layer), int(head)):
                keep[s] = False
        return keep

    def prefix_selector(self, prefix: str) -> np.ndarray:
        sel = np.zeros(self.size, dtype=bool)
        for b in self.blocks:
            if b.name.startswith(prefix):
                sel[b.offset:b.stop] = True
        return sel


@lru_cache(maxsize=32)
def layout_for(config: ModelConfig) -> ParameterLayout:
    return ParameterLayout.for_config(config)


def parameter_count(config: ModelConfig) -> int:
    """
    Closed-form number of trainable scalars for `config`.
    """
    V, S, D, F_ = config.vocab_size, config.max_seq_len, config.model_dim, config.ffn_dim
    Ch, K, L = config.classifier_hidden_dim, config.num_classes, config.num_layers
    per_layer = 4 * D * D + 2 * D * F_ + F_ + 8 * D
    return V * D + S * D + 2 * D + L * per_layer + D * Ch + Ch + Ch * K + K


@dataclass(frozen=True, eq=False)
class Parameters:
    """
    Immutable flat float64 parameter vector bound to a `ModelConfig`.
    """
    config: ModelConfig
    flat: np.ndarray

    def __post_init__(self):
        flat = np.array(self.flat, dtype=np.float64, copy=True).reshape(-1)
        if flat.size != self.layout.size:
            raise ContractViolation(f"Parameter vector has length {flat.size}, "
                                    f"expected {self.layout.size} for this config.")
        flat.flags.writeable = False
        object.__setattr__(self, "flat", flat)

    def __repr__(self):
        return f"Parameters(p={self.flat.size}, hash={self.content_hash()[:12]})"

    @property
    def layout(self) -> ParameterLayout:
        return layout_for(self.config)

    @cached_property
    def tensor(self) -> torch.Tensor:
        return torch.tensor(self.flat, dtype=DTYPE)

    def unflatten(self) -> dict[str, np.ndarray]:
        return {b.name: self.flat[b.offset:b.stop].reshape(b.shape) for b in self.layout.blocks}

    @classmethod
    def flatten(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "Parameters":
        layout = layout_for(config)
        missing = [b.name for b in layout.blocks if b.name not in arrays]
        if missing:
            raise ContractViolation(f"Missing parameter blocks: {missing}")
        flat = np.concatenate([np.asarray(arrays[b.name], dtype=np.float64).reshape(-1)
                               for b in layout.blocks])
        return cls(config=config, flat=flat)

    def replace(self, flat: np.ndarray) -> "Parameters":
        return Parameters(config=self.config, flat=flat)

    def content_hash(self) -> str:
        return sha256_array(self.flat)

    def equals(self, other: "Parameters") -> bool:
        return self.config == other.config and np.array_equal(self.flat, other.flat)

    def save(self, path: str) -> None:
        ParamsFile(path).write(config_json=self.config.model_dump_json(), values=self.flat)
        return

    @classmethod
    def load(cls, path: str) -> "Parameters":
        pf = ParamsFile(path)
        if not pf.is_valid:
            raise FormatError(f"Not a parameters file: {path}")
        config_json, values = pf.read()
        return cls(config=ModelConfig.from_json(config_json), flat=values)


@dataclass(frozen=True, eq=False)
class SubnetworkMask:
    """
    Binary head gates. `bits[i, j]` is head i of layer j (shape H x L).
    """
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ContractViolation(f"Mask must be a 2-D (heads x layers) matrix, got shape {bits.shape}")
        if not np.isin(bits, (0, 1)).all():
            raise ContractViolation("Mask entries must be 0 or 1.")
        bits = bits.astype(np.uint8, copy=True)
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    def __repr__(self):
        return f"SubnetworkMask(heads={self.heads}, layers={self.layers}, disabled={self.sparsity})"

    def __eq__(self, other) -> bool:
        return isinstance(other, SubnetworkMask) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes() + bytes(self.bits.shape))

    @classmethod
    def ones(cls, heads: int, layers: int) -> "SubnetworkMask":
        return cls(np.ones((heads, layers), dtype=np.uint8))

    @classmethod
    def zeros(cls, heads: int, layers: int) -> "SubnetworkMask":
        return cls(np.zeros((heads, layers), dtype=np.uint8))

    @classmethod
    def full(cls, config: ModelConfig) -> "SubnetworkMask":
        return cls.ones(config.heads_per_layer, config.num_layers)

    @property
    def heads(self) -> int:
        return self.bits.shape[0]

    @property
    def layers(self) -> int:
        return self.bits.shape[1]

    @property
    def size(self) -> int:
        return self.bits.size

    @property
    def sparsity(self) -> int:
        """Number of disabled heads."""
        return int(self.size - np.count_nonzero(self.bits))

    @property
    def enabled_count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def enabled(self) -> set[tuple[int, int]]:
        """Enabled heads as (layer, head) pairs."""
        return {(int(j), int(i)) for i, j in zip(*np.nonzero(self.bits))}

    def layer_bits(self, layer: int) -> np.ndarray:
        return self.bits[:, layer]

    def flat(self) -> np.ndarray:
        return self.bits.reshape(-1).astype(np.float64)

    def check_shape(self, config: ModelConfig) -> None:
        expected = (config.heads_per_layer, config.num_layers)
        if self.bits.shape != expected:
            raise ContractViolation(f"Mask shape {self.bits.shape} does not match "
                                    f"(heads, layers) = {expected}")
        return

    def to_json(self) -> str:
        # one row per layer, listing that layer's heads
        return json.dumps({"layers": self.layers,
                           "heads": self.heads,
                           "bits": self.bits.T.astype(int).tolist()})

    @classmethod
    def from_json(cls, text: str) -> "SubnetworkMask":
        try:
            obj = json.loads(text)
            bits = np.array(obj["bits"], dtype=np.int64).T
            if bits.shape != (obj["heads"], obj["layers"]):
                raise FormatError(f"Mask bits shape {bits.T.shape} disagrees with "
                                  f"layers={obj['layers']}, heads={obj['heads']}")
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, FormatError):
                raise
            raise FormatError(f"Malformed mask JSON: {e}") from e
        return cls(bits)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())
        return

    @classmethod
    def load(cls, path: str) -> "SubnetworkMask":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(f.read())

    def content_hash(self) -> str:
        return sha256_array(self.bits)


@dataclass(frozen=True)
class Example:
    """
    One classification instance: `[CLS] a [SEP] b` (pair tasks) or `[CLS] a`.

    Attributes
    ----------
    uid: int
        Position of the example inside its corpus; used as train/test id.
    tokens: tuple[int, ...]
    label: int
    language: str
    latent_id: int
        Identifies parallel renderings of the same underlying example.
    """
    uid: int
    tokens: tuple
    label: int
    language: str
    latent_id: int

    def check(self, config: ModelConfig) -> None:
        if len(self.tokens) == 0 or len(self.tokens) > config.max_seq_len:
            raise ContractViolation(f"Example {self.uid} has {len(self.tokens)} tokens; "
                                    f"allowed 1..{config.max_seq_len}")
        if max(self.tokens) >= config.vocab_size or min(self.tokens) < 0:
            raise ContractViolation(f"Example {self.uid} has token ids outside [0, {config.vocab_size})")
        if not 0 <= self.label < config.num_classes:
            raise ContractViolation(f"Example {self.uid} label {self.label} outside "
                                    f"[0, {config.num_classes})")
        return


@dataclass(frozen=True)
class GradVector:
    values: np.ndarray
    loss: float
    example_id: Optional[int] = None


@dataclass(frozen=True)
class GateGradient:
    """
    dL/dxi at the current gates. `disabled` flags heads whose gate is 0; their
    derivative is still reported.
    """
    values: np.ndarray
    disabled: np.ndarray
    loss: float


def init_model(config: ModelConfig, seed: int) -> Parameters:
    """
    Draw initial parameters.

    Matrices are N(0, 1/fan_in), embeddings N(0, 0.02^2), biases 0 and layer
    norm gains 1. Deterministic for a fixed (config, seed).

    Parameters
    ----------
    config: ModelConfig
    seed: int

    Returns
    -------
    Parameters
    """
    if not isinstance(config, ModelConfig):
        raise ConfigurationError("init_model expects a ModelConfig.")
    rng = np.random.default_rng(seed)
    layout = layout_for(config)
    flat = np.zeros(layout.size, dtype=np.float64)
    for b in layout.blocks:
        if b.name.endswith(".gain"):
            flat[b.offset:b.stop] = 1.0
        elif b.name.endswith("bias"):
            continue
        elif b.name.startswith("embed."):
            flat[b.offset:b.stop] = rng.normal(0.0, 0.02, size=b.size)
        else:
            fan_in = b.shape[-2]
            flat[b.offset:b.stop] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=b.size)
    return Parameters(config=config, flat=flat)


def _encode(examples: Sequence[Example], config: ModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Pad every example to `max_seq_len`; return token ids and a validity mask.
    """
    S = config.max_seq_len
    tokens = np.full((len(examples), S), TOKENS.PAD.value, dtype=np.int64)
    valid = np.zeros((len(examples), S), dtype=bool)
    for i, ex in enumerate(examples):
        ex.check(config)
        tokens[i, :len(ex.tokens)] = ex.tokens
        valid[i, :len(ex.tokens)] = True
    return torch.from_numpy(tokens), torch.from_numpy(valid)


def _gates_tensor(mask: Optional[SubnetworkMask], config: ModelConfig) -> Optional[torch.Tensor]:
    if mask is None:
        return None
    if not isinstance(mask, SubnetworkMask):
        raise ContractViolation(f"Expected a SubnetworkMask, got {type(mask).__name__}")
    mask.check_shape(config)
    return torch.tensor(mask.bits, dtype=DTYPE)


def _logits(flat: torch.Tensor,
            tokens: torch.Tensor,
            valid: torch.Tensor,
            gates: Optional[torch.Tensor],
            config: ModelConfig
            ) -> torch.Tensor:
    """
    Batched forward pass to class logits. `gates` (H x L) scales each head's
    output before the output projection; `None` skips gating entirely.
    """
    layout = layout_for(config)
    P = {b.name: flat[b.offset:b.stop].view(b.shape) for b in layout.blocks}
    H, D, dh = config.heads_per_layer, config.model_dim, config.head_dim
    x = P["embed.token"][tokens] + P["embed.position"][:tokens.shape[1]]
    x = F.layer_norm(x, (D,), P["embed.norm.gain"], P["embed.norm.bias"], eps=LN_EPS)
    pad_keys = ~valid[:, None, None, :]
    for layer in range(config.num_layers):
        p = f"layers.{layer}"
        q = torch.einsum("bsd,hde->bhse", x, P[f"{p}.attn.query"]) + P[f"{p}.attn.query_bias"][None, :, None, :]
        k = torch.einsum("bsd,hde->bhse", x, P[f"{p}.attn.key"]) + P[f"{p}.attn.key_bias"][None, :, None, :]
        v = torch.einsum("bsd,hde->bhse", x, P[f"{p}.attn.value"]) + P[f"{p}.attn.value_bias"][None, :, None, :]
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        attn = torch.softmax(scores.masked_fill(pad_keys, float("-inf")), dim=-1)
        heads = attn @ v
        if gates is not None:
            heads = heads * gates[:, layer].view(1, H, 1, 1)
        x = F.layer_norm(x + torch.einsum("bhse,hed->bsd", heads, P[f"{p}.attn.output"]),
                         (D,), P[f"{p}.norm1.gain"], P[f"{p}.norm1.bias"], eps=LN_EPS)
        ff = F.gelu(x @ P[f"{p}.ffn.in"] + P[f"{p}.ffn.in_bias"]) @ P[f"{p}.ffn.out"] + P[f"{p}.ffn.out_bias"]
        x = F.layer_norm(x + ff, (D,), P[f"{p}.norm2.gain"], P[f"{p}.norm2.bias"], eps=LN_EPS)
    hidden = torch.tanh(x[:, 0] @ P["classifier.hidden"] + P["classifier.hidden_bias"])
    return hidden @ P["classifier.output"] + P["classifier.output_bias"]


def forward_batch(params: Parameters,
                  examples: Sequence[Example],
                  mask: Optional[SubnetworkMask] = None
                  ) -> np.ndarray:
    """
    Class probabilities for a batch of examples, shape (len(examples), num_classes).
    """
    gates = _gates_tensor(mask, params.config)
    tokens, valid = _encode(examples, params.config)
    with torch.no_grad():
        probs = torch.softmax(_logits(params.tensor, tokens, valid, gates, params.config), dim=-1)
    return probs.numpy()


def forward(params: Parameters,
            example: Example,
            mask: Optional[SubnetworkMask] = None
            ) -> np.ndarray:
    """
    Class probabilities of one example under `mask`.

    Parameters
    ----------
    params: Parameters
    example: Example
    mask: Optional[SubnetworkMask]
        Head gates; the all-ones mask is the full model. `None` runs the
        ungated network.

    Raises
    -------
    ContractViolation:
        If the mask shape does not match the config.

    Returns
    -------
    np.ndarray
        Probabilities of shape (num_classes,).
    """
    return forward_batch(params, [example], mask)[0]


def _batch_loss(params: Parameters,
                examples: Sequence[Example],
                mask: Optional[SubnetworkMask],
                flat: torch.Tensor,
                gates: Optional[torch.Tensor]
                ) -> torch.Tensor:
    tokens, valid = _encode(examples, params.config)
    labels = torch.tensor([ex.label for ex in examples], dtype=torch.int64)
    return F.cross_entropy(_logits(flat, tokens, valid, gates, params.config), labels,
                           reduction="mean")


def loss_and_grad(params: Parameters,
                  example: Example,
                  mask: Optional[SubnetworkMask] = None
                  ) -> GradVector:
    """
    Cross-entropy loss of the true label and its exact gradient with respect
    to every trainable parameter.

    Raises
    -------
    NumericalError:
        If the loss is not finite; carries the example id.
    """
    gates = _gates_tensor(mask, params.config)
    flat = params.tensor.detach().clone().requires_grad_(True)
    loss = _batch_loss(params, [example], mask, flat, gates)
    if not torch.isfinite(loss):
        raise NumericalError("Non-finite loss", example_id=example.uid)
    (grad,) = torch.autograd.grad(loss, flat)
    return GradVector(values=grad.numpy(), loss=float(loss.detach()), example_id=example.uid)


def batch_loss_and_grad(params: Parameters,
                        examples: Sequence[Example],
                        mask: Optional[SubnetworkMask] = None
                        ) -> tuple[float, np.ndarray]:
    """
    Mean loss over `examples` and its gradient (the mean of per-example
    gradients).
    """
    if len(examples) == 0:
        raise ContractViolation("Empty batch.")
    gates = _gates_tensor(mask, params.config)
    flat = params.tensor.detach().clone().requires_grad_(True)
    loss = _batch_loss(params, examples, mask, flat, gates)
    if not torch.isfinite(loss):
        raise NumericalError("Non-finite batch loss", example_id=examples[0].uid)
    (grad,) = torch.autograd.grad(loss, flat)
    return float(loss.detach()), grad.numpy()


def gate_grad(params: Parameters,
              example: Example,
              mask: SubnetworkMask
              ) -> GateGradient:
    """
    Exact derivative of the loss with respect to the continuous relaxation of
    each head gate, evaluated at the gates given by `mask`.

    Returns
    -------
    GateGradient
        `values` has shape (heads, layers); `disabled` flags zero gates.
    """
    if mask is None:
        mask = SubnetworkMask.full(params.config)
    gates = _gates_tensor(mask, params.config).requires_grad_(True)
    loss = _batch_loss(params, [example], mask, params.tensor, gates)
    if not torch.isfinite(loss):
        raise NumericalError("Non-finite loss", example_id=example.uid)
    (grad,) = torch.autograd.grad(loss, gates)
    return GateGradient(values=grad.numpy(), disabled=mask.bits == 0, loss=float(loss.detach()))


def gated_loss(params: Parameters,
               example: Example,
               gates: np.ndarray
               ) -> float:
    """
    Loss of one example under continuous (heads x layers) gate values.
    """
    gates = np.asarray(gates, dtype=np.float64)
    expected = (params.config.heads_per_layer, params.config.num_layers)
    if gates.shape != expected:
        raise ContractViolation(f"Gates of shape {gates.shape} do not match {expected}")
    with torch.no_grad():
        loss = _batch_loss(params, [example], None, params.tensor, torch.from_numpy(gates.copy()))
    return float(loss.detach())


def per_example_gradients(params: Parameters,
                          examples: Sequence[Example],
                          mask: Optional[SubnetworkMask] = None,
                          workers: int = 1,
                          progress: bool = False
                          ) -> tuple[np.ndarray, np.ndarray]:
    """
    Gradients of every example, stacked row-wise in input order.

    Parameters
    ----------
    workers: int, default=1
        Thread pool size; results are collected in input order so the output
        does not depend on scheduling.

    Returns
    -------
    tuple[np.ndarray, np.ndarray]
        (len(examples), p) gradients and (len(examples),) losses.
    """
    def _one(ex):
        return loss_and_grad(params, ex, mask)

    grads = np.empty((len(examples), params.layout.size), dtype=np.float64)
    losses = np.empty(len(examples), dtype=np.float64)
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            results = executor.map(_one, examples)
            for i, g in enumerate(tqdm(results, total=len(examples), disable=not progress)):
                grads[i], losses[i] = g.values, g.loss
    else:
        for i, ex in enumerate(tqdm(examples, disable=not progress)):
            g = _one(ex)
            grads[i], losses[i] = g.values, g.loss
    return grads, losses


def predict(params: Parameters,
            examples: Sequence[Example],
            mask: Optional[SubnetworkMask] = None,
            batch_size: int = 256
            ) -> np.ndarray:
    """
    Argmax labels; ties resolve to the lowest class index.
    """
    preds = []
    for start in range(0, len(examples), batch_size):
        probs = forward_batch(params, examples[start:start + batch_size], mask)
        preds.append(np.argmax(probs, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(params: Parameters,
             dataset: Union[Sequence[Example], "object"],
             mask: Optional[SubnetworkMask] = None
             ) -> float:
    """
    Fraction of argmax-correct predictions.

    Raises
    -------
    ContractViolation:
        If the dataset is empty.
    """
    examples = list(getattr(dataset, "examples", dataset))
    if len(examples) == 0:
        raise ContractViolation("evaluate() needs a non-empty dataset.")
    labels = np.array([ex.label for ex in examples])
    return float(np.mean(predict(params, examples, mask) == labels))
