"""Small stand-ins for a pretrained sentence encoder.

Three kinds map raw examples to ``d``-wide feature vectors:

* ``identity``: the feature vector itself (input width must equal ``d``).
* ``mlp``: a ReLU MLP over feature vectors.
* ``bag_of_embeddings``: the sum of token embeddings of a token-id list.
  Summing keeps token multiplicity visible to the head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numkit as nk
from .numkit import ContractError, Rng, Tensor
from .vib import HiddenHook, Linear

KINDS = ("identity", "mlp", "bag_of_embeddings")


class EncoderInputError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "identity"
    output_width: int = 64
    input_width: int | None = None
    hidden_widths: tuple[int, ...] = ()
    vocab_size: int | None = None
    trainable: bool = True
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(self.hidden_widths))
        if self.kind not in KINDS:
            raise ValueError(f"encoder kind must be one of {KINDS}, got {self.kind!r}")
        if self.output_width < 1:
            raise ValueError("encoder output_width must be positive")
        if self.kind == "identity" and self.input_width not in (None, self.output_width):
            raise ValueError(
                f"identity encoder needs input_width == output_width, got {self.input_width} vs {self.output_width}"
            )
        if self.kind == "bag_of_embeddings" and not self.vocab_size:
            raise ValueError("bag_of_embeddings encoder needs vocab_size")


class Encoder:
    def __init__(self, spec: EncoderSpec, rng: Rng | None = None):
        self.spec = spec
        rng = rng if rng is not None else Rng(spec.init_seed)
        self.layers: list[Linear] = []
        self.embedding: Tensor | None = None
        if spec.kind == "mlp":
            if spec.input_width is None:
                raise ValueError("mlp encoder needs input_width")
            fan_in = spec.input_width
            for i, w in enumerate((*spec.hidden_widths, spec.output_width)):
                self.layers.append(Linear.init(rng, fan_in, w, f"encoder.{i}"))
                fan_in = w
        elif spec.kind == "bag_of_embeddings":
            table = rng.gaussian((spec.vocab_size, spec.output_width)) / np.sqrt(spec.output_width)
            self.embedding = Tensor(table, requires_grad=True, name="encoder.embedding")
        self.set_trainable(spec.trainable)

    @property
    def d(self) -> int:
        return self.spec.output_width

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"encoder.{i}"))
        if self.embedding is not None:
            out["encoder.embedding"] = self.embedding
        return out

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters().values():
            p.requires_grad = flag

    @property
    def trainable(self) -> bool:
        params = self.parameters()
        return bool(params) and all(p.requires_grad for p in params.values())

    def encode(self, batch, hidden_hook: HiddenHook | None = None) -> Tensor:
        """Features for a batch: an ``N x width`` array, or token-id lists for bags."""
        if self.spec.kind == "bag_of_embeddings":
            return nk.matmul(Tensor(self._counts(batch)), self.embedding)
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float64))
        expected = self.spec.output_width if self.spec.kind == "identity" else self.spec.input_width
        if x.data.ndim != 2:
            raise EncoderInputError(f"expected a 2-d feature batch, got shape {x.shape}")
        if x.shape[1] != expected:
            raise EncoderInputError(f"example 0: width {x.shape[1]} does not match encoder input width {expected}")
        if self.spec.kind == "identity":
            return x
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = nk.relu(h)
                if hidden_hook is not None:
                    h = hidden_hook(h)
        return h

    def _counts(self, batch: Sequence[Sequence[int]]) -> np.ndarray:
        v = self.spec.vocab_size
        counts = np.zeros((len(batch), v))
        for i, tokens in enumerate(batch):
            for t in tokens:
                if not 0 <= int(t) < v:
                    raise EncoderInputError(f"example {i}: token id {t} outside vocabulary of size {v}")
                counts[i, int(t)] += 1.0
        return counts


@dataclass(frozen=True)
class Snapshot:
    """Read-only copy of parameter values taken before fine-tuning."""

    values: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self) -> list[str]:
        return list(self.values)


def snapshot_initial(model) -> Snapshot:
    """Freeze a copy of every trainable parameter of ``model`` as ``w0``.

    ``model`` needs ``parameters()`` and a ``steps`` counter; snapshots are
    only allowed before the first optimizer step.
    """
    if getattr(model, "steps", 0) != 0:
        raise ContractError("snapshot_initial must be called before any training step")
    values = {}
    for name, p in model.parameters().items():
        if not p.requires_grad:
            continue
        arr = p.data.copy()
        arr.flags.writeable = False
        values[name] = arr
    return Snapshot(values)
