"""Fine-tuning loop, Adam, baseline regularizers and checkpoints.

Three model modes share the loop:

``vib``
    encoder -> bottleneck head, loss = sampled cross-entropy + beta * KL.
``ablation_deterministic``
    the same head with the classifier on the posterior mean and no KL.
``baseline``
    encoder -> linear classifier, optionally regularized with dropout,
    weight decay towards the initial weights, or mixout.

Each run keeps the parameters of the epoch with the best validation metric
and reports test metrics for those parameters only.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import numkit as nk
from .data import Dataset, atomic_write, subsample
from .encoders import Encoder, EncoderSpec, Snapshot, snapshot_initial
from .numkit import ContractError, NonFiniteError, Rng, Tensor
from .vib import (
    BetaSchedule,
    Linear,
    Prior,
    VibHead,
    deterministic_head_forward,
    effective_beta,
    kl_to_prior,
    posterior,
    reparameterize,
    vib_loss,
)

log = logging.getLogger(__name__)

MODES = ("vib", "ablation_deterministic", "baseline")
REGULARIZERS = ("none", "dropout", "wd_to_init", "mixout")
PAPER_LEARNING_RATE = 2e-5
TOY_LEARNING_RATE = 1e-3


class ConfigError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = TOY_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    eps_inside_sqrt: bool = True


@dataclass
class OptimizerState:
    config: OptimizerConfig
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState) -> None:
    """One bias-corrected Adam update, in place, with no weight decay."""
    cfg = state.config
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise nk.DimensionError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        denom = np.sqrt(v_hat + cfg.eps) if cfg.eps_inside_sqrt else np.sqrt(v_hat) + cfg.eps
        p.data = p.data - cfg.lr * m_hat / denom


def apply_dropout(x: Tensor, p: float, rng: Rng, training: bool = True) -> Tensor:
    """Inverted dropout: zero units with probability ``p``, rescale survivors."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.uniform(x.shape) >= p) / (1.0 - p)
    return x * Tensor(keep)


def _regularized(params: Mapping[str, Tensor], w0: Snapshot, exclude: tuple[str, ...]) -> list[str]:
    return [n for n in params if n in w0 and not any(n.startswith(e) for e in exclude)]


def wd_to_init_penalty(
    params: Mapping[str, Tensor], w0: Snapshot | None, lam: float, exclude: tuple[str, ...] = ()
) -> Tensor:
    """``lam * sum ||w - w0||^2`` over parameters that have a snapshot entry."""
    if w0 is None:
        raise ContractError("weight decay to init needs a snapshot of the initial weights")
    total = Tensor(0.0)
    for name in _regularized(params, w0, exclude):
        total = total + nk.sum(nk.square(params[name] - Tensor(w0[name])))
    return total * lam


def mixout_step(
    params: Mapping[str, Tensor], w0: Snapshot | None, p: float, rng: Rng, exclude: tuple[str, ...] = ()
) -> None:
    """Reset each parameter element to its snapshot value with probability ``p``."""
    if w0 is None:
        raise ContractError("mixout needs a snapshot of the initial weights")
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"mixout probability must lie in [0, 1], got {p}")
    for name in _regularized(params, w0, exclude):
        t = params[name]
        mask = rng.bernoulli(p, t.shape)
        t.data = np.where(mask, w0[name], t.data)


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "none"
    p: float = 0.0
    lam: float = 0.0
    exclude: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "exclude", tuple(self.exclude))
        if self.kind not in REGULARIZERS:
            raise ConfigError(f"regularizer.kind: must be one of {REGULARIZERS}, got {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"regularizer.p: must lie in [0, 1], got {self.p}")
        if self.kind == "dropout" and self.p >= 1.0:
            raise ConfigError("regularizer.p: dropout probability must be < 1")
        if self.lam < 0:
            raise ConfigError(f"regularizer.lam: must be nonnegative, got {self.lam}")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "vib"
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    k: int = 8
    beta0: float = 1e-4
    beta_cap: float = 1.0
    num_samples: int = 5
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 25
    batch_size: int = 32
    full_batch_below: int = 512
    metric: str = "accuracy"
    seed: int = 0
    train_size: int | None = None
    subsample_seed: int = 0
    trainable_prior: bool = False
    fixed_sigma: float | None = None
    dataset: str | None = None

    def validate(self) -> RunConfig:
        if self.mode not in MODES:
            raise ConfigError(f"mode: must be one of {MODES}, got {self.mode!r}")
        if self.mode in ("vib", "ablation_deterministic") and self.k < 1:
            raise ConfigError(f"k: bottleneck size must be >= 1, got {self.k}")
        if self.mode == "ablation_deterministic" and self.beta0 != 0:
            raise ConfigError("beta0: the deterministic ablation has no KL term, beta0 must be 0")
        if self.beta0 < 0:
            raise ConfigError("beta0: must be nonnegative")
        if self.num_samples < 1:
            raise ConfigError("num_samples: must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.metric not in ("accuracy", "loss"):
            raise ConfigError(f"metric: must be 'accuracy' or 'loss', got {self.metric!r}")
        if self.fixed_sigma is not None and self.fixed_sigma <= 0:
            raise ConfigError("fixed_sigma: must be positive")
        if self.optimizer.lr <= 0:
            raise ConfigError("optimizer.lr: must be positive")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder"]["hidden_widths"] = list(d["encoder"]["hidden_widths"])
        d["regularizer"]["exclude"] = list(d["regularizer"]["exclude"])
        return d

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> RunConfig:
        return config_from_dict(cls, raw)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def run_id(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def config_from_dict(cls, raw: Mapping[str, Any], path: str = ""):
    """Build a (nested) frozen dataclass, rejecting unknown keys."""
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path or cls.__name__}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{path or cls.__name__}: unknown keys {unknown}")
    kwargs = {}
    nested = {"encoder": EncoderSpec, "regularizer": RegularizerSpec, "optimizer": OptimizerConfig}
    for name, value in raw.items():
        sub = nested.get(name) if cls is RunConfig else None
        kwargs[name] = config_from_dict(sub, value, f"{path}{name}.") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path or cls.__name__}: {exc}") from None


class Model:
    """Encoder plus task head; ``steps`` counts optimizer updates."""

    def __init__(self, config: RunConfig, input_width: int | None, num_classes: int):
        self.config = config
        self.num_classes = num_classes
        init = Rng(config.seed).spawn("init")
        spec = config.encoder
        if spec.kind == "mlp" and spec.input_width is None:
            spec = dataclasses.replace(spec, input_width=input_width)
        if spec.kind == "identity" and input_width is not None and input_width != spec.output_width:
            raise ConfigError(f"encoder.output_width: identity encoder width {spec.output_width} != data width {input_width}")
        self.encoder = Encoder(spec, Rng(spec.init_seed).spawn("encoder"))
        self.head: VibHead | None = None
        self.classifier: Linear | None = None
        if config.mode == "baseline":
            self.classifier = Linear.init(init, spec.output_width, num_classes, "classifier")
        else:
            self.head = VibHead(spec.output_width, config.k, num_classes, init,
                                Prior.standard(config.k, trainable=config.trainable_prior))
        self.steps = 0

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.encoder.parameters())
        if self.head is not None:
            out.update(self.head.parameters())
        else:
            out.update(self.classifier.named("classifier"))
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.parameters().items() if p.requires_grad}

    def features(self, x, hook=None) -> Tensor:
        return self.encoder.encode(x, hook)

    def logits(self, x) -> Tensor:
        """Deterministic evaluation logits (posterior mean for bottleneck heads)."""
        feats = self.features(x)
        if self.head is None:
            return self.classifier(feats)
        return deterministic_head_forward(self.head, feats)

    def representation(self, x, rng: Rng | None = None) -> np.ndarray:
        """What a probe on the frozen model sees: a sampled ``z``, the mean code, or the features."""
        feats = self.features(x)
        if self.head is None:
            return feats.data.copy()
        post = posterior(self.head, feats, fixed_sigma=self.config.fixed_sigma)
        if self.config.mode == "vib" and rng is not None:
            return reparameterize(post, rng).data
        return post.mu.data.copy()

    def loss(self, x, y, epoch: int, rng: Rng, hook=None) -> tuple[Tensor, dict[str, float]]:
        cfg = self.config
        feats = self.features(x, hook)
        if cfg.mode == "vib":
            parts = vib_loss(self.head, feats, y, epoch, BetaSchedule(cfg.beta0, cfg.beta_cap),
                             cfg.num_samples, rng, hidden_hook=hook, fixed_sigma=cfg.fixed_sigma)
            return parts.total, {"kl": parts.kl_loss.item(), "prediction": parts.prediction_loss.item()}
        if cfg.mode == "ablation_deterministic":
            ce = nk.softmax_cross_entropy(deterministic_head_forward(self.head, feats, hook), y)
        else:
            ce = nk.softmax_cross_entropy(self.classifier(feats), y)
        return ce, {"kl": 0.0, "prediction": ce.item()}

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.parameters().items()}

    def load_state(self, values: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(values)
        if missing:
            raise IntegrityError(f"state is missing parameters {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise IntegrityError(f"{name}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()


def _rows(ds: Dataset, idx: np.ndarray | None = None):
    if idx is None:
        return ds.features
    return ds.features[idx] if ds.dense else [ds.features[i] for i in idx]


@dataclass
class EvalStats:
    loss: float
    accuracy: float
    kl: float = 0.0
    mean_sigma: float | None = None


def evaluate(model: Model, ds: Dataset) -> EvalStats:
    """Test-mode cross-entropy and accuracy, plus KL and mean sigma for bottleneck heads."""
    x = _rows(ds)
    logits = model.logits(x)
    ce = nk.softmax_cross_entropy(logits, ds.labels).item()
    acc = float(np.mean(np.argmax(logits.data, axis=1) == ds.labels))
    kl, sigma = 0.0, None
    if model.head is not None:
        post = posterior(model.head, model.features(x), fixed_sigma=model.config.fixed_sigma)
        kl = kl_to_prior(post, model.head.prior).item()
        sigma = float(post.sigma.data.mean())
    return EvalStats(ce, acc, kl, sigma)


def predict_labels(model: Model, ds: Dataset) -> np.ndarray:
    return np.argmax(model.logits(_rows(ds)).data, axis=1)


@dataclass
class EpochStats:
    epoch: int
    beta: float
    objective: float
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    kl: float
    mean_sigma: float | None


@dataclass
class RunRecord:
    config: dict
    run_id: str
    seed: int
    status: str = "ok"
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_metric: float | None = None
    test_metrics: dict[str, float] = field(default_factory=dict)
    test_metric: float | None = None
    failed_epoch: int | None = None
    error: str | None = None
    checkpoint: str | None = None
    train_size: int | None = None
    cell: dict | None = None
    wall_clock: float = field(default=0.0, compare=False)
    model: Model | None = field(default=None, compare=False, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)

    def to_json(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"}
        d["epochs"] = [dataclasses.asdict(e) for e in self.epochs]
        return d

    def to_line(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, raw: Mapping[str, Any]) -> RunRecord:
        raw = dict(raw)
        raw["epochs"] = [EpochStats(**e) for e in raw.get("epochs", [])]
        return cls(**raw)


def _validation_score(stats: EvalStats, metric: str) -> float:
    return stats.accuracy if metric == "accuracy" else -stats.loss


def _batches(n: int, cfg: RunConfig, rng: Rng) -> list[np.ndarray]:
    if n < cfg.full_batch_below:
        return [np.arange(n)]
    perm = rng.permutation(n)
    return [perm[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]


def train(
    config: RunConfig,
    data: Mapping[str, Dataset],
    checkpoint_path: str | Path | None = None,
    model: Model | None = None,
) -> RunRecord:
    """Fine-tune for ``config.epochs`` epochs with validation-based early stopping.

    ``data`` needs ``train`` and ``val`` splits; every other split is treated
    as a test split and scored once, with the best-epoch parameters.  A
    non-finite loss ends the run with ``status == "failed"`` instead of raising.
    """
    config.validate()
    for split in ("train", "val"):
        if split not in data:
            raise ConfigError(f"data is missing the {split!r} split")
    started = time.perf_counter()
    train_ds = data["train"]
    if config.train_size is not None:
        train_ds = subsample(train_ds, config.train_size, config.subsample_seed)
    val_ds = data["val"]
    width = train_ds.features.shape[1] if train_ds.dense else None
    if model is None:
        model = Model(config, width, train_ds.num_classes)
    w0 = snapshot_initial(model)
    reg = config.regularizer
    root = Rng(config.seed)
    shuffle_rng, noise_rng = root.spawn("shuffle"), root.spawn("noise")
    dropout_rng, mixout_rng = root.spawn("dropout"), root.spawn("mixout")
    hook = None
    if reg.kind == "dropout" and reg.p > 0:
        def hook(h):
            return apply_dropout(h, reg.p, dropout_rng, training=True)

    params = model.trainable_parameters()
    opt = OptimizerState(config.optimizer)
    record = RunRecord(config=config.to_dict(), run_id=config.run_id(), seed=config.seed, train_size=len(train_ds))
    best_score, best_state = -np.inf, None
    for epoch in range(1, config.epochs + 1):
        try:
            with np.errstate(over="ignore", invalid="ignore"):  # overflow is reported as NonFiniteError
                objective, batches = 0.0, _batches(len(train_ds), config, shuffle_rng)
                for idx in batches:
                    loss, parts = model.loss(_rows(train_ds, idx), train_ds.labels[idx], epoch, noise_rng, hook)
                    if reg.kind == "wd_to_init":
                        loss = loss + wd_to_init_penalty(params, w0, reg.lam, reg.exclude)
                    grads = nk.backward(loss, params)
                    adam_step(params, grads, opt)
                    if reg.kind == "mixout":
                        mixout_step(params, w0, reg.p, mixout_rng, reg.exclude)
                    model.steps += 1
                    objective += loss.item()
                tr, va = evaluate(model, train_ds), evaluate(model, val_ds)
        except NonFiniteError as exc:
            record.status, record.failed_epoch, record.error = "failed", epoch, str(exc)
            log.warning("run %s failed at epoch %d: %s", record.run_id, epoch, exc)
            break
        beta = effective_beta(BetaSchedule(config.beta0, config.beta_cap), epoch) if config.mode == "vib" else 0.0
        record.epochs.append(EpochStats(epoch, beta, objective / len(batches), tr.loss, tr.accuracy,
                                        va.loss, va.accuracy, tr.kl, tr.mean_sigma))
        score = _validation_score(va, config.metric)
        if score > best_score:
            best_score, best_state, record.best_epoch = score, model.state(), epoch
    if record.ok:
        model.load_state(best_state)
        record.best_val_metric = float(best_score)
        for name, ds in data.items():
            if name in ("train", "val"):
                continue
            record.test_metrics[name] = evaluate(model, ds).accuracy
        primary = next((s for s in ("test_id", "test") if s in record.test_metrics), None)
        record.test_metric = record.test_metrics.get(primary) if primary else None
        if checkpoint_path is not None:
            record.checkpoint = str(checkpoint_path)
            save_checkpoint(checkpoint_path, model)
    record.wall_clock = time.perf_counter() - started
    record.model = model
    return record


MAGIC = b"VIBCKPT\x00"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: RunConfig
    meta: dict
    version: int = FORMAT_VERSION

    def build_model(self) -> Model:
        model = Model(self.config, self.meta.get("input_width"), self.meta["num_classes"])
        model.load_state(self.tensors)
        return model


def _encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def dumps_checkpoint(model: Model) -> bytes:
    width = model.encoder.spec.input_width
    if width is None and model.encoder.spec.kind == "identity":
        width = model.encoder.spec.output_width
    header = json.dumps(
        {"config": model.config.to_dict(), "meta": {"input_width": width, "num_classes": model.num_classes}},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    body = _encode_tensors(model.state())
    digest = hashlib.sha256(header + body).digest()
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + digest + body


def save_checkpoint(path, model: Model) -> None:
    atomic_write(path, dumps_checkpoint(model))


def loads_checkpoint(blob: bytes) -> Checkpoint:
    try:
        return _loads_checkpoint(blob)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, (IntegrityError, ConfigError)):
            raise
        raise IntegrityError(f"corrupt checkpoint: {exc}") from None


def _loads_checkpoint(blob: bytes) -> Checkpoint:
    if blob[: len(MAGIC)] != MAGIC:
        raise IntegrityError("not a checkpoint file (bad magic bytes)")
    pos = len(MAGIC)
    version, header_len = struct.unpack_from("<II", blob, pos)
    if version != FORMAT_VERSION:
        raise IntegrityError(f"unsupported checkpoint format version {version}")
    pos += 8
    header = blob[pos : pos + header_len]
    pos += header_len
    digest = blob[pos : pos + 32]
    pos += 32
    body = blob[pos:]
    if len(header) != header_len or len(digest) != 32 or hashlib.sha256(header + body).digest() != digest:
        raise IntegrityError("checkpoint content hash mismatch (truncated or corrupted file)")
    (count,) = struct.unpack_from("<I", body, 0)
    off = 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", body, off)
        name = body[off + 4 : off + 4 + n].decode()
        off += 4 + n
        (rank,) = struct.unpack_from("<I", body, off)
        shape = struct.unpack_from(f"<{rank}Q", body, off + 4)
        off += 4 + 8 * rank
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    meta = json.loads(header)
    return Checkpoint(tensors, RunConfig.from_dict(meta["config"]), meta["meta"], version)


def load_checkpoint(path) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes())
