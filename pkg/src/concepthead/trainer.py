"""Deterministic mini-batch training: AdamW with decoupled weight decay,
linear warmup, binary checkpoints, and per-epoch metric records.

Every source of randomness is owned here: parameter init and slot sampling
share one generator seeded from the config, and each epoch's shuffle is a
Fisher-Yates pass seeded with seed XOR epoch. Gradients accumulate in
sample-index order, so identical (dataset, config) pairs reproduce metric
logs bit for bit, and a checkpoint restores enough state (parameters,
optimizer moments, generator state, epoch) to continue a run unchanged.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import head as hd
from . import losses
from .autodiff import Tensor
from .data import Dataset, Sample
from .errors import ConfigError, FormatError, NumericError
from .head import HeadConfig, HeadParams
from .losses import LossWeights
from .metrics import Metrics, attention_entropy

__all__ = [
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "TrainConfig",
    "OptimizerState",
    "TrainState",
    "adamw_step",
    "lr_at",
    "init_train_state",
    "train_epoch",
    "fit",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"CCTK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    head: HeadConfig
    epochs: int = 20
    batch_size: int = 64
    lr: float = 5e-5
    warmup_iters: int = 10
    weight_decay: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps_opt: float = 1e-8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.warmup_iters < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1, warmup_iters >= 0")


@dataclass
class OptimizerState:
    """First/second moment buffers keyed by parameter name, plus the step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: HeadParams) -> "OptimizerState":
        return cls(m={name: np.zeros_like(p.data) for name, p in params.named()},
                   v={name: np.zeros_like(p.data) for name, p in params.named()})


@dataclass
class TrainState:
    params: HeadParams
    opt: OptimizerState
    rng: np.random.Generator
    epoch: int = 0  # completed epochs


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Linear ramp over the first warmup_iters optimizer steps, then constant."""
    if cfg.warmup_iters > 0 and iteration < cfg.warmup_iters:
        return cfg.lr * (iteration + 1) / cfg.warmup_iters
    return cfg.lr


def adamw_step(params: HeadParams, opt: OptimizerState, cfg: TrainConfig,
               lr_t: float) -> None:
    """One AdamW update with decoupled weight decay; missing grads count as zero."""
    b1, b2 = cfg.betas
    opt.t += 1
    bc1 = 1.0 - b1 ** opt.t
    bc2 = 1.0 - b2 ** opt.t
    for name, p in params.named():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r} "
                               f"at optimizer step {opt.t}")
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_opt)
        p.data -= lr_t * update
        if cfg.weight_decay != 0.0:
            p.data -= lr_t * cfg.weight_decay * p.data


def shuffled_indices(n: int, seed: int) -> np.ndarray:
    """Fisher-Yates permutation of range(n) from a dedicated generator."""
    rng = np.random.default_rng(seed)
    idx = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(i + 1))
        idx[i], idx[j] = idx[j], idx[i]
    return idx


def init_train_state(cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    params = hd.init_head_params(cfg.head, rng)
    return TrainState(params=params, opt=OptimizerState.for_params(params), rng=rng)


def _sample_terms(sample: Sample, out: hd.HeadOutput, cfg: TrainConfig):
    """Per-sample loss tensors plus plain-float diagnostics."""
    cls = losses.cross_entropy(out.logits, sample.label)

    expl = None
    if cfg.weights.lambda_expl > 0.0:
        pairs = []
        if out.attn_spatial is not None and sample.h_spatial is not None:
            pairs.append((out.attn_spatial, sample.h_spatial))
        if out.attn_global is not None and sample.h_global is not None:
            pairs.append((out.attn_global, sample.h_global))
        for attn, target in pairs:
            term = losses.explanation_loss(attn, target)
            expl = term if expl is None else ad.add(expl, term)

    maps = out.maps()
    entropy_value = sum(attention_entropy(a.data) for a in maps) / len(maps)
    sparse = None
    if cfg.weights.lambda_sparse > 0.0:
        for a in maps:
            term = losses.sparsity_loss(a)
            sparse = term if sparse is None else ad.add(sparse, term)
        if len(maps) > 1:
            sparse = ad.scale(sparse, 1.0 / len(maps))

    total = losses.total_loss(cls, expl, sparse, cfg.weights)
    return total, float(cls.data), (0.0 if expl is None else float(expl.data)), entropy_value


def _concept_score(sample: Sample, out: hd.HeadOutput) -> float | None:
    from .metrics import _sample_concept_score
    scores = []
    if out.attn_spatial is not None and sample.h_spatial is not None:
        s = _sample_concept_score(out.attn_spatial.data, sample.h_spatial)
        if s is not None:
            scores.append(s)
    if out.attn_global is not None and sample.h_global is not None:
        s = _sample_concept_score(out.attn_global.data, sample.h_global)
        if s is not None:
            scores.append(s)
    return sum(scores) / len(scores) if scores else None


def train_epoch(state: TrainState, dataset: Dataset, cfg: TrainConfig) -> Metrics:
    """One pass over the shuffled dataset; returns the epoch's mean metrics."""
    n = len(dataset.samples)
    if n == 0:
        raise ConfigError("cannot train on an empty dataset")
    order = shuffled_indices(n, cfg.seed ^ state.epoch)
    sum_cls = sum_expl = sum_sparse = sum_total = sum_entropy = 0.0
    hits = 0
    concept_scores: list[float] = []

    for start in range(0, n, cfg.batch_size):
        batch = order[start:start + cfg.batch_size]
        state.params.reset_grads()
        for idx in batch:
            sample = dataset.samples[int(idx)]
            try:
                out = hd.head_forward(Tensor(sample.features), state.params,
                                      cfg.head, state.rng)
                total, cls_v, expl_v, entropy_v = _sample_terms(sample, out, cfg)
                ad.backward(ad.scale(total, 1.0 / len(batch)))
            except NumericError as err:
                raise NumericError(
                    f"non-finite loss at epoch {state.epoch + 1}, "
                    f"batch {start // cfg.batch_size}: {err}") from err
            sum_cls += cls_v
            sum_expl += expl_v
            sum_sparse += entropy_v
            sum_total += float(total.data)
            sum_entropy += entropy_v
            if int(np.argmax(out.logits.data)) == sample.label:
                hits += 1
            score = _concept_score(sample, out)
            if score is not None:
                concept_scores.append(score)
        adamw_step(state.params, state.opt, cfg, lr_at(state.opt.t, cfg))

    state.epoch += 1
    return Metrics(
        epoch=state.epoch,
        loss_cls=sum_cls / n,
        loss_expl=sum_expl / n,
        loss_sparse=sum_sparse / n,
        loss_total=sum_total / n,
        class_acc=hits / n,
        concept_top1_acc=(sum(concept_scores) / len(concept_scores)
                          if concept_scores else float("nan")),
        mean_entropy=sum_entropy / n,
    )


def fit(dataset: Dataset, cfg: TrainConfig, state: TrainState | None = None,
        epochs: int | None = None, on_epoch=None) -> tuple[TrainState, list[Metrics]]:
    """Train for the remaining epochs (or an explicit count) and collect metrics.

    Passing a state resumes it; on_epoch, when given, is called with each
    Metrics record as it is produced.
    """
    if state is None:
        state = init_train_state(cfg)
    if epochs is None:
        epochs = cfg.epochs - state.epoch
    records = []
    for _ in range(epochs):
        record = train_epoch(state, dataset, cfg)
        records.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return state, records


def evaluate(dataset: Dataset, params: HeadParams, cfg: TrainConfig,
             seed: int = 0) -> Metrics:
    """Metrics over a dataset without updating parameters (slot sampling seeded)."""
    if len(dataset.samples) == 0:
        raise ConfigError("cannot evaluate an empty dataset")
    rng = np.random.default_rng(seed)
    sum_cls = sum_expl = sum_sparse = sum_total = sum_entropy = 0.0
    hits = 0
    concept_scores: list[float] = []
    n = len(dataset.samples)
    for sample in dataset.samples:
        out = hd.head_forward(Tensor(sample.features), params, cfg.head, rng)
        total, cls_v, expl_v, entropy_v = _sample_terms(sample, out, cfg)
        sum_cls += cls_v
        sum_expl += expl_v
        sum_sparse += entropy_v
        sum_total += float(total.data)
        sum_entropy += entropy_v
        if int(np.argmax(out.logits.data)) == sample.label:
            hits += 1
        score = _concept_score(sample, out)
        if score is not None:
            concept_scores.append(score)
    return Metrics(epoch=0, loss_cls=sum_cls / n, loss_expl=sum_expl / n,
                   loss_sparse=sum_sparse / n, loss_total=sum_total / n,
                   class_acc=hits / n,
                   concept_top1_acc=(sum(concept_scores) / len(concept_scores)
                                     if concept_scores else float("nan")),
                   mean_entropy=sum_entropy / n)


# --- checkpoint format ------------------------------------------------------
#
# magic "CCTK" | u32 version | u32 n_params | entries | u32 n_opt | entries |
# u32 config_len | config utf-8 "key=value" lines.
# Tensor entry: u32 name_len | name | u32 rank | u32 dims... | f64 LE payload.


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    out = struct.pack("<I", len(encoded)) + encoded
    out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    out += arr.astype("<f8").tobytes()
    return out


def _config_lines(cfg: TrainConfig, state: TrainState) -> str:
    h = cfg.head
    rng_state = state.rng.bit_generator.state
    items = [
        ("epoch", state.epoch), ("step", state.opt.t), ("seed", cfg.seed),
        ("epochs", cfg.epochs), ("batch_size", cfg.batch_size), ("lr", repr(cfg.lr)),
        ("warmup_iters", cfg.warmup_iters), ("weight_decay", repr(cfg.weight_decay)),
        ("beta1", repr(cfg.betas[0])), ("beta2", repr(cfg.betas[1])),
        ("eps_opt", repr(cfg.eps_opt)),
        ("lambda_expl", repr(cfg.weights.lambda_expl)),
        ("lambda_sparse", repr(cfg.weights.lambda_sparse)),
        ("concepts", h.concepts), ("slot_dim", h.slot_dim), ("input_dim", h.input_dim),
        ("n_inputs", h.n_inputs), ("n_classes", h.n_classes), ("iters", h.iters),
        ("variant", h.variant), ("heads", h.heads), ("pathway", h.pathway),
        ("identity_mode", int(h.identity_mode)),
        ("rng_algo", rng_state["bit_generator"]),
        ("rng_state", rng_state["state"]["state"]),
        ("rng_inc", rng_state["state"]["inc"]),
        ("rng_has_uint32", rng_state["has_uint32"]),
        ("rng_uinteger", rng_state["uinteger"]),
    ]
    return "".join(f"{k}={v}\n" for k, v in items)


def save_checkpoint(state: TrainState, cfg: TrainConfig, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(state, cfg))


def checkpoint_bytes(state: TrainState, cfg: TrainConfig) -> bytes:
    named = list(state.params.named())
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<I", len(named))
    for name, p in named:
        out += _pack_tensor(name, p.data)
    opt_entries = ([("m:" + name, state.opt.m[name]) for name, _ in named]
                   + [("v:" + name, state.opt.v[name]) for name, _ in named])
    out += struct.pack("<I", len(opt_entries))
    for name, arr in opt_entries:
        out += _pack_tensor(name, arr)
    config = _config_lines(cfg, state).encode("utf-8")
    out += struct.pack("<I", len(config)) + config
    return bytes(out)


class _Cursor:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.blob):
            raise FormatError("truncated checkpoint", offset=self.offset)
        piece = self.blob[self.offset:self.offset + size]
        self.offset += size
        return piece

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensor_entry(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u32()
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(dims)
        return name, arr.astype(np.float64)


def _build_params(cfg: HeadConfig, tensors: dict[str, np.ndarray]) -> HeadParams:
    remaining = dict(tensors)

    def grab(name: str) -> Tensor:
        if name not in remaining:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
        return Tensor(remaining.pop(name), requires_grad=True)

    def pathway(prefix: str) -> hd.PathwayParams:
        slot_fields = {}
        for f_name in ("wq", "wk", "wv", "mu", "log_sigma", "wz", "uz", "bz",
                       "wr", "ur", "br", "wh", "uh", "bh", "ln_input_gain",
                       "ln_input_bias", "ln_slot_gain", "ln_slot_bias", "positions"):
            slot_fields[f_name] = grab(f"{prefix}.slot.{f_name}")
        slot_fields["init_queries"] = (grab(f"{prefix}.slot.init_queries")
                                       if cfg.variant == "boqsa" else None)
        cross = hd.CrossAttentionParams(
            wq=grab(f"{prefix}.cross.wq"), wk=grab(f"{prefix}.cross.wk"),
            wv=grab(f"{prefix}.cross.wv"), out=grab(f"{prefix}.cross.out"))
        return hd.PathwayParams(slot=hd.SlotAttentionParams(**slot_fields), cross=cross)

    params = HeadParams()
    if cfg.pathway in ("spatial", "dual"):
        params.spatial = pathway("spatial")
    if cfg.pathway in ("global", "dual"):
        params.global_ = pathway("global")
    if remaining:
        raise FormatError(f"checkpoint has unexpected tensors: {sorted(remaining)[:3]}")
    return params


def load_checkpoint(path: str) -> tuple[TrainState, TrainConfig]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def parse_checkpoint(blob: bytes) -> tuple[TrainState, TrainConfig]:
    cur = _Cursor(blob)
    magic = cur.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    version = cur.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    tensors = dict(cur.tensor_entry() for _ in range(cur.u32()))
    opt_entries = dict(cur.tensor_entry() for _ in range(cur.u32()))
    config_blob = cur.take(cur.u32()).decode("utf-8")
    if cur.offset != len(blob):
        raise FormatError("trailing bytes after config block", offset=cur.offset)

    kv: dict[str, str] = {}
    for line in config_blob.splitlines():
        if line:
            key, _, value = line.partition("=")
            kv[key] = value
    try:
        head_cfg = HeadConfig(
            concepts=int(kv["concepts"]), slot_dim=int(kv["slot_dim"]),
            input_dim=int(kv["input_dim"]), n_inputs=int(kv["n_inputs"]),
            n_classes=int(kv["n_classes"]), iters=int(kv["iters"]),
            variant=kv["variant"], heads=int(kv["heads"]), pathway=kv["pathway"],
            identity_mode=bool(int(kv["identity_mode"])))
        cfg = TrainConfig(
            head=head_cfg, epochs=int(kv["epochs"]), batch_size=int(kv["batch_size"]),
            lr=float(kv["lr"]), warmup_iters=int(kv["warmup_iters"]),
            weight_decay=float(kv["weight_decay"]),
            betas=(float(kv["beta1"]), float(kv["beta2"])), eps_opt=float(kv["eps_opt"]),
            seed=int(kv["seed"]),
            weights=LossWeights(lambda_expl=float(kv["lambda_expl"]),
                                lambda_sparse=float(kv["lambda_sparse"])))
        epoch = int(kv["epoch"])
        step = int(kv["step"])
        rng = np.random.default_rng(0)
        rng.bit_generator.state = {
            "bit_generator": kv["rng_algo"],
            "state": {"state": int(kv["rng_state"]), "inc": int(kv["rng_inc"])},
            "has_uint32": int(kv["rng_has_uint32"]),
            "uinteger": int(kv["rng_uinteger"]),
        }
    except KeyError as err:
        raise FormatError(f"checkpoint config is missing key {err}") from err

    params = _build_params(head_cfg, tensors)
    opt = OptimizerState.for_params(params)
    for name in opt.m:
        if "m:" + name not in opt_entries or "v:" + name not in opt_entries:
            raise FormatError(f"checkpoint is missing optimizer buffers for {name!r}")
        opt.m[name] = opt_entries["m:" + name].copy()
        opt.v[name] = opt_entries["v:" + name].copy()
    opt.t = step
    return TrainState(params=params, opt=opt, rng=rng, epoch=epoch), cfg
