"""Adam with warmup/decay, the pre-training loop, and toy fine-tuning."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .checkpoint import Checkpoint
from .model import QUERY_STREAM_PARAMS, ModelConfig, Params, forward_single, init_params, is_no_decay
from .objectives import ObjectiveSpec, batch_loss, prepare_batch
from .permute import CorruptionPolicy, check_mode
from .tensor import Tensor
from .tokenizer import CLS, SEP, Vocab, batch_iter, build_vocab, encode, pack_rows

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    weight_decay: float = 0.01
    warmup_ratio: float = 0.06
    total_steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    mode: str = "mpnet"
    predict_ratio: float = 0.15
    corruption: bool = True
    max_len: int = 128
    vocab_size: int = 1024
    clip_norm: float = 1.0
    init_std: float = 0.02
    checkpoint_every: int = 0

    def __post_init__(self):
        check_mode(self.mode)
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must be in [0, 1)")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be positive")

    def objective(self) -> ObjectiveSpec:
        return ObjectiveSpec(self.mode, self.predict_ratio, CorruptionPolicy() if self.corruption else None)


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    weight_decay: float = 0.01
    warmup_ratio: float = 0.06
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    max_len: int = 64
    clip_norm: float = 1.0


# ---------------------------------------------------------------------------
# config files


def _coerce(kind: str, raw) -> object:
    if not isinstance(raw, str):
        return raw
    if kind == "bool":
        low = raw.lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("1", "true", "yes")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind.startswith("tuple"):
        return tuple(float(x) for x in raw.replace("(", "").replace(")", "").split(","))
    return raw


def build_config(cls, values: dict):
    """Instantiate a config dataclass from (possibly string) values."""
    kinds = {f.name: str(f.type) for f in fields(cls)}
    unknown = set(values) - set(kinds)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    out = {}
    for key, raw in values.items():
        try:
            out[key] = _coerce(kinds[key], raw)
        except ValueError as exc:
            raise ValueError(f"bad value for {key}: {exc}") from None
    return cls(**out)


def read_config(path: Union[str, Path]) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment line."""
    return dict(ckpt_io.parse_manifest(Path(path).read_text(encoding="utf-8"), str(path)))


def split_config(values: dict) -> tuple[TrainConfig, dict]:
    """Route keys to TrainConfig or ModelConfig; returns the model overrides unbuilt."""
    model_keys = {f.name for f in fields(ModelConfig)}
    train = {k: v for k, v in values.items() if k not in model_keys}
    model = {k: v for k, v in values.items() if k in model_keys}
    return build_config(TrainConfig, train), model


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def moments(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": a for k, a in self.m.items()}
        out.update({f"v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_moments(cls, moments: Optional[dict[str, np.ndarray]], step: int) -> "OptimizerState":
        st = cls(step=step)
        for key, arr in (moments or {}).items():
            kind, name = key.split(".", 1)
            getattr(st, kind)[name] = arr.copy()
        return st


def lr_at(step: int, cfg) -> float:
    """Linear warmup from 0 to ``cfg.lr`` then linear decay to 0 at the last step."""
    total = cfg.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside 0..{total}")
    warm = round(cfg.warmup_ratio * total)
    if step < warm:
        return cfg.lr * step / warm
    if total == warm:
        return cfg.lr
    return cfg.lr * (total - step) / (total - warm)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global norm ``max_norm``; returns the norm before clipping."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


def adam_step(params: Params, grads: dict[str, np.ndarray], state: OptimizerState, cfg, lr: float) -> bool:
    """One bias-corrected Adam update with decoupled weight decay.

    A non-finite gradient aborts the step (nothing changes) and returns False.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient in %s at update %d; step skipped", name, state.step + 1)
            return False
    b1, b2 = cfg.betas
    t = state.step + 1
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, g in grads.items():
        p = params[name].data
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay and not is_no_decay(name):
            update = update + cfg.weight_decay * p
        p -= lr * update
    state.step = t
    return True


def collect_grads(params: Params) -> dict[str, np.ndarray]:
    """Copy of every gradient, zeros where a parameter got none."""
    return {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}


# ---------------------------------------------------------------------------
# pre-training


@dataclass(frozen=True)
class StepMetrics:
    step: int
    mode: str
    loss: float
    lr: float
    grad_norm: float
    tokens_per_sec: float
    applied: bool = True

    def line(self) -> str:
        skip = "" if self.applied else " skipped=1"
        return (f"step={self.step} mode={self.mode} loss={self.loss:.6f} lr={self.lr:.3e} "
                f"gnorm={self.grad_norm:.4f} tok/s={self.tokens_per_sec:.1f}{skip}")

    def deterministic_part(self) -> tuple:
        return (self.step, self.mode, self.loss, self.lr, self.grad_norm, self.applied)


@dataclass
class PretrainResult:
    params: Params
    model_cfg: ModelConfig
    vocab: Vocab
    state: OptimizerState
    metrics: list[StepMetrics]
    checkpoints: list[Path] = field(default_factory=list)


def train_meta(cfg: TrainConfig) -> dict[str, str]:
    out = {}
    for k, v in dataclasses.asdict(cfg).items():
        out[f"train.{k}"] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
    return out


def _save(path: Path, params, model_cfg, vocab, state, cfg) -> Path:
    return ckpt_io.save(path, Checkpoint(model_cfg, params, state.step, train_meta(cfg), state.moments(), vocab))


def pretrain(cfg: TrainConfig, corpus: Sequence[str], model_cfg: Optional[ModelConfig] = None,
             out_dir: Optional[Union[str, Path]] = None, resume: Optional[Union[str, Path]] = None,
             log_path: Optional[Union[str, Path]] = None, stop_after: Optional[int] = None,
             on_step: Optional[Callable[[StepMetrics], None]] = None) -> PretrainResult:
    """Pre-train on ``corpus`` lines.

    Every random draw is keyed on (seed, step) or (seed, epoch), so a run
    resumed from a checkpoint replays the rest of an uninterrupted run.
    ``stop_after`` ends the loop early (after that many total steps) without
    changing the schedule, which is how interrupted runs are simulated.
    """
    model_cfg = model_cfg or ModelConfig()
    if resume is not None:
        ck = ckpt_io.load(resume)
        if ck.vocab is None:
            raise ckpt_io.CheckpointError(f"{resume}: checkpoint has no vocabulary")
        vocab, model_cfg, params = ck.vocab, ck.model_cfg, ck.params
        state = OptimizerState.from_moments(ck.moments, ck.step)
    else:
        vocab = build_vocab(corpus, cfg.vocab_size)
        model_cfg = dataclasses.replace(model_cfg, vocab=len(vocab), max_pos=max(model_cfg.max_pos, cfg.max_len))
        params = init_params(model_cfg, cfg.seed, cfg.init_std)
        state = OptimizerState()
    if model_cfg.max_pos < cfg.max_len:
        raise ValueError(f"max_len={cfg.max_len} exceeds the model's max_pos={model_cfg.max_pos}")

    sentences = [encode(vocab, line) for line in corpus]
    if not any(len(s) for s in sentences):
        raise ValueError("corpus is empty after tokenization")
    rows_per_epoch = len(pack_rows(sentences, cfg.max_len))
    per_epoch = math.ceil(rows_per_epoch / cfg.batch_size)
    spec = cfg.objective()
    out = Path(out_dir) if out_dir is not None else None
    logfh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        logfh = open(log_path, "a", encoding="utf-8")
    result = PretrainResult(params, model_cfg, vocab, state, [])
    epoch_batches: tuple[int, list] = (-1, [])
    end = cfg.total_steps if stop_after is None else min(stop_after, cfg.total_steps)
    try:
        for step in range(state.step, end):
            epoch, idx = divmod(step, per_epoch)
            if epoch_batches[0] != epoch:
                epoch_batches = (epoch, list(batch_iter(sentences, cfg.max_len, cfg.batch_size, [cfg.seed, epoch])))
            batch = epoch_batches[1][idx]
            t0 = time.perf_counter()
            prepared = prepare_batch(spec, batch, [cfg.seed, step], model_cfg.vocab)
            for p in params.values():
                p.zero_grad()
            loss, _ = batch_loss(params, model_cfg, prepared, np.random.default_rng([cfg.seed, step, 1]))
            loss.backward()
            grads = collect_grads(params)
            norm = clip_grads(grads, cfg.clip_norm)
            lr = lr_at(step + 1, cfg)
            applied = adam_step(params, grads, state, cfg, lr)
            if not applied:
                state.step += 1  # keep the schedule aligned with the data
            dt = max(time.perf_counter() - t0, 1e-9)
            m = StepMetrics(step + 1, cfg.mode, loss.item(), lr, norm, int(batch.valid.sum()) / dt, applied)
            result.metrics.append(m)
            if logfh:
                logfh.write(m.line() + "\n")
                logfh.flush()
            if on_step:
                on_step(m)
            if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                result.checkpoints.append(_save(out / f"step{step + 1}.ckpt", params, model_cfg, vocab, state, cfg))
        if out is not None:
            result.checkpoints.append(_save(out / "final.ckpt", params, model_cfg, vocab, state, cfg))
    finally:
        if logfh:
            logfh.close()
    return result


# ---------------------------------------------------------------------------
# fine-tuning


def read_tsv(path: Union[str, Path]) -> list[tuple[str, str]]:
    """``label<TAB>text`` rows; blank lines are skipped."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for num, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{num}: expected label<TAB>text")
            label, text = line.split("\t", 1)
            rows.append((label.strip(), text.strip()))
    return rows


def param_checksum(params: Params, names: Iterable[str] = QUERY_STREAM_PARAMS) -> str:
    h = hashlib.sha256()
    for name in names:
        h.update(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class FinetuneResult:
    labels: list[str]
    accuracy: float
    predictions: list[str]
    encoder: Params
    head: Params
    losses: list[float]
    warnings: list[str]


def _encode_rows(vocab: Vocab, texts: Sequence[str], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    seqs = [[CLS] + encode(vocab, t).ids[: max_len - 2] + [SEP] for t in texts]
    n = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), n), dtype=np.int64)
    valid = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        valid[i, :len(s)] = True
    return ids, valid


def _classify(encoder: Params, head: Params, cfg: ModelConfig, ids, valid, rng=None) -> Tensor:
    h = forward_single(encoder, cfg, ids, valid, rng)
    B, n, H = h.shape
    cls = T.take_rows(T.reshape(h, (B * n, H)), np.arange(B) * n)
    return T.add(T.matmul(cls, head["w"]), head["b"])


def finetune(params: Params, model_cfg: ModelConfig, vocab: Vocab, train: Sequence[tuple[str, str]],
             dev: Sequence[tuple[str, str]], cfg: FinetuneConfig = FinetuneConfig()) -> FinetuneResult:
    """Train a linear head on the [CLS] hidden, updating the encoder too.

    Query-stream parameters are left out of the encoder copy entirely, so
    they can be neither read nor changed. The head bias starts at the log
    class priors, so zero epochs predict the majority class.
    """
    if not train:
        raise ValueError("empty training split")
    labels = sorted({lab for lab, _ in train})
    lab_index = {lab: i for i, lab in enumerate(labels)}
    encoder = {k: Tensor(p.data.copy(), requires_grad=True, name=k)
               for k, p in params.items() if k not in QUERY_STREAM_PARAMS}
    counts = np.bincount([lab_index[lab] for lab, _ in train], minlength=len(labels))
    head = {"w": Tensor(np.zeros((model_cfg.hidden, len(labels))), requires_grad=True, name="head.w"),
            "b": Tensor(np.log(counts / counts.sum()), requires_grad=True, name="head.b")}
    every = {**{f"enc.{k}": p for k, p in encoder.items()}, "head.w": head["w"], "head.b": head["b"]}

    ids, valid = _encode_rows(vocab, [t for _, t in train], cfg.max_len)
    y = np.array([lab_index[lab] for lab, _ in train])
    per_epoch = math.ceil(len(train) / cfg.batch_size)
    sched = dataclasses.replace(TrainConfig(), lr=cfg.lr, warmup_ratio=cfg.warmup_ratio,
                                total_steps=max(1, per_epoch * cfg.epochs))
    state = OptimizerState()
    losses: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        for lo in range(0, len(order), cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            cols = valid[sel].any(axis=0)
            for p in every.values():
                p.zero_grad()
            logits = _classify(encoder, head, model_cfg, ids[sel][:, cols], valid[sel][:, cols],
                               np.random.default_rng([cfg.seed, step, 1]))
            loss = T.cross_entropy(logits, y[sel])
            loss.backward()
            grads = collect_grads(every)
            clip_grads(grads, cfg.clip_norm)
            step += 1
            adam_step(every, grads, state, cfg, lr_at(step, sched))
            losses.append(loss.item())

    warnings: list[str] = []
    preds: list[str] = []
    correct = 0
    if dev:
        dev_ids, dev_valid = _encode_rows(vocab, [t for _, t in dev], cfg.max_len)
        with T.no_grad():
            scores = _classify(encoder, head, model_cfg, dev_ids, dev_valid).data
        preds = [labels[i] for i in scores.argmax(axis=1)]
        unseen = sorted({lab for lab, _ in dev} - set(labels))
        for lab in unseen:
            msg = f"dev label {lab!r} does not occur in the training split; counted as wrong"
            log.warning(msg)
            warnings.append(msg)
        correct = sum(p == lab for p, (lab, _) in zip(preds, dev))
    accuracy = correct / len(dev) if dev else float("nan")
    return FinetuneResult(labels, accuracy, preds, encoder, head, losses, warnings)
