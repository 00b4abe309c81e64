"""Initialisation, Adam with a Noam schedule, the multi-task loop, checkpoints and averaging."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import MixSchedule, TaskBatcher, mix
from .decoding import BeamConfig, translate_sources
from .losses import GLOSS2TEXT, MT, SIGN2GLOSS, SIGN2TEXT, TASKS, task_loss
from .metrics import bleu
from .model import ModelConfig, SLTModel, param_shapes
from .tensor import Tensor
from .tokenizer import DropoutPolicy

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SLTC"
CKPT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 1
    max_steps: int = 5000
    warmup: int = 4000
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.998
    adam_eps: float = 1e-9
    l2: float = 0.0
    grad_clip: float = 0.0
    xavier_gain: float = 0.5
    batch_tokens: int = 2048
    bucket_pool: int = 0
    mt_ratio: int = 3
    tasks: tuple = (SIGN2GLOSS, SIGN2TEXT, GLOSS2TEXT)
    bpe_dropout: float = 0.2
    stochastic_rate: float = 0.6
    gate_mode: str = "per_epoch"
    feature_noise: float = 0.0
    eval_every: int = 500
    keep_best_k: int = 10
    dev_beam: int = 8
    length_penalty: float = 1.0
    log_every: int = 100

    def __post_init__(self):
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if self.keep_best_k < 1:
            raise ValueError("keep_best_k must be >= 1")
        self.tasks = tuple(self.tasks)


# -- initialisation -----------------------------------------------------------------

def init_params(config, seed, gain=0.5):
    """Xavier-uniform matrices (embeddings included), zero biases/shifts, unit norm scales."""
    rng = T.rng_stream(seed, "init")
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 2:
            a = gain * math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-a, a, size=shape)
        elif name.endswith(".g"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(np.float32)
    return params


def to_tensors(arrays):
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def build_model(config, seed, gain=0.5):
    return SLTModel(config, to_tensors(init_params(config, seed, gain)), T.rng_stream(seed, "dropout"))


# -- optimisation ------------------------------------------------------------------------

def lr_at(step, d_model, warmup, scale=1.0):
    if step < 1:
        raise ValueError(f"learning rate is defined from step 1, got {step}")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    """Bias-corrected Adam; parameters without a gradient this step are left untouched."""

    def __init__(self, params, beta1=0.9, beta2=0.998, eps=1e-9, l2=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps, self.l2 = beta1, beta2, eps, l2
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for {name} at optimizer step {self.t}")
            if self.l2:
                g = g + self.l2 * p.data
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def clip_gradients(params, max_norm):
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params.values() if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def forward_loss(model, batch, train=True):
    """Encode, decode and score one homogeneous task batch."""
    spec = TASKS[batch.task]
    cfg = model.config
    enc = model.encode_batch(batch, train=train)
    logits = model.decode(batch.tgt_in, enc, train=train)
    ctc_lp = T.log_softmax(model.ctc_logits(enc)) if spec.uses_ctc else None
    return task_loss(batch, logits, ctc_lp, spec, cfg.ctc_alpha, cfg.label_smoothing, cfg.pad_id, cfg.blank_id)


# -- checkpoints ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict
    step: int
    config: dict | None = None
    metrics: dict = field(default_factory=dict)


def save_checkpoint(path, params, step, config=None, metrics=None):
    """Binary parameter file plus a JSON sidecar with the config snapshot and dev metrics."""
    arrays = {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in params.items()}
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        f.write(struct.pack("<Q", step))
    side = {"step": step, "config": config, "metrics": metrics or {}}
    Path(str(path) + ".json").write_text(json.dumps(side, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: missing SLTC magic")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off, params = 12, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            params[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
            off += 4 * n
        (step,) = struct.unpack_from("<Q", raw, off)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    if off + 8 != len(raw):
        raise CheckpointError(f"{path}: unexpected trailing bytes")
    side = Path(str(path) + ".json")
    config, metrics = None, {}
    if side.exists():
        meta = json.loads(side.read_text(encoding="utf-8"))
        config, metrics = meta.get("config"), meta.get("metrics", {})
    return Checkpoint(params, step, config, metrics)


def average_checkpoints(paths):
    """Element-wise mean of the named arrays of several checkpoints."""
    if not paths:
        raise CheckpointError("no checkpoints to average")
    ckpts = [load_checkpoint(p) for p in paths]
    ref = ckpts[0]
    for path, c in zip(paths[1:], ckpts[1:]):
        if set(c.params) != set(ref.params):
            diff = sorted(set(c.params) ^ set(ref.params))
            raise CheckpointError(f"{path}: parameter sets differ ({diff[0]})")
        for name, arr in c.params.items():
            if arr.shape != ref.params[name].shape:
                raise CheckpointError(f"{path}: parameter {name} has shape {arr.shape}, "
                                      f"expected {ref.params[name].shape}")
    params = {}
    for name in ref.params:
        acc = np.zeros(ref.params[name].shape, dtype=np.float64)
        for c in ckpts:
            acc += c.params[name]
        params[name] = (acc / len(ckpts)).astype(np.float32)
    return Checkpoint(params, max(c.step for c in ckpts), ref.config,
                      {"averaged_from": [Path(p).name for p in paths]})


def model_from_checkpoint(ckpt, config=None, seed=0):
    cfg = config or ModelConfig.from_dict(ckpt.config["model"])
    params = dict(ckpt.params)
    if cfg.ctc_bias and "ctc.b" not in params:
        params["ctc.b"] = np.zeros(cfg.vocab_size, dtype=np.float32)
    return SLTModel(cfg, to_tensors(params), T.rng_stream(seed, "dropout"))


# -- training loop -----------------------------------------------------------------------------

@dataclass
class TrainResult:
    out_dir: Path
    best: list                  # [(bleu, step, path)] best first
    last_checkpoint: Path
    dev_history: list           # [(step, bleu)]
    steps: int
    seconds: float


def _ckpt_name(step):
    return f"ckpt_{step:07d}.sltc"


def dev_bleu(model, tokenizer, dev, beam):
    hyps = translate_sources(model, tokenizer, SIGN2TEXT, dev.features, beam)
    return bleu(hyps, dev.texts).score, hyps


def train(train_corpus, dev_corpus, tokenizer, model_config, train_config, out_dir,
          mt_corpus=None, schedule=None, model=None):
    """Run the multi-task loop and keep the best-k checkpoints by dev Sign2Text BLEU.

    Writes ``metrics.tsv`` (``step<TAB>task<TAB>loss`` per step and
    ``step<TAB>dev_bleu<TAB>value`` per evaluation), checkpoints and
    ``best.tsv`` into ``out_dir``.
    """
    tc = train_config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if schedule is None:
        use_mt = mt_corpus is not None and len(mt_corpus) > 0 and tc.mt_ratio > 0
        schedule = MixSchedule(tc.mt_ratio if use_mt else 0, tc.tasks)
    if model is None:
        model = build_model(model_config, tc.seed, tc.xavier_gain)
    params = model.params
    policy = DropoutPolicy(tc.bpe_dropout, tc.stochastic_rate)
    streams = {}
    for task in set(schedule.pattern()):
        corpus = mt_corpus if task == MT else train_corpus
        streams[task] = iter(TaskBatcher(corpus, task, tokenizer, policy, tc.batch_tokens,
                                         T.rng_stream(tc.seed, f"batches.{task}"), train=True,
                                         feature_noise=tc.feature_noise, gate_mode=tc.gate_mode,
                                         bucket_pool=tc.bucket_pool))
    batches = mix(streams, schedule)
    opt = Adam(params, tc.beta1, tc.beta2, tc.adam_eps, tc.l2)
    beam = BeamConfig(tc.dev_beam, tc.length_penalty)
    snapshot = {"model": asdict(model_config), "train": asdict(tc)}

    metrics_path = out / "metrics.tsv"
    mlog = open(metrics_path, "w", encoding="utf-8", newline="\n")
    best, history = [], []
    start = time.perf_counter()
    last = out / _ckpt_name(0)
    save_checkpoint(last, params, 0, snapshot)

    def evaluate(step):
        nonlocal best
        score, _ = dev_bleu(model, tokenizer, dev_corpus, beam)
        history.append((step, score))
        mlog.write(f"{step}\tdev_bleu\t{score:.4f}\n")
        mlog.flush()
        path = out / _ckpt_name(step)
        save_checkpoint(path, params, step, snapshot, {"dev_sign2text_bleu": score})
        best.append((score, step, path))
        best.sort(key=lambda x: (-x[0], -x[1]))
        for _, s, p in best[tc.keep_best_k:]:
            if s != step and p.exists():
                p.unlink()
                Path(str(p) + ".json").unlink(missing_ok=True)
        best = best[:tc.keep_best_k]
        log.info("step %d  dev Sign2Text BLEU %.2f", step, score)
        return path

    try:
        running = {}
        for step in range(1, tc.max_steps + 1):
            batch = next(batches)
            opt.zero_grad()
            lb = forward_loss(model, batch, train=True)
            loss = lb.total.item()
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite {batch.task} loss at step {step}")
            lb.total.backward()
            if tc.grad_clip > 0:
                clip_gradients(params, tc.grad_clip)
            opt.step(lr_at(step, model_config.d_model, tc.warmup, tc.lr_scale))
            mlog.write(f"{step}\t{batch.task}\t{loss:.6f}\n")
            running.setdefault(batch.task, []).append(loss)
            if tc.log_every and step % tc.log_every == 0:
                log.info("step %d  " + "  ".join(f"{k}=%.3f" for k in sorted(running)),
                         step, *[float(np.mean(running[k])) for k in sorted(running)])
                running = {}
            if step % tc.eval_every == 0 or step == tc.max_steps:
                last = evaluate(step)
    finally:
        mlog.close()
    with open(out / "best.tsv", "w", encoding="utf-8", newline="\n") as f:
        for score, step, path in best:
            f.write(f"{step}\t{score:.4f}\t{path.name}\n")
    return TrainResult(out, best, last, history, tc.max_steps, time.perf_counter() - start)


def read_best(run_dir, k=None):
    """Checkpoint paths listed in a run's ``best.tsv``, best first."""
    run_dir = Path(run_dir)
    rows = [line.split("\t") for line in (run_dir / "best.tsv").read_text(encoding="utf-8").splitlines() if line]
    paths = [run_dir / r[2] for r in rows]
    return paths[:k] if k else paths


def config_fields(cls):
    return [f.name for f in fields(cls)]


def set_deterministic():
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        return None
    return threadpool_limits(1)
