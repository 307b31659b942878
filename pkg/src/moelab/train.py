"""Pretraining loop: Adam, warmup-stable-decay schedule, checkpoints, traces.

A run is a directory. train() writes into it:

    manifest.json              run description, incl. the fixed validation batch
    loss.csv                   one row per step: step,lr,ce,lb,rz,total
    checkpoints/step-NNNNNN/   evenly spaced model snapshots (atomic writes)
    traces/step-NNNNNN.jsonl   routing of the validation batch at that step

Everything is deterministic given (seed, config, corpus): batching is pointer
arithmetic over the corpus, not sampling, and the optimizer touches parameters
in their fixed dict order. Two runs with the same inputs produce byte-identical
outputs, and a trace file can be regenerated bit-exactly from its checkpoint
plus the manifest (see retrace).

Corpus files are little-endian: b"MTOK", u32 vocab size, then u32 token ids.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .backend import kernels
from .losses import (
    ETA_DEFAULT,
    GAMMA_DEFAULT,
    RouterBatchStats,
    layer_mean,
    load_balance_loss,
    router_z_loss,
    total_loss,
)
from .model import MoeModel, load_checkpoint, save_checkpoint
from .tensor import NonFiniteError, Tensor

MAGIC = b"MTOK"
RUN_FORMAT = "moelab-run-v1"


class CorpusError(ValueError):
    """Malformed corpus file; the message names the byte offset."""


@dataclass
class Corpus:
    vocab_size: int
    ids: np.ndarray   # (n,) int64


def write_corpus(path, vocab_size, ids):
    """Write magic, u32 vocab size, u32 token ids (all little-endian)."""
    ids = np.asarray(ids, dtype=np.int64)
    if vocab_size < 1 or vocab_size > 0xFFFFFFFF:
        raise ValueError(f"vocab size {vocab_size} not in [1, 2^32)")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ValueError(f"token ids outside [0, {vocab_size})")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.array(vocab_size, dtype="<u4").tobytes())
        f.write(ids.astype("<u4").tobytes())


def load_corpus(path):
    """Parse a corpus file; any malformation reports its byte offset."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CorpusError(f"{path}: bad magic at byte offset 0")
    if len(raw) < 8:
        raise CorpusError(f"{path}: truncated vocab size at byte offset 4")
    vocab_size = int(np.frombuffer(raw, dtype="<u4", count=1, offset=4)[0])
    if vocab_size == 0:
        raise CorpusError(f"{path}: zero vocab size at byte offset 4")
    body = raw[8:]
    if len(body) % 4:
        raise CorpusError(
            f"{path}: truncated token id at byte offset {8 + 4 * (len(body) // 4)}"
        )
    ids = np.frombuffer(body, dtype="<u4").astype(np.int64)
    if ids.size and ids.max() >= vocab_size:
        bad = int(np.argmax(ids >= vocab_size))
        raise CorpusError(
            f"{path}: token id {int(ids[bad])} >= vocab size {vocab_size} "
            f"at byte offset {8 + 4 * bad}"
        )
    return Corpus(vocab_size, ids)


def make_synthetic_corpus(vocab_size, n_tokens, seed=0, stickiness=0.9):
    """Low-entropy Markov stream: usually the successor id, sometimes a jump.

    The bigram structure gives a small model something learnable: entropy is
    far below ln(vocab_size), so cross-entropy has room to fall fast.
    """
    rng = np.random.default_rng(seed)
    follow = rng.random(n_tokens) < stickiness
    jumps = rng.integers(0, vocab_size, size=n_tokens)
    ids = np.empty(n_tokens, dtype=np.int64)
    cur = 0
    for i in range(n_tokens):
        cur = (cur + 1) % vocab_size if follow[i] else int(jumps[i])
        ids[i] = cur
    return Corpus(vocab_size, ids)


@dataclass
class TrainConfig:
    total_steps: int
    batch_size: int = 1024       # sequences per step
    seq_len: int = 2048
    max_lr: float = 3e-4
    min_lr: float = 3e-5
    warmup_ratio: float = 0.01
    decay_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    clip_norm: float = 1.0
    gamma: float = GAMMA_DEFAULT
    eta: float = ETA_DEFAULT
    seed: int = 0
    checkpoint_count: int = 10
    trace_cadence: int | None = None   # None: trace at checkpoint steps
    val_sequences: int = 2

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("batch_size and seq_len must be >= 1")
        if not 0.0 <= self.min_lr <= self.max_lr:
            raise ValueError("need 0 <= min_lr <= max_lr")
        if self.warmup_ratio < 0 or self.decay_ratio < 0:
            raise ValueError("schedule ratios must be nonnegative")
        if self.warmup_ratio + self.decay_ratio > 1.0:
            raise ValueError("warmup_ratio + decay_ratio must not exceed 1")
        if not 1 <= self.checkpoint_count <= self.total_steps:
            raise ValueError("checkpoint_count must be in [1, total_steps]")
        if self.trace_cadence is not None and self.trace_cadence < 1:
            raise ValueError("trace_cadence must be >= 1")
        if self.val_sequences < 1:
            raise ValueError("val_sequences must be >= 1")

    def checkpoint_steps(self):
        """checkpoint_count evenly spaced steps, always ending at total_steps."""
        total, count = self.total_steps, self.checkpoint_count
        return sorted({total * i // count for i in range(1, count + 1)})

    def trace_steps(self):
        if self.trace_cadence is None:
            return self.checkpoint_steps()
        steps = set(range(self.trace_cadence, self.total_steps + 1, self.trace_cadence))
        steps.add(self.total_steps)
        return sorted(steps)


def wsd_lr(step, cfg):
    """Warmup-stable-decay: linear up, flat, linear down to min_lr.

    Warmup spans the first ceil(warmup_ratio * total) steps starting from 0;
    decay spans the final ceil(decay_ratio * total) steps and lands exactly on
    min_lr at step == total_steps.
    """
    total = cfg.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = math.ceil(cfg.warmup_ratio * total)
    decay = math.ceil(cfg.decay_ratio * total)
    # ceil can make warm + decay overshoot tiny totals; keep phases ordered
    stable_end = max(warm, total - decay)
    if step < warm:
        return cfg.max_lr * (step / warm)
    if step <= stable_end:
        return cfg.max_lr
    # anchored at min_lr so the final step lands on it exactly
    return cfg.min_lr + (cfg.max_lr - cfg.min_lr) * ((total - step) / (total - stable_end))


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            m={name: np.zeros(p.data.size) for name, p in params.items()},
            v={name: np.zeros(p.data.size) for name, p in params.items()},
        )


def clip_gradients(grads, max_norm):
    """Scale all gradients in place so their global norm is at most max_norm."""
    sq = 0.0
    for name in grads:
        flat = grads[name].reshape(-1)
        sq += float(np.dot(flat, flat))
    norm = math.sqrt(sq)
    if max_norm > 0.0 and norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] *= scale
    return norm


def adam_step(params, grads, state, lr, cfg):
    """One bias-corrected Adam update over every parameter, in dict order."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.data.size)
        else:
            if not np.isfinite(g).all():
                bad = int(np.size(g) - np.isfinite(g).sum())
                raise NonFiniteError(
                    f"non-finite gradient for {name}: {bad} of {np.size(g)} entries"
                )
            g = np.ascontiguousarray(g).reshape(-1)
        kernels.adam_update(
            p.data.reshape(-1), g, state.m[name], state.v[name],
            lr, cfg.beta1, cfg.beta2, cfg.eps, bc1, bc2,
        )


def _next_batch(ids, pointer, batch_size, width):
    """batch_size consecutive windows of width tokens, cycling over ids."""
    n = ids.size
    rows = np.empty((batch_size, width), dtype=np.int64)
    for b in range(batch_size):
        rows[b] = ids[(pointer + np.arange(width)) % n]
        pointer = (pointer + width) % n
    return rows, pointer


def step_name(step):
    return f"step-{step:06d}"


def _trace_lines(model, val_inputs, step):
    """Route the validation batch and render one JSON line per (token, layer).

    Lines are ordered by (layer, sequence, position). Expert lists hold routed
    expert ids in descending gate order; shared experts never appear because
    they are unconditional.
    """
    n_seq, seq_len = val_inputs.shape
    _, outcomes = model.forward(val_inputs)
    lines = []
    for block, outcome in outcomes:
        for s in range(n_seq):
            for p in range(seq_len):
                row = s * seq_len + p
                record = {
                    "step": int(step),
                    "layer": int(block),
                    "seq": int(s),
                    "pos": int(p),
                    "token": int(val_inputs[s, p]),
                    "experts": [int(e) for e in outcome.indices[row]],
                    "gates": [float(g) for g in outcome.sel_gates.data[row]],
                }
                lines.append(json.dumps(record, separators=(",", ":")))
    return lines


@dataclass
class RunSummary:
    run_dir: str
    steps: int
    final_ce: float
    final_lb: float
    final_rz: float
    final_total: float
    checkpoint_steps: list = field(default_factory=list)
    trace_steps: list = field(default_factory=list)


def train(model_config, cfg, corpus, out_dir):
    """Run the full loop; returns a RunSummary. See the module docstring."""
    if corpus.vocab_size > model_config.vocab_size:
        raise ValueError(
            f"corpus vocab {corpus.vocab_size} exceeds model vocab {model_config.vocab_size}"
        )
    width = cfg.seq_len + 1
    val_len = cfg.val_sequences * width
    if corpus.ids.size < val_len + width:
        raise ValueError(
            f"corpus has {corpus.ids.size} tokens; need at least {val_len + width} "
            f"({cfg.val_sequences} validation sequences plus one training window)"
        )
    train_ids = corpus.ids[: corpus.ids.size - val_len]
    val = corpus.ids[corpus.ids.size - val_len:].reshape(cfg.val_sequences, width)
    val_inputs = val[:, :-1]

    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "traces"), exist_ok=True)
    ckpt_steps = cfg.checkpoint_steps()
    trace_steps = cfg.trace_steps()
    manifest = {
        "format": RUN_FORMAT,
        "model": asdict(model_config),
        "train": asdict(cfg),
        "corpus": {"vocab_size": corpus.vocab_size, "tokens": int(corpus.ids.size)},
        "checkpoint_steps": ckpt_steps,
        "trace_steps": trace_steps,
        "val_tokens": val.tolist(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")

    model = MoeModel.create(model_config, seed=cfg.seed)
    state = AdamState.for_params(model.params)
    pointer = 0
    last = None
    ckpt_set, trace_set = set(ckpt_steps), set(trace_steps)
    with open(os.path.join(out_dir, "loss.csv"), "w") as log:
        log.write("step,lr,ce,lb,rz,total\n")
        for step in range(1, cfg.total_steps + 1):
            batch, pointer = _next_batch(train_ids, pointer, cfg.batch_size, width)
            logits, outcomes = model.forward(batch[:, :-1])
            ce = T.cross_entropy(logits, batch[:, 1:].reshape(-1))
            if outcomes:
                stats = [RouterBatchStats.from_routing(o) for _, o in outcomes]
                lb = layer_mean([load_balance_loss(s) for s in stats])
                rz = layer_mean([router_z_loss(s) for s in stats])
            else:
                lb = Tensor(np.array(0.0))
                rz = Tensor(np.array(0.0))
            total = total_loss(ce, lb, rz, cfg.gamma, cfg.eta)

            for p in model.params.values():
                p.zero_grad()
            total.backward()
            grads = {name: p.grad for name, p in model.params.items() if p.grad is not None}
            clip_gradients(grads, cfg.clip_norm)
            lr = wsd_lr(step, cfg)
            adam_step(model.params, grads, state, lr, cfg)

            last = (float(ce.data), float(lb.data), float(rz.data), float(total.data))
            log.write(f"{step},{lr!r},{last[0]!r},{last[1]!r},{last[2]!r},{last[3]!r}\n")

            if step in ckpt_set:
                save_checkpoint(
                    os.path.join(out_dir, "checkpoints", step_name(step)),
                    model_config, step, model.params,
                )
            if step in trace_set:
                lines = _trace_lines(model, val_inputs, step)
                with open(os.path.join(out_dir, "traces", step_name(step) + ".jsonl"), "w") as tf:
                    tf.write("\n".join(lines) + "\n")

    return RunSummary(
        run_dir=str(out_dir), steps=cfg.total_steps,
        final_ce=last[0], final_lb=last[1], final_rz=last[2], final_total=last[3],
        checkpoint_steps=ckpt_steps, trace_steps=trace_steps,
    )


def retrace(run_dir, step):
    """Regenerate the trace lines for one step from its stored checkpoint.

    Uses only the checkpoint and the run manifest (which carries the fixed
    validation batch); the result is bit-identical to the file the training
    run wrote at that step.
    """
    with open(os.path.join(run_dir, "manifest.json")) as f:
        manifest = json.load(f)
    val = np.asarray(manifest["val_tokens"], dtype=np.int64)
    config, ck_step, params = load_checkpoint(
        os.path.join(run_dir, "checkpoints", step_name(step))
    )
    if ck_step != step:
        raise ValueError(f"checkpoint step {ck_step} does not match requested {step}")
    return _trace_lines(MoeModel(config, params), val[:, :-1], step)
