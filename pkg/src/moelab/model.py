"""Decoder-only transformer with mixture-of-experts FFN sublayers.

Block 1 keeps a dense FFN; every later block routes each token to a few
small expert FFNs: n_shared experts run unconditionally at weight 1.0, and
the router softmaxes over the remaining routed experts and picks the
(k_active - n_shared) largest gates without renormalizing them.

Attention is multi-head causal with rotary position embeddings; sublayers
are pre-normalized with RMS norm; no linear layer has a bias. Parameters
live in a flat name -> Tensor dict so checkpointing, Adam state, and init
all share one naming scheme.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02
INIT_TRUNC = 3.0  # resample beyond +-3 sigma


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int
    hidden_size: int
    dense_ffn_hidden: int
    moe_ffn_hidden: int
    n_experts: int = 64
    k_active: int = 8
    n_shared: int = 2
    n_heads: int = 0  # 0 means the default hidden_size // 64
    max_seq_len: int = 2048
    rope_base: float = 10000.0
    # Alternative routing reading: softmax over all experts including shared
    # ones, which then contribute with their softmax gate instead of 1.0.
    router_scores_shared: bool = False
    rms_eps: float = 1e-6

    def __post_init__(self):
        if self.n_heads == 0:
            object.__setattr__(self, "n_heads", max(1, self.hidden_size // 64))
        for name in ("vocab_size", "n_layers", "hidden_size", "dense_ffn_hidden",
                     "moe_ffn_hidden", "n_experts", "k_active", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.n_shared <= self.k_active <= self.n_experts:
            raise ValueError(
                f"need 0 <= n_shared <= k_active <= n_experts, got "
                f"{self.n_shared}/{self.k_active}/{self.n_experts}"
            )
        if self.hidden_size % self.n_heads:
            raise ValueError(f"hidden_size {self.hidden_size} not divisible by {self.n_heads} heads")
        if (self.hidden_size // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")

    @property
    def n_routed(self):
        return self.n_experts - self.n_shared

    @property
    def k_routed(self):
        return self.k_active - self.n_shared

    @property
    def head_dim(self):
        return self.hidden_size // self.n_heads

    @property
    def moe_block_ids(self):
        """0-based indices of the MoE blocks (every block after the first)."""
        return range(1, self.n_layers)


def _preset(n_layers, hidden, dense_ffn, moe_ffn):
    return ModelConfig(
        vocab_size=50304,
        n_layers=n_layers,
        hidden_size=hidden,
        dense_ffn_hidden=dense_ffn,
        moe_ffn_hidden=moe_ffn,
        n_experts=64,
        k_active=8,
        n_shared=2,
        max_seq_len=2048,
    )


# Named model cards, keyed active-total size. All share the 64-expert,
# top-8, 2-shared layout and a 50304-entry vocabulary (untied embeddings).
PRESETS = {
    "38M-100M": _preset(9, 256, 1368, 176),
    "98M-349M": _preset(9, 512, 2736, 352),
    "115M-459M": _preset(12, 512, 2736, 352),
    "290M-1.3B": _preset(9, 1024, 5472, 704),
    "419M-2.2B": _preset(15, 1024, 5472, 704),
    "721M-3.8B": _preset(12, 1536, 8208, 1056),
    "1.7B-10.3B": _preset(18, 2048, 10944, 1408),
}

# Training budget per preset: total FLOPs and the token count they imply.
PRESET_BUDGETS = {
    "38M-100M": {"flops": 1.0e18, "tokens": 4.4e9},
    "98M-349M": {"flops": 3.0e18, "tokens": 5.0e9},
    "115M-459M": {"flops": 6.0e18, "tokens": 8.7e9},
    "290M-1.3B": {"flops": 2.0e19, "tokens": 11.4e9},
    "419M-2.2B": {"flops": 3.0e19, "tokens": 11.9e9},
    "721M-3.8B": {"flops": 8.0e19, "tokens": 18.4e9},
    "1.7B-10.3B": {"flops": 2.4e20, "tokens": 23.1e9},
}


def _ffn_shapes(prefix, hidden, ffn_hidden):
    return {
        f"{prefix}.w_gate": (hidden, ffn_hidden),
        f"{prefix}.w_up": (hidden, ffn_hidden),
        f"{prefix}.w_down": (ffn_hidden, hidden),
    }


def param_shapes(config):
    """Canonical name -> shape map; the single source for init, counting, I/O."""
    h = config.hidden_size
    shapes = {"embed.weight": (config.vocab_size, h)}
    for i in range(config.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.attn_norm.gain"] = (h,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{w}"] = (h, h)
        shapes[f"{p}.ffn_norm.gain"] = (h,)
        if i == 0:
            shapes.update(_ffn_shapes(f"{p}.ffn", h, config.dense_ffn_hidden))
        else:
            n_scored = config.n_experts if config.router_scores_shared else config.n_routed
            if config.k_routed > 0:
                shapes[f"{p}.moe.router"] = (h, n_scored)
            for s in range(config.n_shared):
                shapes.update(_ffn_shapes(f"{p}.moe.shared.{s}", h, config.moe_ffn_hidden))
            for e in range(config.n_routed):
                shapes.update(_ffn_shapes(f"{p}.moe.experts.{e}", h, config.moe_ffn_hidden))
    shapes["final_norm.gain"] = (h,)
    shapes["unembed.weight"] = (h, config.vocab_size)
    return shapes


@dataclass(frozen=True)
class ParamCounts:
    total: int
    active: int


def count_params(config):
    """Total parameters, and the active subset touched per token."""
    shapes = param_shapes(config)
    total = sum(int(np.prod(s)) for s in shapes.values())
    expert_size = 3 * config.hidden_size * config.moe_ffn_hidden
    n_moe_layers = max(0, config.n_layers - 1)
    inactive = (config.n_experts - config.k_active) * expert_size * n_moe_layers
    return ParamCounts(total=total, active=total - inactive)


def _name_seed(name):
    digest = hashlib.blake2b(name.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _trunc_normal(rng, shape, std):
    out = rng.normal(0.0, 1.0, size=shape)
    bad = np.abs(out) > INIT_TRUNC
    while bad.any():
        out[bad] = rng.normal(0.0, 1.0, size=int(bad.sum()))
        bad = np.abs(out) > INIT_TRUNC
    return out * std


def init_params(config, seed=0):
    """Deterministic init: each parameter gets its own (name, seed) stream."""
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            params[name] = Tensor(np.ones(shape), requires_grad=True)
        else:
            rng = np.random.default_rng([seed, _name_seed(name)])
            params[name] = Tensor(_trunc_normal(rng, shape, INIT_STD), requires_grad=True)
    return params


@dataclass
class RoutingOutcome:
    """One MoE layer's routing decision for a batch of tokens.

    indices are routed-expert ids (0..n_routed-1). gates and logits span the
    set the router scored: just the routed experts by default, or all
    experts when router_scores_shared is on (then shared_scored = n_shared
    and routed expert j sits at scored column shared_scored + j).
    """

    indices: np.ndarray   # (T, k_routed) int64
    sel_gates: Tensor     # (T, k_routed)
    gates: Tensor         # (T, n_scored)
    logits: Tensor        # (T, n_scored)
    shared_scored: int = 0

    def dispatch_matrix(self):
        """Boolean (T, n_scored) indicator of which experts each token reached."""
        t, n_scored = self.gates.shape
        out = np.zeros((t, n_scored), dtype=bool)
        rows = np.arange(t)[:, None]
        out[rows, self.indices + self.shared_scored] = True
        if self.shared_scored:
            out[:, : self.shared_scored] = True
        return out


class ExpertFFN:
    """Gated FFN: (silu(x @ w_gate) * (x @ w_up)) @ w_down."""

    def __init__(self, w_gate, w_up, w_down):
        self.w_gate = w_gate
        self.w_up = w_up
        self.w_down = w_down

    def forward(self, x):
        return T.matmul(T.glu(T.matmul(x, self.w_gate), T.matmul(x, self.w_up)), self.w_down)


class MoELayer:
    """Router plus shared and routed expert FFNs."""

    def __init__(self, router, shared, experts, k_routed, scores_shared):
        self.router = router          # Tensor (H, n_scored) or None when k_routed == 0
        self.shared = shared          # list[ExpertFFN], always active at weight 1.0
        self.experts = experts        # list[ExpertFFN], routed
        self.k_routed = k_routed
        self.scores_shared = scores_shared

    @property
    def n_routed(self):
        return len(self.experts)

    def route(self, x):
        """Score, softmax, then select: gates keep their softmax values."""
        logits = T.matmul(x, self.router)
        gates = T.softmax(logits, axis=-1)
        offset = len(self.shared) if self.scores_shared else 0
        pool = gates.data[:, offset:] if offset else gates.data
        indices, _ = T.top_k(pool, self.k_routed)
        sel_gates = T.take_along_last(gates, indices + offset)
        return RoutingOutcome(
            indices=indices,
            sel_gates=sel_gates,
            gates=gates,
            logits=logits,
            shared_scored=offset,
        )

    def forward(self, x):
        """Combine shared experts with the gated routed experts.

        Shared experts carry weight 1.0, or their softmax gate when the
        router scores them too. Routed outputs are accumulated per selection
        slot rather than per expert, so relabeling experts changes nothing,
        not even summation order: each token's slot contributions add in
        gate-descending order. With no routed selections the router is
        unused and the output is the plain sum of shared experts.
        """
        t_tokens = x.shape[0]
        outcome = self.route(x) if self.k_routed > 0 else None

        out = None
        for s, expert in enumerate(self.shared):
            y = expert.forward(x)
            if outcome is not None and self.scores_shared:
                y = T.mul(T.narrow(outcome.gates, 1, s, 1), y)
            out = y if out is None else T.add(out, y)

        if outcome is None:
            return out, None
        slot_parts = [[] for _ in range(self.k_routed)]
        for e in range(self.n_routed):
            rows, slots = np.nonzero(outcome.indices == e)
            if rows.size == 0:
                continue
            expert_out = self.experts[e].forward(T.take_rows(x, rows))
            for j in range(self.k_routed):
                compact = np.nonzero(slots == j)[0]
                if compact.size == 0:
                    continue
                part = T.take_rows(expert_out, compact) if compact.size < rows.size else expert_out
                slot_parts[j].append(T.scatter_rows(part, rows[slots == j], t_tokens))
        for j in range(self.k_routed):
            slot_sum = slot_parts[j][0]
            for part in slot_parts[j][1:]:
                slot_sum = T.add(slot_sum, part)
            gated = T.mul(T.narrow(outcome.sel_gates, 1, j, 1), slot_sum)
            out = gated if out is None else T.add(out, gated)
        return out, outcome


class AttentionBlock:
    """Multi-head causal self-attention with rotary position embeddings."""

    def __init__(self, wq, wk, wv, wo, n_heads, rope_base):
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo
        self.n_heads = n_heads
        self.rope_base = rope_base

    def _rope_tables(self, seq_len, head_dim):
        half = head_dim // 2
        inv_freq = self.rope_base ** (-np.arange(half) * 2.0 / head_dim)
        angles = np.arange(seq_len)[:, None] * inv_freq[None, :]
        cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=-1)
        sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=-1)
        return Tensor(cos), Tensor(sin)

    @staticmethod
    def _rotate_half(x):
        half = x.shape[-1] // 2
        lo = T.narrow(x, -1, 0, half)
        hi = T.narrow(x, -1, half, half)
        return T.concat([T.mul(hi, -1.0), lo], axis=-1)

    def forward(self, x, batch, seq_len):
        """x: (batch*seq_len, H) row-major by (sequence, position)."""
        h = x.shape[-1]
        nh, hd = self.n_heads, h // self.n_heads

        def split_heads(t):
            return T.reshape(T.transpose(T.reshape(t, (batch, seq_len, nh, hd)), (0, 2, 1, 3)),
                             (batch * nh, seq_len, hd))

        q = split_heads(T.matmul(x, self.wq))
        k = split_heads(T.matmul(x, self.wk))
        v = split_heads(T.matmul(x, self.wv))
        cos, sin = self._rope_tables(seq_len, hd)
        q = T.add(T.mul(q, cos), T.mul(self._rotate_half(q), sin))
        k = T.add(T.mul(k, cos), T.mul(self._rotate_half(k), sin))
        att = T.causal_attention(q, k, v)
        merged = T.reshape(T.transpose(T.reshape(att, (batch, nh, seq_len, hd)), (0, 2, 1, 3)),
                           (batch * seq_len, h))
        return T.matmul(merged, self.wo)


class MoeModel:
    """Structured view over a flat parameter dict."""

    def __init__(self, config, params):
        self.config = config
        self.params = params
        self.blocks = []
        for i in range(config.n_layers):
            p = f"layers.{i}"
            attn = AttentionBlock(
                params[f"{p}.attn.wq"], params[f"{p}.attn.wk"],
                params[f"{p}.attn.wv"], params[f"{p}.attn.wo"],
                config.n_heads, config.rope_base,
            )
            if i == 0:
                ffn = ExpertFFN(params[f"{p}.ffn.w_gate"], params[f"{p}.ffn.w_up"],
                                params[f"{p}.ffn.w_down"])
            else:
                shared = [
                    ExpertFFN(params[f"{p}.moe.shared.{s}.w_gate"],
                              params[f"{p}.moe.shared.{s}.w_up"],
                              params[f"{p}.moe.shared.{s}.w_down"])
                    for s in range(config.n_shared)
                ]
                experts = [
                    ExpertFFN(params[f"{p}.moe.experts.{e}.w_gate"],
                              params[f"{p}.moe.experts.{e}.w_up"],
                              params[f"{p}.moe.experts.{e}.w_down"])
                    for e in range(config.n_routed)
                ]
                router = params.get(f"{p}.moe.router")
                ffn = MoELayer(router, shared, experts, config.k_routed,
                               config.router_scores_shared)
            self.blocks.append((
                params[f"{p}.attn_norm.gain"], attn,
                params[f"{p}.ffn_norm.gain"], ffn,
            ))

    @classmethod
    def create(cls, config, seed=0):
        return cls(config, init_params(config, seed))

    def forward(self, tokens):
        """tokens: (T,) or (B, T) int array. Returns (logits, routing outcomes).

        logits are (B*T, V) in row-major (sequence, position) order; outcomes
        is a list of (block_number, RoutingOutcome) with 1-based block numbers
        (block 1 is the dense one, so entries start at 2).
        """
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        batch, seq_len = tokens.shape
        if seq_len > self.config.max_seq_len:
            raise ValueError(f"sequence length {seq_len} exceeds max {self.config.max_seq_len}")
        x = T.embedding(self.params["embed.weight"], tokens.reshape(-1))
        outcomes = []
        for i, (attn_gain, attn, ffn_gain, ffn) in enumerate(self.blocks):
            a = attn.forward(T.rms_norm(x, attn_gain, self.config.rms_eps), batch, seq_len)
            x = T.add(x, a)
            hidden = T.rms_norm(x, ffn_gain, self.config.rms_eps)
            if isinstance(ffn, MoELayer):
                f, outcome = ffn.forward(hidden)
                if outcome is not None:
                    outcomes.append((i + 1, outcome))
            else:
                f = ffn.forward(hidden)
            x = T.add(x, f)
        x = T.rms_norm(x, self.params["final_norm.gain"], self.config.rms_eps)
        logits = T.matmul(x, self.params["unembed.weight"])
        return logits, outcomes


def save_checkpoint(path, config, step, params):
    """Write manifest.json plus one raw little-endian float64 file per parameter."""
    tmp = str(path) + ".tmp"
    if os.path.isdir(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    manifest = {"format": "moelab-checkpoint-v1", "step": int(step),
                "config": asdict(config), "params": {}}
    for name, tensor in sorted(params.items()):
        fname = name + ".bin"
        data = np.ascontiguousarray(tensor.data, dtype="<f8")
        with open(os.path.join(tmp, fname), "wb") as f:
            f.write(data.tobytes())
        manifest["params"][name] = {
            "shape": list(tensor.data.shape), "dtype": "<f8", "file": fname, "offset": 0,
        }
    with open(os.path.join(tmp, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    if os.path.isdir(path):
        backup = str(path) + ".old"
        os.rename(path, backup)
        os.rename(tmp, path)
        for fn in os.listdir(backup):
            os.unlink(os.path.join(backup, fn))
        os.rmdir(backup)
    else:
        os.rename(tmp, path)


def load_checkpoint(path):
    """Inverse of save_checkpoint; round-trips bit-exactly."""
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    config = ModelConfig(**manifest["config"])
    params = {}
    for name, meta in manifest["params"].items():
        with open(os.path.join(path, meta["file"]), "rb") as f:
            raw = f.read()
        arr = np.frombuffer(raw, dtype="<f8", offset=meta["offset"]).reshape(meta["shape"])
        params[name] = Tensor(arr.copy(), requires_grad=True)
    return config, manifest["step"], params
