"""Routing analytics over trace files: specialization, co-activation, saturation.

All three metrics are ratios of record counts over the traced validation set,
computed per (layer, step) group:

    specialization(t, e)  fraction of token t's occurrences routed to expert e
    coactivation(i, j)    fraction of i's activations where j was also active
    saturation(t, T, k)   mean top-k selection overlap between steps t and T

Shared experts never appear in traces (they are unconditional), so every
metric is over routed experts only. "Token" always means token id, not a
position. Undefined ratios (absent token, never-activated expert) raise;
returning 0 would silently corrupt trend series.

Counting is exact integer arithmetic; only the final ratio is a float. For
any token t present in a group, sum_e hits(t, e) == k_routed * occurrences(t)
holds exactly in integers, which is the identity behind the per-token
specialization sum. The float ratios themselves can miss k_routed by an ulp
when occurrences is not a power of two, so tests of the identity should use
specialization_counts.
"""

from __future__ import annotations

import csv
import json
import os
from collections import Counter
from dataclasses import dataclass


@dataclass(frozen=True)
class RouteRecord:
    step: int
    layer: int
    seq: int
    pos: int
    token: int
    experts: tuple   # routed expert ids, descending gate order
    gates: tuple


_FIELDS = ("step", "layer", "seq", "pos", "token", "experts", "gates")


def _parse_record(obj, where):
    if not isinstance(obj, dict):
        raise ValueError(f"{where}: record is not an object")
    missing = [k for k in _FIELDS if k not in obj]
    if missing:
        raise ValueError(f"{where}: missing fields {missing}")
    experts = tuple(int(e) for e in obj["experts"])
    gates = tuple(float(g) for g in obj["gates"])
    if len(experts) != len(gates):
        raise ValueError(f"{where}: {len(experts)} experts but {len(gates)} gates")
    if len(set(experts)) != len(experts):
        raise ValueError(f"{where}: duplicate expert ids {list(experts)}")
    return RouteRecord(
        step=int(obj["step"]), layer=int(obj["layer"]),
        seq=int(obj["seq"]), pos=int(obj["pos"]),
        token=int(obj["token"]), experts=experts, gates=gates,
    )


class TraceSet:
    """Route records grouped by (step, layer), all with one expert-list width."""

    def __init__(self, records):
        self.groups = {}
        width = None
        for r in records:
            if width is None:
                width = len(r.experts)
            elif len(r.experts) != width:
                raise ValueError(
                    f"inconsistent expert-list width: {len(r.experts)} vs {width}"
                )
            self.groups.setdefault((r.step, r.layer), []).append(r)
        self.k_routed = width

    @classmethod
    def load(cls, path):
        """Load one .jsonl file, or every *.jsonl in a directory (sorted)."""
        if os.path.isdir(path):
            names = sorted(n for n in os.listdir(path) if n.endswith(".jsonl"))
            if not names:
                raise ValueError(f"{path}: no .jsonl trace files")
            paths = [os.path.join(path, n) for n in names]
        else:
            paths = [path]
        records = []
        for p in paths:
            with open(p) as f:
                for lineno, line in enumerate(f, start=1):
                    line = line.strip()
                    if not line:
                        continue
                    where = f"{p}:{lineno}"
                    try:
                        obj = json.loads(line)
                    except json.JSONDecodeError as e:
                        raise ValueError(f"{where}: bad JSON ({e.msg})") from None
                    records.append(_parse_record(obj, where))
        return cls(records)

    def pairs(self):
        """Available (step, layer) keys, sorted."""
        return sorted(self.groups)

    def group(self, layer, step):
        key = (step, layer)
        if key not in self.groups:
            available = ", ".join(f"(step={s}, layer={l})" for s, l in self.pairs())
            raise KeyError(
                f"no trace for step={step}, layer={layer}; available: {available or 'none'}"
            )
        return self.groups[key]

    def occurrences(self, layer, step):
        """Token-frequency table of the group: token id -> record count."""
        return Counter(r.token for r in self.group(layer, step))


def specialization_counts(traces, layer, step, token):
    """Exact integers behind specialization: (occurrences, {expert: hits}).

    sum(hits.values()) == k_routed * occurrences always holds exactly.
    """
    occ = 0
    hits = Counter()
    for r in traces.group(layer, step):
        if r.token == token:
            occ += 1
            hits.update(r.experts)
    if occ == 0:
        raise ValueError(f"token {token} never occurs at layer {layer}, step {step}")
    return occ, dict(hits)


def specialization(traces, layer, step, token, expert):
    """Fraction of the token's occurrences whose expert list contains expert."""
    occ, hits = specialization_counts(traces, layer, step, token)
    return hits.get(expert, 0) / occ


def top_specialized_tokens(traces, layer, step, expert, n):
    """The n tokens most specialized to the expert; ties break by ascending id.

    Only tokens the expert actually served appear, so an expert that was never
    activated yields an empty list.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    occ = traces.occurrences(layer, step)
    hits = Counter()
    for r in traces.group(layer, step):
        if expert in r.experts:
            hits[r.token] += 1
    scored = [(hits[t] / occ[t], t) for t in hits]
    scored.sort(key=lambda sv: (-sv[0], sv[1]))
    return [t for _, t in scored[:n]]


def _activation_counts(records, i, j):
    only_i = both = 0
    for r in records:
        if i in r.experts:
            only_i += 1
            if j in r.experts:
                both += 1
    return only_i, both


def coactivation(traces, layer, step, i, j):
    """Directional: of the records activating i, the fraction also activating j."""
    count_i, both = _activation_counts(traces.group(layer, step), i, j)
    if count_i == 0:
        raise ValueError(f"expert {i} never activated at layer {layer}, step {step}")
    return both / count_i


@dataclass
class HeatmapMatrix:
    expert_ids: list    # ascending ids of the selected experts
    matrix: list        # row i -> column j co-activation, matching expert_ids
    complete: bool      # False when fewer active experts than requested

    def score(self, i, j):
        return self.matrix[self.expert_ids.index(i)][self.expert_ids.index(j)]


def coactivation_heatmap(traces, layer, step, n=16):
    """Pairwise co-activation over the n experts with the strongest pairing.

    Experts rank by their best off-diagonal score (ties by ascending id);
    labels of the selected experts are reported in ascending id order. When
    fewer than n experts were ever activated the matrix covers all of them
    and complete is False.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    records = traces.group(layer, step)
    counts = Counter()
    pair_counts = Counter()
    for r in records:
        for a in r.experts:
            counts[a] += 1
            for b in r.experts:
                if b != a:
                    pair_counts[(a, b)] += 1
    active = sorted(counts)
    best = {
        i: max((pair_counts[(i, j)] / counts[i] for j in active if j != i), default=0.0)
        for i in active
    }
    ranked = sorted(active, key=lambda i: (-best[i], i))
    chosen = sorted(ranked[:n])
    matrix = [
        [(pair_counts[(i, j)] / counts[i]) if i != j else 1.0 for j in chosen]
        for i in chosen
    ]
    return HeatmapMatrix(expert_ids=chosen, matrix=matrix, complete=len(active) >= n)


def _top_k(record, k):
    order = sorted(range(len(record.gates)), key=lambda idx: (-record.gates[idx], idx))
    return {record.experts[idx] for idx in order[:k]}


SATURATION_K = (1, 2, 4, 8)


def saturation(traces, layer, step, final_step, k_eval):
    """Mean over traced tokens of top-k selection overlap with the final step.

    Records are joined by (seq, pos); both steps must trace the same token at
    every position. k_eval counts the highest-gate experts of each record.
    """
    if k_eval not in SATURATION_K:
        raise ValueError(f"k_eval must be one of {SATURATION_K}, got {k_eval}")
    if k_eval > traces.k_routed:
        raise ValueError(f"k_eval {k_eval} exceeds traced width {traces.k_routed}")
    early = {(r.seq, r.pos): r for r in traces.group(layer, step)}
    late = {(r.seq, r.pos): r for r in traces.group(layer, final_step)}
    if early.keys() != late.keys():
        raise ValueError(
            f"steps {step} and {final_step} trace different positions at layer {layer}"
        )
    overlap = 0
    for key, r in early.items():
        if r.token != late[key].token:
            raise ValueError(
                f"token mismatch at seq={key[0]}, pos={key[1]}: "
                f"{r.token} vs {late[key].token}"
            )
        overlap += len(_top_k(r, k_eval) & _top_k(late[key], k_eval))
    return overlap / (k_eval * len(early))


def series(traces, layers, steps, metric_fn):
    """Long-form metric table over a (layer, step) grid.

    metric_fn(traces, layer, step) returns {label: value}; rows come out as
    (layer, step, label, value) with labels sorted. Grid points with no trace
    are returned in a gap list instead of raising or being dropped.
    """
    rows = []
    gaps = []
    for layer in layers:
        for step in steps:
            if (step, layer) not in traces.groups:
                gaps.append((layer, step))
                continue
            values = metric_fn(traces, layer, step)
            for label in sorted(values):
                rows.append((layer, step, label, values[label]))
    return rows, gaps


def saturation_metric(final_step, k_evals):
    def fn(traces, layer, step):
        return {f"saturation_k{k}": saturation(traces, layer, step, final_step, k)
                for k in k_evals}
    return fn


def specialization_metric(pairs):
    """pairs: iterable of (token, expert) to follow across checkpoints."""
    def fn(traces, layer, step):
        return {f"spec_t{t}_e{e}": specialization(traces, layer, step, t, e)
                for t, e in pairs}
    return fn


def coactivation_metric(pairs):
    def fn(traces, layer, step):
        return {f"coact_{i}_to_{j}": coactivation(traces, layer, step, i, j)
                for i, j in pairs}
    return fn


def write_heatmap_csv(path, heatmap):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row_expert", "col_expert", "score"])
        for i, row_id in enumerate(heatmap.expert_ids):
            for j, col_id in enumerate(heatmap.expert_ids):
                w.writerow([row_id, col_id, repr(heatmap.matrix[i][j])])


def write_series_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "step", "label", "value"])
        for layer, step, label, value in rows:
            w.writerow([layer, step, label, repr(value)])
