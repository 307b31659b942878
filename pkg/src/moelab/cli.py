"""Command-line entry point: train, analyze, scaling.

Config layering for training runs: built-in defaults, then the JSON config
file, then flags. The fully merged config is echoed into the run directory
as config.json so every run is self-describing. Exit codes: 0 success,
1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import typing
from dataclasses import asdict, fields

from .analytics import (
    TraceSet,
    coactivation_heatmap,
    saturation_metric,
    series,
    specialization_counts,
    write_heatmap_csv,
    write_series_csv,
)
from .model import PRESETS, ModelConfig
from .scaling import (
    FitError,
    ParametricFit,
    allocation_exponent,
    fit_parametric,
    isoflop_analysis,
    load_points_csv,
    numeric_allocation,
    optimal_allocation,
    predict_loss,
    write_isoflop_csv,
    write_isoflop_json,
    write_parametric_json,
)
from .train import CorpusError, TrainConfig, load_corpus, train

# Small enough that the default config trains in seconds on one core.
DEFAULT_MODEL = {
    "vocab_size": 256,
    "n_layers": 2,
    "hidden_size": 64,
    "dense_ffn_hidden": 256,
    "moe_ffn_hidden": 64,
    "n_experts": 8,
    "k_active": 2,
    "n_shared": 1,
    "max_seq_len": 128,
}
DEFAULT_TRAIN = {
    "total_steps": 100,
    "batch_size": 8,
    "seq_len": 64,
}


class UsageError(Exception):
    """Bad flags, config, or input files: exit code 2."""


def _load_config_file(path):
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise UsageError(f"cannot read config file: {e}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be an object")
    unknown = set(data) - {"preset", "model", "train"}
    if unknown:
        raise UsageError(f"{path}: unknown section(s) {sorted(unknown)}; "
                         "expected preset, model, train")
    return data


def _preset_kwargs(name):
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return asdict(PRESETS[name])


def _apply_section(target, updates, section, valid):
    if not isinstance(updates, dict):
        raise UsageError(f"config section {section!r} must be an object")
    for key, value in updates.items():
        if key not in valid:
            raise UsageError(f"unknown {section} field {key!r}")
        target[key] = value


def _parse_set_flag(text):
    key, sep, raw = text.partition("=")
    if not sep:
        raise UsageError(f"--set expects section.field=value, got {text!r}")
    section, dot, field = key.partition(".")
    if not dot or section not in ("model", "train"):
        raise UsageError(f"--set key must start with model. or train., got {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw   # unquoted strings pass through as-is
    return section, field, value


def _coerce_types(kwargs, cls, section):
    """Field-level type errors beat a TypeError from deep inside validation."""
    hints = typing.get_type_hints(cls)
    for key, value in kwargs.items():
        want = hints.get(key)
        if want is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise UsageError(f"{section} field {key!r} expects an integer, got {value!r}")
        elif want is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise UsageError(f"{section} field {key!r} expects a number, got {value!r}")
            kwargs[key] = float(value)
        elif want is bool:
            if not isinstance(value, bool):
                raise UsageError(f"{section} field {key!r} expects true/false, got {value!r}")


def build_run_config(config_path=None, preset=None, set_flags=()):
    """Merge defaults <- config file <- flags into concrete config objects."""
    model_fields = {f.name for f in fields(ModelConfig)}
    train_fields = {f.name for f in fields(TrainConfig)}
    model_kwargs = dict(DEFAULT_MODEL)
    train_kwargs = dict(DEFAULT_TRAIN)

    if config_path is not None:
        data = _load_config_file(config_path)
        if "preset" in data:
            model_kwargs = _preset_kwargs(data["preset"])
        _apply_section(model_kwargs, data.get("model", {}), "model", model_fields)
        _apply_section(train_kwargs, data.get("train", {}), "train", train_fields)

    if preset is not None:
        # a preset flag replaces the whole model section, then --set refines it
        model_kwargs = _preset_kwargs(preset)
    for flag in set_flags:
        section, field, value = _parse_set_flag(flag)
        _apply_section(
            model_kwargs if section == "model" else train_kwargs,
            {field: value}, section,
            model_fields if section == "model" else train_fields,
        )

    _coerce_types(model_kwargs, ModelConfig, "model")
    _coerce_types(train_kwargs, TrainConfig, "train")
    try:
        model_cfg = ModelConfig(**model_kwargs)
    except (TypeError, ValueError) as e:
        raise UsageError(f"model config: {e}") from None
    try:
        train_cfg = TrainConfig(**train_kwargs)
    except (TypeError, ValueError) as e:
        raise UsageError(f"train config: {e}") from None
    if train_cfg.seq_len > model_cfg.max_seq_len:
        raise UsageError(
            f"train config: seq_len {train_cfg.seq_len} exceeds model "
            f"max_seq_len {model_cfg.max_seq_len}"
        )
    return model_cfg, train_cfg


@contextlib.contextmanager
def _run_lock(run_dir):
    os.makedirs(run_dir, exist_ok=True)
    lock = os.path.join(run_dir, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"run directory {run_dir} is locked by another command "
            f"(remove {lock} if stale)"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        os.unlink(lock)


def cmd_train(args):
    if not os.path.exists(args.corpus):
        raise UsageError(f"corpus file not found: {args.corpus}")
    model_cfg, train_cfg = build_run_config(args.config, args.preset, args.set or ())
    try:
        corpus = load_corpus(args.corpus)
    except CorpusError as e:
        raise UsageError(str(e)) from None
    with _run_lock(args.out):
        with open(os.path.join(args.out, "config.json"), "w") as f:
            json.dump({"model": asdict(model_cfg), "train": asdict(train_cfg)},
                      f, sort_keys=True, indent=1)
            f.write("\n")
        try:
            summary = train(model_cfg, train_cfg, corpus, args.out)
        except ValueError as e:
            raise UsageError(str(e)) from None
    print(f"run complete: {args.out} ({summary.steps} steps, "
          f"final loss {summary.final_total:.6f})")
    return 0


def _load_traces(run_dir):
    if not os.path.isdir(run_dir):
        raise UsageError(f"run directory not found: {run_dir}")
    traces_dir = os.path.join(run_dir, "traces")
    if not os.path.isdir(traces_dir):
        raise UsageError(f"no traces directory in {run_dir}")
    try:
        return TraceSet.load(traces_dir)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _pick_group(traces, layer, step):
    layers = sorted({l for _, l in traces.pairs()})
    if layer is None:
        layer = layers[0]
    steps = sorted({s for s, l in traces.pairs() if l == layer})
    if step is None:
        if not steps:
            raise UsageError(
                f"no traces for layer {layer}; available pairs: "
                + ", ".join(f"(step={s}, layer={l})" for s, l in traces.pairs())
            )
        step = steps[-1]
    try:
        traces.group(layer, step)
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None
    return layer, step


def cmd_analyze(args):
    traces = _load_traces(args.run)
    if args.kind == "saturation":
        layers = sorted({l for _, l in traces.pairs()})
        steps = sorted({s for s, _ in traces.pairs()})
        final = steps[-1]
        try:
            rows, gaps = series(traces, layers, steps,
                                saturation_metric(final, [args.k]))
        except ValueError as e:
            raise UsageError(str(e)) from None
        write_series_csv(args.out, rows)
        at_final = [v for l, s, _, v in rows if s == final]
        mean = sum(at_final) / len(at_final)
        note = f"; {len(gaps)} grid gaps" if gaps else ""
        print(f"saturation@k={args.k}: {len(rows)} rows, "
              f"mean {mean:.4f} at final step {final}{note}")
        return 0

    layer, step = _pick_group(traces, args.layer, args.step)
    if args.kind == "specialization":
        rows = []
        peak = (0.0, None, None)
        for token in sorted(traces.occurrences(layer, step)):
            occ, hits = specialization_counts(traces, layer, step, token)
            for expert in sorted(hits):
                score = hits[expert] / occ
                rows.append((token, expert, score))
                if score > peak[0]:
                    peak = (score, token, expert)
        with open(args.out, "w", newline="") as f:
            f.write("token,expert,score\n")
            for token, expert, score in rows:
                f.write(f"{token},{expert},{score!r}\n")
        print(f"specialization at (layer={layer}, step={step}): {len(rows)} pairs, "
              f"peak {peak[0]:.4f} (token {peak[1]} -> expert {peak[2]})")
        return 0

    heatmap = coactivation_heatmap(traces, layer, step, n=args.top)
    write_heatmap_csv(args.out, heatmap)
    peak, pair = 0.0, (None, None)
    ids = heatmap.expert_ids
    for i, row_id in enumerate(ids):
        for j, col_id in enumerate(ids):
            if i != j and heatmap.matrix[i][j] > peak:
                peak, pair = heatmap.matrix[i][j], (row_id, col_id)
    shape = "complete" if heatmap.complete else f"only {len(ids)} experts active"
    print(f"co-activation at (layer={layer}, step={step}): {shape}, "
          f"peak {peak:.4f} ({pair[0]} -> {pair[1]})")
    return 0


def _load_points(path):
    if not os.path.exists(path):
        raise UsageError(f"points file not found: {path}")
    try:
        return load_points_csv(path)
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_scaling_isoflop(args):
    points = _load_points(args.points)
    groups = {}
    for p in points:
        groups.setdefault(p.budget, []).append(p)
    for budget, pts in sorted(groups.items()):
        if len(pts) < 3:
            raise UsageError(
                f"budget {budget:.4e} has {len(pts)} points; a parabola needs >= 3"
            )
    analysis = isoflop_analysis(points)
    if args.out_json:
        write_isoflop_json(args.out_json, analysis)
    if args.out_csv:
        write_isoflop_csv(args.out_csv, analysis)
    if analysis.n_law is not None:
        print(f"isoflop: {len(analysis.fits)} budgets; optimal size grows as "
              f"C^{analysis.n_law.exponent:.4f}, tokens as C^{analysis.d_law.exponent:.4f}")
    else:
        fit = analysis.fits[0]
        print(f"isoflop: 1 budget; optimal size {fit.n_opt:.4e} "
              f"at loss {fit.loss_at_opt:.4f}")
    return 0


def cmd_scaling_parametric(args):
    points = _load_points(args.points)
    if len(points) < 6:
        raise UsageError(f"parametric fit needs >= 6 points, got {len(points)}")
    if len({p.budget for p in points}) < 2:
        raise UsageError("parametric fit needs points spanning >= 2 budgets")
    fit = fit_parametric(points, delta=args.delta)
    write_parametric_json(args.out, fit,
                          extras={"delta": args.delta, "n_points": len(points)})
    print(f"parametric: A={fit.A:.6g} B={fit.B:.6g} alpha={fit.alpha:.6g} "
          f"beta={fit.beta:.6g} L0={fit.L0:.6g} (objective {fit.objective:.3e})")
    return 0


def _load_fit_json(path):
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise UsageError(f"cannot read fit file: {e}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON: {e}") from None
    missing = [k for k in ("A", "B", "alpha", "beta", "L0") if k not in data]
    if missing:
        raise UsageError(f"{path}: missing fit constant(s) {missing}")
    try:
        return ParametricFit(A=data["A"], B=data["B"], alpha=data["alpha"],
                             beta=data["beta"], L0=data["L0"])
    except ValueError as e:
        raise UsageError(f"{path}: {e}") from None


def cmd_scaling_optimal(args):
    if args.flops <= 0:
        raise UsageError(f"--flops must be positive, got {args.flops}")
    fit = _load_fit_json(args.fit)
    n_opt, d_opt = optimal_allocation(fit, args.flops, kappa=args.kappa)
    n_numeric = numeric_allocation(fit, args.flops, kappa=args.kappa)
    if abs(n_numeric - n_opt) / n_opt > 1e-3:
        raise RuntimeError(
            f"closed-form optimum {n_opt:.6e} and numeric minimizer "
            f"{n_numeric:.6e} disagree beyond 0.1%"
        )
    loss = predict_loss(fit, n_opt, d_opt)
    if args.out:
        payload = {
            "c_flops": args.flops, "kappa": args.kappa,
            "n_opt": n_opt, "d_opt": d_opt, "loss_at_opt": loss,
            "allocation_exponent": allocation_exponent(fit),
        }
        with open(args.out, "w") as f:
            json.dump(payload, f, sort_keys=True, indent=1)
            f.write("\n")
    print(f"optimal at C={args.flops:.4e}: N*={n_opt:.6e} D*={d_opt:.6e} "
          f"loss {loss:.4f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="Desk-scale mixture-of-experts lab: training, routing "
                    "analytics, and scaling-law fits.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p_train = sub.add_parser(
        "train", formatter_class=fmt,
        help="train a model on a token corpus and write a run directory",
    )
    p_train.add_argument("corpus", help="token corpus file")
    p_train.add_argument("--out", required=True, help="run directory to create")
    p_train.add_argument("--config", default=None,
                         help="JSON config file with preset/model/train sections")
    p_train.add_argument("--preset", default=None,
                         help="named model card; replaces the model section "
                              f"(one of: {', '.join(PRESETS)})")
    p_train.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                         help="override a single config field; repeatable")
    p_train.set_defaults(func=cmd_train)

    p_an = sub.add_parser(
        "analyze", formatter_class=fmt,
        help="compute routing analytics from a run's traces",
    )
    p_an.add_argument("kind", choices=("specialization", "coactivation", "saturation"))
    p_an.add_argument("run", help="run directory produced by train")
    p_an.add_argument("--out", required=True, help="output CSV path")
    p_an.add_argument("--layer", type=int, default=None,
                      help="block number (default: first traced layer)")
    p_an.add_argument("--step", type=int, default=None,
                      help="checkpoint step (default: last traced step)")
    p_an.add_argument("--top", type=int, default=16,
                      help="co-activation heatmap size")
    p_an.add_argument("--k", type=int, default=1, choices=(1, 2, 4, 8),
                      help="saturation overlap width")
    p_an.set_defaults(func=cmd_analyze)

    p_sc = sub.add_parser("scaling", help="fit scaling laws from measured points")
    sc_sub = p_sc.add_subparsers(dest="subcommand", required=True, metavar="subcommand")

    p_iso = sc_sub.add_parser(
        "isoflop", formatter_class=fmt,
        help="per-budget parabolas and power laws over their optima",
    )
    p_iso.add_argument("points", help="CSV of n_active,d_tokens,c_flops,loss")
    p_iso.add_argument("--out-json", default=None, help="write fits as JSON")
    p_iso.add_argument("--out-csv", default=None, help="write fits as CSV")
    p_iso.set_defaults(func=cmd_scaling_isoflop)

    p_par = sc_sub.add_parser(
        "parametric", formatter_class=fmt,
        help="fit the loss surface A/N^alpha + B/D^beta + L0",
    )
    p_par.add_argument("points", help="CSV of n_active,d_tokens,c_flops,loss")
    p_par.add_argument("--out", required=True, help="write constants as JSON")
    p_par.add_argument("--delta", type=float, default=1e-3,
                       help="robust-loss transition width")
    p_par.set_defaults(func=cmd_scaling_parametric)

    p_opt = sc_sub.add_parser(
        "optimal", formatter_class=fmt,
        help="compute-optimal model size and token count for a budget",
    )
    p_opt.add_argument("--flops", type=float, required=True, help="compute budget")
    p_opt.add_argument("--fit", required=True,
                       help="JSON with A, B, alpha, beta, L0 (parametric output)")
    p_opt.add_argument("--kappa", type=float, default=6.0,
                       help="FLOPs per parameter per token")
    p_opt.add_argument("--out", default=None, help="write the allocation as JSON")
    p_opt.set_defaults(func=cmd_scaling_optimal)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FitError as e:
        print(f"error: {e}", file=sys.stderr)
        for init, message in e.diagnostics:
            print(f"  start {init}: {message}", file=sys.stderr)
        return 1
    except Exception as e:   # runtime failures map to exit 1 by contract
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
