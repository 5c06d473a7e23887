"""Command-line harness: run experiments, reproduce the results table,
and run diagnostics.

Exit codes are a stable contract for CI:
    0  success
    1  usage or config error
    2  data / IO error
    3  numeric divergence during training
    4  a diagnostic check exceeded its tolerance
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

from .errors import (
    ConfigError,
    ContractError,
    DataConsistencyError,
    DegenerateInputError,
    FormatError,
    SamplingError,
    StructuralError,
    TrainingError,
    WormholeMamlError,
)
from .models import ModelKind, ModelSpec
from .meta_trainer import (
    AvgThresholdParams,
    EpisodeSource,
    MetaConfig,
    MnistParams,
    OptimizerKind,
    RunResult,
    TaskKind,
    WaveletParams,
    train,
)
from .seeding import derive_seed, spawn
from .wormhole import InnerLoopConfig, WormholeKind, WormholeSpec

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3
EXIT_CHECK = 4

MNIST_DIR_ENV = "WORMHOLE_MAML_MNIST_DIR"


class _UsageError(WormholeMamlError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; remap onto the documented code 1
    def error(self, message):
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# config file parsing

_BOOL = {"true": True, "false": False}


def _parse_bool(v: str) -> bool:
    if v.lower() not in _BOOL:
        raise ValueError(f"expected true/false, got {v!r}")
    return _BOOL[v.lower()]


def _parse_int_list(v: str) -> tuple[int, ...]:
    return tuple(int(p.strip()) for p in v.split(","))


# key -> value parser; None marks pass-through strings
_KEYS = {
    "task": str,
    "model.kind": str,
    "model.layers": _parse_int_list,
    "wormhole.kind": str,
    "wormhole.selector": str,
    "inner.alpha": float,
    "inner.gamma": float,
    "inner.n_inner": int,
    "inner.n_c": int,
    "inner.c_init": float,
    "inner.second_order": _parse_bool,
    "inner.differentiate_through_c": str,
    "outer.beta": float,
    "outer.optimizer": str,
    "epochs": int,
    "meta_batch": int,
    "eval_episodes": int,
    "curve_eval_episodes": int,
    "seed": int,
    "task.d": int,
    "task.k_support": int,
    "task.k_query": int,
    "task.tau_min": float,
    "task.tau_max": float,
    "task.balanced": _parse_bool,
    "task.n_grid": int,
    "task.k": int,
    "task.sigma": float,
    "task.amplitude": float,
    "task.mu_min": float,
    "task.mu_max": float,
    "task.demo_init": _parse_bool,
    "task.mnist_dir": str,
    "task.query_per_class": int,
}


def _read_pairs(path) -> dict[str, tuple[int | None, object]]:
    pairs: dict[str, tuple[int | None, object]] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        _store_pair(pairs, key, value, lineno)
    return pairs


def _store_pair(pairs, key: str, value: str, lineno: int | None):
    if key not in _KEYS:
        raise ConfigError(f"unknown key {key!r}", line=lineno)
    try:
        parsed = _KEYS[key](value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}", line=lineno) from exc
    pairs[key] = (lineno, parsed)


def _enum_value(pairs, key, enum_cls, default):
    if key not in pairs:
        return default
    lineno, raw = pairs[key]
    try:
        return enum_cls(raw)
    except ValueError:
        options = ", ".join(m.value for m in enum_cls)
        raise ConfigError(f"{key} must be one of: {options}", line=lineno)


def _get(pairs, key, default):
    return pairs[key][1] if key in pairs else default


def build_config(pairs: dict[str, tuple[int | None, object]]) -> MetaConfig:
    if "task" not in pairs:
        raise ConfigError("missing required key 'task'")
    task = _enum_value(pairs, "task", TaskKind, None)

    if task is TaskKind.AVG_THRESHOLD:
        task_params = AvgThresholdParams(
            d=_get(pairs, "task.d", 5),
            k_support=_get(pairs, "task.k_support", 10),
            k_query=_get(pairs, "task.k_query", 10),
            tau_min=_get(pairs, "task.tau_min", 0.0),
            tau_max=_get(pairs, "task.tau_max", 1.0),
            balanced=_get(pairs, "task.balanced", True),
        )
        default_model = ModelSpec.linear_scalar_out(task_params.d)
    elif task is TaskKind.WAVELET:
        task_params = WaveletParams(
            n_grid=_get(pairs, "task.n_grid", 50),
            k=_get(pairs, "task.k", 10),
            sigma=_get(pairs, "task.sigma", 1.0),
            amplitude=_get(pairs, "task.amplitude", 0.8),
            mu_min=_get(pairs, "task.mu_min", -2.5),
            mu_max=_get(pairs, "task.mu_max", 2.5),
            demo_init=_get(pairs, "task.demo_init", False),
        )
        default_model = ModelSpec.linear_vector_filter(task_params.n_grid)
    else:
        import os

        data_dir = _get(pairs, "task.mnist_dir", None) or os.environ.get(MNIST_DIR_ENV)
        task_params = MnistParams(
            data_dir=data_dir,
            query_per_class=_get(pairs, "task.query_per_class", 5),
        )
        default_model = ModelSpec.mlp(_get(pairs, "model.layers", (784, 64, 2)))

    model_kind = _enum_value(pairs, "model.kind", ModelKind, default_model.kind)
    if model_kind is default_model.kind:
        model = default_model
    elif model_kind is ModelKind.MLP:
        model = ModelSpec.mlp(_get(pairs, "model.layers", (784, 64, 2)))
    elif model_kind is ModelKind.LINEAR_SCALAR_OUT:
        model = ModelSpec.linear_scalar_out(default_model.input_dim)
    else:
        model = ModelSpec.linear_vector_filter(default_model.input_dim)

    wh_kind = _enum_value(pairs, "wormhole.kind", WormholeKind, WormholeKind.TANH_SCALAR)
    selector_raw = _get(pairs, "wormhole.selector", "all")
    n_layers = max(1, len(model.layer_sizes) - 1)
    if selector_raw == "all":
        selector = None
    elif selector_raw == "last":
        selector = frozenset({n_layers - 1})
    else:
        try:
            selector = frozenset(int(p) for p in selector_raw.split(","))
        except ValueError:
            lineno = pairs.get("wormhole.selector", (None, None))[0]
            raise ConfigError(
                "wormhole.selector must be 'all', 'last' or comma-separated layer indices",
                line=lineno,
            )

    dtc_raw = _get(pairs, "inner.differentiate_through_c", "auto")
    if dtc_raw not in ("auto", "true", "false"):
        lineno = pairs.get("inner.differentiate_through_c", (None, None))[0]
        raise ConfigError(
            "inner.differentiate_through_c must be auto, true or false", line=lineno
        )
    dtc = None if dtc_raw == "auto" else dtc_raw == "true"

    try:
        inner = InnerLoopConfig(
            alpha=_get(pairs, "inner.alpha", 1.0),
            gamma=_get(pairs, "inner.gamma", 1.0),
            n_inner=_get(pairs, "inner.n_inner", 1),
            n_c=_get(pairs, "inner.n_c", 5),
            c_init=_get(pairs, "inner.c_init", 1.0),
            second_order=_get(pairs, "inner.second_order", True),
            differentiate_through_c=dtc,
        )
        return MetaConfig(
            task=task,
            model=model,
            wormhole=WormholeSpec(wh_kind, selector),
            inner=inner,
            beta=_get(pairs, "outer.beta", 0.1),
            optimizer=_enum_value(pairs, "outer.optimizer", OptimizerKind, OptimizerKind.SGD),
            epochs=_get(pairs, "epochs", 100),
            meta_batch=_get(pairs, "meta_batch", 10),
            eval_episodes=_get(pairs, "eval_episodes", 200),
            curve_eval_episodes=_get(pairs, "curve_eval_episodes", 20),
            seed=_get(pairs, "seed", 0),
            task_params=task_params,
        )
    except ContractError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def parse_config(path, overrides: list[str] | None = None) -> MetaConfig:
    """Parse a flat key-value config file plus optional key=value overrides."""
    pairs = _read_pairs(path)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        _store_pair(pairs, key, value, None)
    return build_config(pairs)


def preset_path(task: str) -> Path:
    from importlib import resources

    res = resources.files("wormhole_maml").joinpath(f"presets/{task}.cfg")
    with resources.as_file(res) as p:
        return Path(p)


# ---------------------------------------------------------------------------
# artifact writers


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt_cell(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def write_run_artifacts(out_dir: Path, result: RunResult) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(
        json.dumps(result.to_json_dict(), indent=2) + "\n"
    )
    rows = []
    for i in range(len(result.train_loss)):
        rows.append(
            [
                i,
                result.train_loss[i],
                result.eval_loss[i],
                result.eval_error[i],
                result.c_mean[i],
                result.c_min[i],
                result.c_max[i],
            ]
        )
    write_csv(
        out_dir / "curves.csv",
        ["epoch", "train_loss", "eval_loss", "eval_error", "c_mean", "c_min", "c_max"],
        rows,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    cfg = parse_config(args.config, args.set or [])
    out_dir = Path(args.out)
    t0 = time.perf_counter()
    result = train(cfg)
    write_run_artifacts(out_dir, result)
    print(f"task={result.task} wormhole={result.wormhole_kind} n_inner={result.n_inner} seed={result.seed}")
    if result.synthetic_data:
        print("data: synthetic fallback (no IDX files found)")
    if result.complete:
        print(f"final {result.metric_name} = {result.final_metric!r}")
    else:
        print(f"training aborted at epoch {result.abort_epoch}: {result.error}")
    print(f"wall clock: {time.perf_counter() - t0:.1f}s (not part of run.json)", file=sys.stderr)
    return EXIT_OK if result.complete else EXIT_DIVERGED


TABLE_METHODS = {
    TaskKind.AVG_THRESHOLD: ("vanilla", "wormhole_tanh", "wormhole_per_weight"),
    TaskKind.WAVELET: ("vanilla", "wormhole_tanh"),
    TaskKind.MNIST: ("vanilla", "wormhole_tanh"),
}

METHOD_LABELS = {
    "vanilla": "Vanilla",
    "wormhole_tanh": "Wormhole 1",
    "wormhole_per_weight": "Wormhole d",
}

# per-method config tweaks; gamma/n_c are free hyperparameters per task and
# the per-weight multiplier needs gentler steps than the tanh scalar
METHOD_OVERRIDES = {
    ("avg_threshold", "vanilla"): {"wormhole.kind": "identity"},
    ("avg_threshold", "wormhole_tanh"): {"wormhole.kind": "tanh_scalar"},
    ("avg_threshold", "wormhole_per_weight"): {
        "wormhole.kind": "per_weight",
        "inner.gamma": "2.5",
        "inner.n_c": "10",
    },
    ("wavelet", "vanilla"): {"wormhole.kind": "identity"},
    ("wavelet", "wormhole_tanh"): {"wormhole.kind": "tanh_scalar"},
    ("mnist", "vanilla"): {"wormhole.kind": "identity"},
    ("mnist", "wormhole_tanh"): {"wormhole.kind": "tanh_scalar"},
}

TABLE_STEPS = (1, 2, 5)


def cmd_table(args) -> int:
    task_names = ["avg_threshold", "wavelet", "mnist"] if args.task == "all" else [
        {"avg": "avg_threshold", "wavelet": "wavelet", "mnist": "mnist"}[args.task]
    ]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    run_rows = []
    agg_rows = []
    cells: dict[tuple[str, str, int], tuple[float, float] | None] = {}
    synthetic_tasks: list[str] = []
    any_failed = False

    for task_name in task_names:
        base = preset_path(task_name)
        methods = TABLE_METHODS[TaskKind(task_name)]
        for method in methods:
            for steps in TABLE_STEPS:
                metrics = []
                for i in range(args.seeds):
                    overrides = [f"{k}={v}" for k, v in METHOD_OVERRIDES[(task_name, method)].items()]
                    overrides.append(f"inner.n_inner={steps}")
                    overrides.extend(args.set or [])
                    cfg = parse_config(base, overrides)
                    seed = derive_seed(cfg.seed, f"table/{task_name}/{method}/{steps}/{i}")
                    cfg = replace(cfg, seed=seed)
                    result = train(cfg)
                    if result.synthetic_data and task_name not in synthetic_tasks:
                        synthetic_tasks.append(task_name)
                    run_rows.append(
                        [task_name, method, steps, i, seed,
                         result.final_metric, result.complete]
                    )
                    if result.complete:
                        metrics.append(result.final_metric)
                    else:
                        any_failed = True
                        print(
                            f"cell {task_name}/{method}/{steps}-step seed {i} failed: {result.error}",
                            file=sys.stderr,
                        )
                if metrics:
                    mean = sum(metrics) / len(metrics)
                    var = sum((m - mean) ** 2 for m in metrics) / len(metrics)
                    cells[(task_name, method, steps)] = (mean, math.sqrt(var))
                    agg_rows.append([task_name, method, steps, mean, math.sqrt(var), len(metrics)])
                else:
                    cells[(task_name, method, steps)] = None
                    agg_rows.append([task_name, method, steps, None, None, 0])

    write_csv(out_dir / "runs.csv",
              ["task", "method", "steps", "seed_index", "seed", "metric", "complete"],
              run_rows)
    write_csv(out_dir / "table.csv",
              ["task", "method", "steps", "mean", "std", "n_seeds"],
              agg_rows)

    text = _format_table(task_names, cells, args.seeds, synthetic_tasks)
    (out_dir / "table.txt").write_text(text)
    print(text, end="")
    return EXIT_DIVERGED if any_failed else EXIT_OK


TASK_TITLES = {
    "avg_threshold": "Avg-Threshold",
    "wavelet": "Wavelet Transform",
    "mnist": "MNIST",
}


def _format_table(task_names, cells, n_seeds, synthetic_tasks) -> str:
    # mirrors the published layout: methods as rows, task x step-count columns
    lines = []
    lines.append(f"Evaluation over {n_seeds} seed(s); cells are mean +/- std; '-' = not run.")
    for t in synthetic_tasks:
        lines.append(f"note: {TASK_TITLES[t]} used the synthetic fallback dataset (no IDX files).")
    col_w = 17
    header1 = f"{'':14s}"
    header2 = f"{'':14s}"
    for t in task_names:
        header1 += f"| {TASK_TITLES[t]:^{3 * col_w}s} "
        header2 += "".join(f"| {s}-step".ljust(col_w + 2) for s in TABLE_STEPS)
    lines.append(header1)
    lines.append(header2)
    all_methods = ("vanilla", "wormhole_tanh", "wormhole_per_weight")
    for method in all_methods:
        if not any(method in TABLE_METHODS[TaskKind(t)] for t in task_names):
            continue
        row = f"{METHOD_LABELS[method]:14s}"
        for t in task_names:
            for s in TABLE_STEPS:
                cell = cells.get((t, method, s), None) if method in TABLE_METHODS[TaskKind(t)] else None
                if method not in TABLE_METHODS[TaskKind(t)]:
                    body = "-"
                elif cell is None:
                    body = "failed"
                else:
                    body = f"{cell[0]:.3f} +/- {cell[1]:.3f}"
                row += f"| {body:{col_w}s}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def cmd_diag(args) -> int:
    if args.diag_command == "gradcheck":
        return _diag_gradcheck(args)
    if args.diag_command == "cstar":
        return _diag_cstar(args)
    return _diag_conflict(args)


def _diag_gradcheck(args) -> int:
    from .gradcheck import first_order_suite, second_order_suite

    e1 = first_order_suite(args.graphs, seed=args.seed)
    e2 = second_order_suite(args.second_order_graphs, seed=args.seed)
    print(f"first-order max relative error:  {e1:.3e} (tolerance 1e-6)")
    print(f"second-order max relative error: {e2:.3e} (tolerance 1e-4)")
    if e1 < 1e-6 and e2 < 1e-4:
        return EXIT_OK
    print("gradcheck FAILED", file=sys.stderr)
    return EXIT_CHECK


def _diag_cstar(args) -> int:
    from .analysis import c_star_convergence, calibrated_avg_weight

    sizes = [int(s) for s in args.batch_sizes.split(",")]
    w_coord = calibrated_avg_weight(args.d, args.tau) / args.d
    rng = spawn(args.seed, "cstar-diag")
    medians = c_star_convergence(rng, [w_coord] * args.d, args.tau, sizes, args.trials)
    lines = ["batch_size,median_abs_c_star_minus_1"]
    for k, m in zip(sizes, medians):
        lines.append(f"{k},{m!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    if medians[-1] < medians[0]:
        return EXIT_OK
    print("c* did not concentrate toward 1 with batch size", file=sys.stderr)
    return EXIT_CHECK


def _diag_conflict(args) -> int:
    from . import autodiff as ad
    from .analysis import conflict_matrix
    from .models import ParamSet, ParamEntry, init_params
    from .tasks import sample_avg_threshold, sign_flipped_copy

    d = args.d
    spec = ModelSpec.linear_scalar_out(d)
    rng = spawn(args.seed, "conflict-diag")
    if args.mode == "signflip":
        W = ad.tensor_new((1, d), [0.0] * d)
        b = ad.tensor_new((1,), [0.0])
        theta = ParamSet([ParamEntry("W0", W, 0), ParamEntry("b0", b, 0)])
        ep = sample_avg_threshold(rng, d=d)
        episodes = [ep, sign_flipped_copy(ep)]
        cfg = InnerLoopConfig(alpha=0.0, n_inner=1, n_c=0, second_order=True)
    else:
        theta = init_params(spec, rng)
        episodes = [sample_avg_threshold(rng, d=d) for _ in range(args.episodes)]
        cfg = InnerLoopConfig(alpha=1.0, n_inner=1, n_c=0, second_order=True)

    res = conflict_matrix(theta, spec, WormholeSpec(WormholeKind.IDENTITY), episodes, cfg)
    off = res.off_diagonal()
    print(f"episodes: {len(episodes)}  zero-norm gradients: {sum(res.zero_norm)}")
    print(f"off-diagonal cosine: min={min(off):.6f} mean={sum(off) / len(off):.6f} max={max(off):.6f}")
    if args.mode == "signflip":
        if min(off) <= -0.999:
            print("sign-flipped pair is maximally conflicting, as expected")
            return EXIT_OK
        print("conflict check FAILED: expected cosine <= -0.999", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="wormhole-maml", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train one configuration")
    p_run.add_argument("--config", required=True, help="config file path")
    p_run.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
    p_run.add_argument("--out", required=True, help="output directory")

    p_table = sub.add_parser("table", help="reproduce the results-table grid")
    p_table.add_argument("--task", choices=["avg", "wavelet", "mnist", "all"], required=True)
    p_table.add_argument("--seeds", type=int, default=3)
    p_table.add_argument("--set", action="append", metavar="KEY=VALUE",
                         help="override a config key for every cell (repeatable)")
    p_table.add_argument("--out", required=True)

    p_diag = sub.add_parser("diag", help="diagnostics")
    diag_sub = p_diag.add_subparsers(dest="diag_command", required=True)

    p_g = diag_sub.add_parser("gradcheck", help="finite-difference autodiff check")
    p_g.add_argument("--graphs", type=int, default=100)
    p_g.add_argument("--second-order-graphs", type=int, default=30)
    p_g.add_argument("--seed", type=int, default=0)

    p_c = diag_sub.add_parser("cstar", help="c* concentration vs batch size")
    p_c.add_argument("--batch-sizes", default="10,30,100,300,1000")
    p_c.add_argument("--trials", type=int, default=200)
    p_c.add_argument("--seed", type=int, default=0)
    p_c.add_argument("--d", type=int, default=5)
    p_c.add_argument("--tau", type=float, default=0.5)
    p_c.add_argument("--out", default=None, help="also write the CSV here")

    p_f = diag_sub.add_parser("conflict", help="meta-gradient conflict diagnostics")
    p_f.add_argument("--mode", choices=["signflip", "random"], default="signflip")
    p_f.add_argument("--episodes", type=int, default=8)
    p_f.add_argument("--seed", type=int, default=0)
    p_f.add_argument("--d", type=int, default=5)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "run":
            return cmd_run(args)
        if args.command == "table":
            return cmd_table(args)
        return cmd_diag(args)
    except (_UsageError, ConfigError, ContractError, StructuralError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DataConsistencyError, SamplingError, DegenerateInputError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
