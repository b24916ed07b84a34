"""Command line front end: reproducible experiment runs.

Subcommands: generate (synthetic data), train (fit a model), evaluate
(accuracy + privacy report), sweep (grid of synthetic runs), bench
(timing table). Every run reads ``key = value`` config files, lets CLI
flags override file values, echoes the resolved config next to its
outputs, and derives all randomness from one root seed, so re-running a
command reproduces its result files byte for byte (timing files aside).

Exit codes: 0 ok, 2 bad config, 3 unreadable or malformed data, 4
numerical divergence.
"""

from __future__ import annotations

import hashlib
import itertools
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .baseline import als_factorize, make_baseline_predictor
from .driver import (AdaptiveConfig, Schedule, make_predictor, predict_local,
                     run_blc, run_blc_adaptive, run_blc_grown)
from .factorization import DivergenceError, FactorModel, Hyperparams
from .metrics import guessing_probability, privacy_report, rmse
from .nyms import (NymAssignment, aggregate, random_assignment,
                   save_assignment, update_all_nyms)
from .ratings import (RatingsError, SparseRatings, SplitSpec, load_ratings,
                      load_triplets, save_ratings, split)
from .synthetic import SyntheticSpec, generate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4


class ConfigError(ValueError):
    """Unusable configuration: unknown key, bad value, missing requirement."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _parse_float_list(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


_REQUIRED = object()

# Schemas: key -> (parser, default). _REQUIRED means the key must be given.
_COMMON = {
    "out": (str, "runs"),
    "run_id": (str, ""),
    "seed": (int, 0),
}

_SYNTH_KEYS = {
    "groups": (int, 5),
    "users": (int, 1000),
    "items": (int, 100),
    "latent_dim": (int, 4),
    "cluster_std": (float, 0.0),
    "center_std": (float, 1.0),
    "item_std": (float, 1.0),
    "missing": (float, 0.0),
}

_MODEL_KEYS = {
    "algo": (str, "blc"),
    "nyms": (int, 5),
    "latent_dim": (int, 4),
    "sigma2": (float, 1.0),
    "sigma2_nym": (float, 1000.0),
    "sigma2_item": (float, 1000.0),
    "epsilon": (float, 1e-4),
    "max_iters": (int, 200),
    "init_std": (float, 1.0),
    "period": (float, 1.0),
    "passes": (int, 8),
    "pinned": (_parse_bool, False),
    "error_threshold": (float, 1e-6),
    "max_nyms": (int, 64),
    "threads": (int, 1),
}

SCHEMAS: dict[str, dict] = {
    "generate": {**_COMMON, **_SYNTH_KEYS},
    "train": {
        **_COMMON, **_MODEL_KEYS,
        "data": (str, _REQUIRED),
        "format": (str, "canonical"),
        "train_fraction": (float, 1.0),
        "valid_fraction": (float, 0.0),
        "test_fraction": (float, 0.0),
    },
    "evaluate": {
        **_COMMON,
        "data": (str, _REQUIRED),
        "format": (str, "canonical"),
        "test_data": (str, ""),
        "model": (str, _REQUIRED),
        "train_fraction": (float, 1.0),
        "valid_fraction": (float, 0.0),
        "test_fraction": (float, 0.0),
        "clip_low": (float, float("nan")),
        "clip_high": (float, float("nan")),
        "association_mode": (str, "users"),
        "local": (_parse_bool, False),
        "local_weight": (float, 1.0),
        "sigma2_local": (float, 1000.0),
    },
    "sweep": {
        **_COMMON, **_SYNTH_KEYS, **_MODEL_KEYS,
        "nyms_list": (_parse_int_list, []),
        "seeds": (_parse_int_list, [0]),
        "cluster_std_list": (_parse_float_list, []),
        "missing_list": (_parse_float_list, []),
    },
    "bench": {
        **_COMMON, **_SYNTH_KEYS, **_MODEL_KEYS,
        "users_list": (_parse_int_list, [1000]),
        "items_list": (_parse_int_list, [100]),
        "warm_change": (float, 0.01),
    },
}

_VALID_FORMATS = ("canonical", "csv_comma", "coloncolon", "tab")
_VALID_ALGOS = ("blc", "blc_adaptive", "als")


def read_config_file(path) -> dict[str, str]:
    """Parse simple ``key = value`` lines; '#' starts a comment."""
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def resolve_config(command: str, file_values: dict[str, str],
                   overrides: dict[str, str]) -> dict:
    """Merge file and flag values against the command schema."""
    schema = SCHEMAS[command]
    merged = dict(file_values)
    merged.update(overrides)
    config = {}
    for key, raw in merged.items():
        if key not in schema:
            raise ConfigError(f"unknown {command} config key: {key!r}")
        parser = schema[key][0]
        try:
            config[key] = parser(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}")
    for key, (_, default) in schema.items():
        if key in config:
            continue
        if default is _REQUIRED:
            raise ConfigError(f"missing required {command} config key: {key!r}")
        config[key] = default
    _validate_config(command, config)
    return config


def _validate_config(command: str, config: dict) -> None:
    if config["seed"] < 0:
        raise ConfigError("seed must be non-negative")
    if "format" in config and config["format"] not in _VALID_FORMATS:
        raise ConfigError(f"format must be one of {_VALID_FORMATS}")
    if "algo" in config and config["algo"] not in _VALID_ALGOS:
        raise ConfigError(f"algo must be one of {_VALID_ALGOS}")
    if "threads" in config and config["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    if config.get("pinned") and config.get("algo") != "blc":
        raise ConfigError("pinned requires algo = blc")
    if "association_mode" in config and config["association_mode"] not in ("users", "ratings"):
        raise ConfigError("association_mode must be 'users' or 'ratings'")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _run_dir(command: str, config: dict) -> Path:
    run_id = config["run_id"]
    if not run_id:
        blob = command + "".join(
            f"|{k}={_format_value(v)}" for k, v in sorted(config.items()) if k != "run_id")
        run_id = f"{command}-{hashlib.sha1(blob.encode()).hexdigest()[:10]}"
    path = Path(config["out"]) / run_id
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_config(run_dir: Path, command: str, config: dict) -> None:
    lines = [f"command = {command}"]
    lines += [f"{k} = {_format_value(v)}" for k, v in sorted(config.items())]
    (run_dir / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: str, rows) -> None:
    with path.open("w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(str(x) for x in row) + "\n")


def _load_data(path: str, fmt: str) -> SparseRatings:
    if fmt == "canonical":
        return load_ratings(path)
    return load_triplets(path, fmt)


def _hyper_from(config: dict) -> Hyperparams:
    return Hyperparams(
        d=config["latent_dim"], sigma2=config["sigma2"],
        sigma2_nym=config["sigma2_nym"], sigma2_item=config["sigma2_item"],
        epsilon=config["epsilon"], max_iters=config["max_iters"],
        init_std=config["init_std"], seed=config["seed"])


# ---------------------------------------------------------------- commands

def cmd_generate(config: dict) -> Path:
    spec = SyntheticSpec(
        p_groups=config["groups"], n_users=config["users"], m_items=config["items"],
        d=config["latent_dim"], cluster_std=config["cluster_std"],
        center_std=config["center_std"], item_std=config["item_std"],
        missing_fraction=config["missing"], seed=config["seed"])
    instance = generate(spec)
    run_dir = _run_dir("generate", config)
    save_ratings(instance.ratings, run_dir / "ratings.csv")
    save_ratings(instance.heldout, run_dir / "heldout.csv")
    _write_csv(run_dir / "labels.csv", "user,group",
               enumerate(instance.true_labels))
    _write_config(run_dir, "generate", config)
    print(f"generate: {instance.ratings} -> {run_dir}")
    return run_dir


def _staged_rows(result):
    """Flatten a staged run into trace and per-stage CSV rows."""
    trace_rows = []
    stage_rows = []
    f_idx = 0
    for stage in result.stages:
        stage_rows.append((stage.p, repr(stage.per_rating_residual)))
        for ftrace in stage.blc.trace.factorizations:
            trace_rows += [(f_idx, i, repr(v)) for i, v in enumerate(ftrace)]
            f_idx += 1
    return trace_rows, stage_rows


def _train_model(train: SparseRatings, config: dict):
    """Shared by train and sweep. Returns (tag, payload, trace_rows, stage_rows)."""
    hyper = _hyper_from(config)
    schedule = Schedule(factorization_period=config["period"],
                        passes=config["passes"], seed=config["seed"])
    algo = config["algo"]
    with threadpool_limits(limits=config["threads"]):
        if algo == "als":
            model, trace = als_factorize(train, hyper)
            trace_rows = [(0, i, repr(v)) for i, v in enumerate(trace)]
            return algo, (model, None), trace_rows, []
        if algo == "blc" and config["pinned"]:
            # Frozen assignment, no user-side nym switching: pure
            # alternating factorization (one user per nym when nyms = users).
            n, p = train.n_users, config["nyms"]
            if p == n:
                fixed = NymAssignment(np.arange(n, dtype=np.int64), p)
            else:
                fixed = random_assignment(n, p, config["seed"])
            result = run_blc(train, p, hyper, schedule,
                             initial_assignment=fixed, update_nyms=False)
            trace_rows = []
            for f_idx, ftrace in enumerate(result.trace.factorizations):
                trace_rows += [(f_idx, i, repr(v)) for i, v in enumerate(ftrace)]
            return algo, (result.model, result.assignment), trace_rows, []
        if algo == "blc":
            result = run_blc_grown(train, config["nyms"], hyper, schedule)
        else:
            adaptive = AdaptiveConfig(error_threshold=config["error_threshold"],
                                      max_nyms=config["max_nyms"])
            result = run_blc_adaptive(train, hyper, schedule, adaptive)
    trace_rows, stage_rows = _staged_rows(result)
    return algo, (result.model, result.assignment), trace_rows, stage_rows


def _save_trained(run_dir: Path, algo: str, model, assignment) -> None:
    arrays = {
        "algo": np.array(algo),
        "item_factors": model.item_factors,
        "hyper": np.array([model.hyper.d, model.hyper.sigma2, model.hyper.sigma2_nym,
                           model.hyper.sigma2_item, model.hyper.epsilon,
                           model.hyper.max_iters, model.hyper.init_std,
                           model.hyper.seed]),
    }
    if algo == "als":
        arrays["user_factors"] = model.user_factors
    else:
        arrays["nym_factors"] = model.nym_factors
        arrays["assignment"] = assignment.nym_of
        arrays["nyms"] = np.array(assignment.p)
    np.savez(run_dir / "model.npz", **arrays)


def _load_trained(model_dir: str):
    """Returns (algo, model, assignment-or-None)."""
    path = Path(model_dir)
    if path.is_dir():
        path = path / "model.npz"
    with np.load(path) as data:
        h = data["hyper"]
        hyper = Hyperparams(d=int(h[0]), sigma2=float(h[1]), sigma2_nym=float(h[2]),
                            sigma2_item=float(h[3]), epsilon=float(h[4]),
                            max_iters=int(h[5]), init_std=float(h[6]), seed=int(h[7]))
        algo = str(data["algo"])
        if algo == "als":
            from .baseline import UserFactorModel
            return algo, UserFactorModel(data["user_factors"], data["item_factors"],
                                         hyper), None
        model = FactorModel(data["nym_factors"], data["item_factors"], hyper)
        assignment = NymAssignment(data["assignment"], int(data["nyms"]))
        return algo, model, assignment


def _split_for(config: dict, ratings: SparseRatings):
    fracs = (config["train_fraction"], config["valid_fraction"], config["test_fraction"])
    if fracs == (1.0, 0.0, 0.0):
        return ratings, None, None
    spec = SplitSpec(*fracs, seed=config["seed"])
    return split(ratings, spec)


def cmd_train(config: dict) -> Path:
    t0 = time.perf_counter()
    data = _load_data(config["data"], config["format"])
    t_load = time.perf_counter()
    train_part, _, _ = _split_for(config, data)
    t_split = time.perf_counter()
    algo, (model, assignment), trace_rows, stage_rows = _train_model(train_part, config)
    t_train = time.perf_counter()

    run_dir = _run_dir("train", config)
    _save_trained(run_dir, algo, model, assignment)
    _write_csv(run_dir / "trace.csv", "factorization,iteration,objective", trace_rows)
    if stage_rows:
        _write_csv(run_dir / "stages.csv", "nyms,per_rating_residual", stage_rows)
    if assignment is not None:
        save_assignment(assignment, run_dir / "assignment.csv")
    _write_csv(run_dir / "timings.csv", "phase,seconds", [
        ("load", f"{t_load - t0:.6f}"),
        ("split", f"{t_split - t_load:.6f}"),
        ("train", f"{t_train - t_split:.6f}"),
        ("total", f"{t_train - t0:.6f}"),
    ])
    _write_config(run_dir, "train", config)
    final = trace_rows[-1][2] if trace_rows else "nan"
    print(f"train[{algo}]: {train_part.size} ratings, final objective {final} -> {run_dir}")
    return run_dir


def _evaluate_rmse(config: dict, algo: str, model, assignment,
                   train_part: SparseRatings, test_part: SparseRatings) -> float:
    clip = None
    if np.isfinite(config["clip_low"]) and np.isfinite(config["clip_high"]):
        clip = (config["clip_low"], config["clip_high"])
    if algo == "als":
        return rmse(make_baseline_predictor(model, train_part), test_part, clip=clip)
    if not config["local"]:
        return rmse(make_predictor(model, assignment, train_part), test_part, clip=clip)
    # Local mode: one private ridge fit per test user from their train ratings.
    rated = train_part.item_rating_counts() > 0
    mean = float(train_part.values.mean()) if train_part.size else 0.0
    preds = np.empty(test_part.size)
    order = np.argsort(test_part.users, kind="stable")
    pos = 0
    while pos < order.size:
        end = pos
        u = test_part.users[order[pos]]
        while end < order.size and test_part.users[order[end]] == u:
            end += 1
        items, values = train_part.user_ratings(int(u))
        local = predict_local(model, items, values, int(assignment.nym_of[u]),
                              weight=config["local_weight"],
                              sigma2_local=config["sigma2_local"],
                              rated_items=rated, global_mean=mean)
        sel = order[pos:end]
        preds[sel] = local(test_part.items[sel])
        pos = end
    if clip is not None:
        preds = np.clip(preds, *clip)
    diff = preds - test_part.values
    return float(np.sqrt(diff @ diff / test_part.size))


def cmd_evaluate(config: dict) -> Path:
    data = _load_data(config["data"], config["format"])
    if config["test_data"]:
        test_part = _load_data(config["test_data"], config["format"])
        if (test_part.n_users, test_part.n_items) != (data.n_users, data.n_items):
            # Canonical pairs share an id space; align the dimensions.
            n = max(test_part.n_users, data.n_users)
            m = max(test_part.n_items, data.n_items)
            data = SparseRatings(n, m, data.users, data.items, data.values)
            test_part = SparseRatings(n, m, test_part.users, test_part.items,
                                      test_part.values)
        train_part = data
    else:
        train_part, _, test_part = _split_for(config, data)
        if test_part is None or test_part.size == 0:
            raise ConfigError("evaluate needs test_data or a positive test_fraction")
    algo, model, assignment = _load_trained(config["model"])

    score = _evaluate_rmse(config, algo, model, assignment, train_part, test_part)
    run_dir = _run_dir("evaluate", config)
    label = algo + ("_local" if algo != "als" and config["local"] else "")
    if assignment is not None:
        agg = aggregate(train_part, assignment)
        report = privacy_report(assignment, agg, mode=config["association_mode"])
        _write_csv(run_dir / "metrics.csv",
                   "run_id,algo,nyms,seed,rmse,guessing_probability",
                   [(run_dir.name, label, assignment.p, config["seed"], repr(score),
                     repr(report.guessing_probability))])
        _write_csv(run_dir / "association.csv",
                   "nym,size,worst_item,worst_association",
                   [(g, report.nym_sizes[g], report.worst_item[g],
                     repr(float(report.worst_association[g])))
                    for g in range(assignment.p)])
    else:
        _write_csv(run_dir / "metrics.csv",
                   "run_id,algo,nyms,seed,rmse,guessing_probability",
                   [(run_dir.name, label, "", config["seed"], repr(score), "")])
    _write_config(run_dir, "evaluate", config)
    print(f"evaluate[{label}]: rmse {score:.6f} on {test_part.size} ratings -> {run_dir}")
    return run_dir


def cmd_sweep(config: dict) -> Path:
    nyms_axis = config["nyms_list"] or [config["nyms"]]
    std_axis = config["cluster_std_list"] or [config["cluster_std"]]
    missing_axis = config["missing_list"] or [config["missing"]]
    seeds = config["seeds"] or [config["seed"]]

    rows = []
    for nyms, cluster_std, missing in itertools.product(nyms_axis, std_axis, missing_axis):
        for seed in seeds:
            cell = dict(config, nyms=nyms, cluster_std=cluster_std,
                        missing=missing, seed=seed)
            spec = SyntheticSpec(
                p_groups=cell["groups"], n_users=cell["users"], m_items=cell["items"],
                d=cell["latent_dim"], cluster_std=cluster_std,
                center_std=cell["center_std"], item_std=cell["item_std"],
                missing_fraction=missing, seed=seed)
            instance = generate(spec)
            algo, (model, assignment), _, _ = _train_model(instance.ratings, cell)
            if algo == "als":
                predictor = make_baseline_predictor(model, instance.ratings)
                p_g = ""
                eff_nyms = ""
            else:
                predictor = make_predictor(model, assignment, instance.ratings)
                p_g = repr(guessing_probability(assignment))
                eff_nyms = assignment.p
            score = rmse(predictor, instance.heldout)
            rows.append((nyms, eff_nyms, cluster_std, missing, seed, repr(score), p_g))

    run_dir = _run_dir("sweep", config)
    _write_csv(run_dir / "sweep.csv",
               "nyms,effective_nyms,cluster_std,missing,seed,rmse,guessing_probability",
               rows)
    summary = []
    for key, group in itertools.groupby(rows, key=lambda r: r[:4]):
        scores = [float(r[5]) for r in group]
        summary.append((*key, len(scores), repr(float(np.mean(scores))),
                        repr(float(np.std(scores)))))
    _write_csv(run_dir / "summary.csv",
               "nyms,effective_nyms,cluster_std,missing,runs,mean_rmse,std_rmse",
               summary)
    _write_config(run_dir, "sweep", config)
    print(f"sweep: {len(rows)} runs -> {run_dir}")
    return run_dir


def cmd_bench(config: dict) -> Path:
    from .factorization import factorize, init_model
    from .nyms import random_assignment

    rows = []
    hyper = _hyper_from(config)
    rng = np.random.default_rng(config["seed"])
    with threadpool_limits(limits=config["threads"]):
        for n, m in itertools.product(config["users_list"], config["items_list"]):
            spec = SyntheticSpec(
                p_groups=config["groups"], n_users=n, m_items=m, d=config["latent_dim"],
                cluster_std=config["cluster_std"], center_std=config["center_std"],
                item_std=config["item_std"], missing_fraction=config["missing"],
                seed=config["seed"])
            t0 = time.perf_counter()
            instance = generate(spec)
            t1 = time.perf_counter()
            assignment = random_assignment(n, config["nyms"], config["seed"])
            agg = aggregate(instance.ratings, assignment)
            t2 = time.perf_counter()
            model, _ = factorize(agg, init_model(config["nyms"], m, hyper))
            t3 = time.perf_counter()
            # warm start: re-solve after a small random assignment change
            flips = max(1, int(round(config["warm_change"] * n)))
            moved = assignment.nym_of.copy()
            idx = rng.choice(n, size=flips, replace=False)
            moved[idx] = rng.integers(0, config["nyms"], size=flips)
            warm_agg = aggregate(instance.ratings, NymAssignment(moved, config["nyms"]))
            t4 = time.perf_counter()
            factorize(warm_agg, model)
            t5 = time.perf_counter()
            update_all_nyms(instance.ratings, model, assignment)
            t6 = time.perf_counter()
            d = config["latent_dim"]
            p = config["nyms"]
            rows += [
                ("generate", n, m, p, d, f"{t1 - t0:.6f}"),
                ("aggregate", n, m, p, d, f"{t2 - t1:.6f}"),
                ("factorize_cold", n, m, p, d, f"{t3 - t2:.6f}"),
                ("factorize_warm", n, m, p, d, f"{t5 - t4:.6f}"),
                ("nym_sweep", n, m, p, d, f"{t6 - t5:.6f}"),
            ]
    run_dir = _run_dir("bench", config)
    _write_csv(run_dir / "bench.csv", "phase,users,items,nyms,latent_dim,seconds", rows)
    _write_config(run_dir, "bench", config)
    print(f"bench: {len(rows)} timings -> {run_dir}")
    return run_dir


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def _build_parser():
    import argparse

    parser = argparse.ArgumentParser(
        prog="nymrec",
        description="Privacy-enhanced nym-based recommender experiments.")
    subs = parser.add_subparsers(dest="command", required=True)
    for command, schema in SCHEMAS.items():
        sub = subs.add_parser(command, help=f"{command} run")
        sub.add_argument("--config", default=None, help="key = value config file")
        for key in schema:
            sub.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                             metavar="V", help=f"override config key {key}")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config")
    try:
        file_values = read_config_file(config_path) if config_path else {}
        overrides = {k: v for k, v in args.items() if v is not None}
        config = resolve_config(command, file_values, overrides)
        _COMMANDS[command](config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RatingsError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
