"""Command-line surface: dataset generation, training, baseline fitting,
evaluation, experiments, and the self-check battery.

Every run resolves its configuration (file + ``--set`` overrides), executes
under ``--workdir``, and writes a manifest with the resolved config and
sha256 hashes of all artifacts, sufficient to reproduce them bit-identically
in single-threaded mode.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import DEFAULT_LAMBDA_GRID, REGULARIZERS, select_lambda
from .checks import run_all_checks, random_query
from .config import ConfigError, RunConfig, default_config, load_config
from .dataset import build_all_pairs, export_csv, load_measurement_set, place_terminals, save_measurement_set, split_episode
from .environment import load_environment, sample_environment, save_environment
from .evaluation import (
    CreteEstimator,
    KnnEstimator,
    TomographicEstimator,
    mae,
    run_experiment,
)
from .invariance import canonicalize
from .model import ModelParams, load_checkpoint, save_checkpoint
from .trainer import TrainingDiverged, train

_FEATURE_COLUMNS = [
    "tx_x", "tx_y", "tx_z",
    "rx_x", "rx_y", "rx_z",
    "qy_x", "qy_y", "qy_z",
    "tx_mag", "rx_mag", "qy_mag",
    "tx_ux", "tx_uy", "tx_uz",
    "rx_ux", "rx_uy", "rx_uz",
    "qy_ux", "qy_uy", "qy_uz",
    "query_height", "gain_std",
]


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(path.read_bytes())
    return digest.hexdigest()


def _write_manifest(cfg: RunConfig, command: str, argv: list[str], workdir: Path, artifacts: list[Path]) -> Path:
    hashes = {}
    for path in sorted(artifacts):
        hashes[path.relative_to(workdir).as_posix()] = _sha256(path)
    text = cfg.serialize(
        extra_sections={
            "manifest": {
                "command": command,
                "argv": " ".join(argv),
                "version": __version__,
            },
            "artifacts": hashes,
        }
    )
    out = workdir / f"manifest_{command.replace('-', '_')}.txt"
    out.write_text(text, encoding="ascii")
    return out


def _resolve_config(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config) if args.config else default_config()
    for override in args.set or []:
        if "=" not in override or "." not in override.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {override!r}")
        target, raw = override.split("=", 1)
        section, key = target.split(".", 1)
        cfg.set(section.strip(), key.strip(), raw.strip())
    if args.seed is not None:
        cfg.set("run", "seed", str(args.seed))
    if args.threads is not None:
        cfg.set("run", "threads", str(args.threads))
    if args.workdir is not None:
        cfg.set("run", "workdir", args.workdir)
    elif _env_workdir() and (args.config is None or cfg.get("run", "workdir") == "."):
        cfg.set("run", "workdir", _env_workdir())
    workdir = Path(cfg.get("run", "workdir")).expanduser()
    workdir.mkdir(parents=True, exist_ok=True)
    return cfg, workdir


def _env_workdir() -> str:
    import os

    return os.environ.get("CRETE_WORKDIR", "")


def _env_kwargs(cfg: RunConfig) -> dict:
    env = cfg.values["environment"]
    return dict(
        region=cfg.region(),
        grid=cfg.grid(),
        building_size=(env["building_width"], env["building_depth"]),
        loss_density=env["loss_density"],
        path_loss=cfg.path_loss(),
    )


# -- subcommands ----------------------------------------------------------------


def _cmd_gen_data(cfg: RunConfig, workdir: Path, argv: list[str]) -> int:
    ds = cfg.values["dataset"]
    env_cfg = cfg.values["environment"]
    data_dir = workdir / "data"
    data_dir.mkdir(exist_ok=True)
    artifacts = []
    for split, count, seed_base in (
        ("train", ds["num_train_envs"], ds["train_seed_base"]),
        ("test", ds["num_test_envs"], ds["test_seed_base"]),
    ):
        for i in range(count):
            seed = seed_base + i
            env = sample_environment(
                rng_seed=seed, max_buildings=env_cfg["max_buildings"], env_id=seed, **_env_kwargs(cfg)
            )
            terminals = place_terminals(seed, cfg.region(), ds["num_terminals"])
            mset = build_all_pairs(env, terminals, noise_std=ds["noise_std"], rng_seed=seed)
            env_path = data_dir / f"{split}_{i:04d}.env"
            set_path = data_dir / f"{split}_{i:04d}.set"
            save_environment(env, env_path)
            save_measurement_set(mset, set_path)
            artifacts += [env_path, set_path]
            if ds["write_csv"]:
                csv_path = data_dir / f"{split}_{i:04d}.csv"
                export_csv(mset, csv_path)
                artifacts.append(csv_path)
    manifest = _write_manifest(cfg, "gen-data", argv, workdir, artifacts)
    print(f"wrote {len(artifacts)} dataset files under {data_dir} (manifest: {manifest.name})")
    return 0


def _load_split(workdir: Path, split: str, with_envs: bool = False):
    data_dir = workdir / "data"
    sets = sorted(data_dir.glob(f"{split}_*.set"))
    if not sets:
        raise FileNotFoundError(f"no {split} datasets under {data_dir}; run gen-data first")
    msets = [load_measurement_set(p) for p in sets]
    if not with_envs:
        return msets
    envs = [load_environment(p.with_suffix(".env")) for p in sets]
    return msets, envs


def _cmd_train(cfg: RunConfig, workdir: Path, argv: list[str]) -> int:
    train_sets = _load_split(workdir, "train")
    model_cfg = cfg.model_config()
    params = ModelParams.new(model_cfg, seed=cfg.get("model", "init_seed"))
    train_cfg = cfg.train_config()
    val_sets = None
    if train_cfg.val_every:
        try:
            val_sets = _load_split(workdir, "test")
        except FileNotFoundError:
            val_sets = None
    ckpt_dir = workdir / "checkpoints"
    results_dir = workdir / "results"
    ckpt_dir.mkdir(exist_ok=True)
    results_dir.mkdir(exist_ok=True)

    snapshots = []

    def on_step(row, current_params):
        step = row["step"] + 1
        if train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            path = ckpt_dir / f"crete_step{step:06d}.ckpt"
            save_checkpoint(current_params, path)
            snapshots.append(path)

    started = time.time()
    try:
        params, trace = train(params, train_sets, train_cfg, model_cfg, val_sets=val_sets, on_step=on_step)
    except TrainingDiverged as exc:
        crash_path = ckpt_dir / "crete_diverged.ckpt"
        save_checkpoint(params, crash_path)
        print(f"training aborted: {exc} (checkpoint: {crash_path})", file=sys.stderr)
        return 3
    final_ckpt = ckpt_dir / "crete.ckpt"
    save_checkpoint(params, final_ckpt)
    trace_path = results_dir / "train_trace.csv"
    with open(trace_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("step,train_loss,val_loss\n")
        for row in trace:
            val = format(row["val_loss"], ".17g") if row["val_loss"] != "" else ""
            fh.write(f"{row['step']},{format(row['train_loss'], '.17g')},{val}\n")
    artifacts = [final_ckpt, trace_path] + snapshots
    manifest = _write_manifest(cfg, "train", argv, workdir, artifacts)
    last = trace[-1]["train_loss"] if trace else float("nan")
    print(
        f"trained {train_cfg.steps} steps in {time.time() - started:.1f}s; "
        f"final loss {last:.4f}; checkpoint {final_ckpt} (manifest: {manifest.name})"
    )
    return 0


def _selection_context(cfg: RunConfig):
    b = cfg.values["baselines"]
    seed = b["selection_env_seed"]
    env_cfg = cfg.values["environment"]
    env = sample_environment(rng_seed=seed, max_buildings=env_cfg["max_buildings"], env_id=seed, **_env_kwargs(cfg))
    terminals = place_terminals(seed, cfg.region(), cfg.get("dataset", "num_terminals"))
    mset = build_all_pairs(env, terminals, noise_std=cfg.get("dataset", "noise_std"), rng_seed=seed)
    episode = split_episode(mset, seed, min(b["selection_context"], len(mset) - 1), target_cap=None)
    return env, episode


def _cmd_fit_baseline(cfg: RunConfig, workdir: Path, argv: list[str]) -> int:
    b = cfg.values["baselines"]
    env, episode = _selection_context(cfg)
    context, holdout = episode.context, episode.targets
    results_dir = workdir / "results"
    results_dir.mkdir(exist_ok=True)
    chosen: dict[str, float] = {}
    for kind in REGULARIZERS:
        configured = b[f"lambda_{kind}"]
        if configured > 0:
            chosen[f"lambda_{kind}"] = configured
            continue
        chosen[f"lambda_{kind}"] = select_lambda(
            context, cfg.grid(), cfg.region(), kind, rng_seed=cfg.get("run", "seed"), iterations=b["iterations"]
        )
    best_k, best_mae = b["knn_k"], float("inf")
    from .baselines import knn_estimate

    for k in (1, 2, 3, 5, 8, 16):
        if k > len(context):
            continue
        preds = np.array(
            [knn_estimate((holdout.txs[i], holdout.rxs[i]), context, k) for i in range(len(holdout))]
        )
        err = float(np.abs(preds - holdout.gains).mean())
        if err < best_mae:
            best_k, best_mae = k, err
    chosen["knn_k"] = best_k
    out = results_dir / "baseline_params.txt"
    with open(out, "w", encoding="ascii", newline="\n") as fh:
        for key, value in chosen.items():
            fh.write(f"{key} = {value}\n")
    manifest = _write_manifest(cfg, "fit-baseline", argv, workdir, [out])
    print(f"selected {chosen} -> {out} (manifest: {manifest.name})")
    return 0


def _read_baseline_params(workdir: Path) -> dict[str, float]:
    path = workdir / "results" / "baseline_params.txt"
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text(encoding="ascii").splitlines():
        if "=" in line:
            key, value = (part.strip() for part in line.split("=", 1))
            out[key] = float(value)
    return out


def _build_estimators(cfg: RunConfig, workdir: Path):
    b = cfg.values["baselines"]
    selected = _read_baseline_params(workdir)
    estimators = []
    for name in cfg.get("evaluation", "estimators"):
        if name == "crete":
            ckpt = cfg.get("evaluation", "checkpoint") or str(workdir / "checkpoints" / "crete.ckpt")
            ckpt_path = Path(ckpt)
            if not ckpt_path.exists():
                raise FileNotFoundError(f"CRETE checkpoint not found at {ckpt_path}; run train first")
            estimators.append(CreteEstimator(load_checkpoint(ckpt_path)))
        elif name == "knn":
            k = int(selected.get("knn_k", b["knn_k"]))
            estimators.append(KnnEstimator(k))
        elif name.startswith("tomo_"):
            kind = name[len("tomo_") :]
            if kind not in REGULARIZERS:
                raise ConfigError(f"unknown estimator {name!r}")
            lam = b[f"lambda_{kind}"] or selected.get(f"lambda_{kind}", 0.0)
            if lam <= 0:
                lam = DEFAULT_LAMBDA_GRID[kind][2]  # mid grid point when never selected
            estimators.append(
                TomographicEstimator(
                    cfg.regularizer(kind, lam), grid=cfg.grid(), region=cfg.region()
                )
            )
        else:
            raise ConfigError(f"unknown estimator {name!r}")
    return estimators


def _cmd_eval(cfg: RunConfig, workdir: Path, argv: list[str]) -> int:
    e = cfg.values["evaluation"]
    msets, envs = _load_split(workdir, "test", with_envs=True)
    threads = max(1, cfg.get("run", "threads"))
    results_dir = workdir / "results"
    results_dir.mkdir(exist_ok=True)

    def eval_env(item):
        index, (env, mset) = item
        # Per-task estimator instances: tomographic fits cache per context.
        estimators = _build_estimators(cfg, workdir)
        episode = split_episode(
            mset, e["eval_seed_base"] + index, min(e["context_size"], len(mset) - 1), target_cap=None
        )
        row = [env.id]
        for est in estimators:
            row.append(mae(est, env, episode.context, e["num_eval_pairs"], e["eval_seed_base"] + index))
        return row

    items = list(enumerate(zip(envs, msets)))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(eval_env, items))
    else:
        rows = [eval_env(item) for item in items]

    names = [est.name for est in _build_estimators(cfg, workdir)]
    label = e["run_label"] or time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
    cfg.set("evaluation", "run_label", label)
    out = results_dir / f"eval_{label}.csv"
    with open(out, "w", encoding="ascii", newline="\n") as fh:
        fh.write("env_id," + ",".join(f"{n}_mae_db" for n in names) + "\n")
        for row in rows:
            fh.write(",".join([str(row[0])] + [format(v, ".17g") for v in row[1:]]) + "\n")
    manifest = _write_manifest(cfg, "eval", argv, workdir, [out])
    means = np.asarray([r[1:] for r in rows]).mean(axis=0)
    summary = ", ".join(f"{n}={m:.2f} dB" for n, m in zip(names, means))
    print(f"eval over {len(rows)} environments: {summary} -> {out} (manifest: {manifest.name})")
    return 0


def _cmd_experiment(cfg: RunConfig, workdir: Path, argv: list[str]) -> int:
    e = cfg.values["evaluation"]
    estimators = _build_estimators(cfg, workdir)
    exp_cfg = cfg.experiment_config()
    result = run_experiment(exp_cfg, estimators)
    label = e["run_label"] or time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
    cfg.set("evaluation", "run_label", label)
    results_dir = workdir / "results"
    results_dir.mkdir(exist_ok=True)
    out = results_dir / f"exp_{exp_cfg.id}_{label}.csv"
    result.write_csv(out)
    manifest = _write_manifest(cfg, "experiment", argv, workdir, [out])
    print(f"experiment {exp_cfg.id} over {exp_cfg.num_envs} environments -> {out} (manifest: {manifest.name})")
    return 0


def _cmd_check(cfg: RunConfig, workdir: Path, argv: list[str], dump_features: str | None) -> int:
    artifacts = []
    if dump_features:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.get("run", "seed"), 0xD0F0]))
        q = random_query(rng, region=cfg.region(), context_size=16)
        feats = canonicalize(q)
        path = Path(dump_features)
        if not path.is_absolute():
            path = workdir / path
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(",".join(_FEATURE_COLUMNS) + "\n")
            for m in range(feats.shape[1]):
                fh.write(",".join(format(v, ".17g") for v in feats[:, m]) + "\n")
        artifacts.append(path)
        print(f"feature matrix dumped to {path}")

    results = run_all_checks(quick=True, seed=cfg.get("run", "seed"))
    all_ok = True
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        all_ok = all_ok and ok
    _write_manifest(cfg, "check", argv, workdir, [a for a in artifacts if a.is_relative_to(workdir)])
    return 0 if all_ok else 1


# -- dispatch --------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gainmap",
        description="Channel-gain map estimation toolkit: data synthesis, CRETE training, baselines, experiments.",
    )
    parser.add_argument("--config", help="path to a config file (a manifest also works)")
    parser.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    parser.add_argument("--seed", type=int, help="override run.seed")
    parser.add_argument("--threads", type=int, help="worker parallelism cap (1 = deterministic)")
    parser.add_argument("--workdir", help="directory for all inputs/outputs (fallback: $CRETE_WORKDIR)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="synthesize environments and measurement sets")
    sub.add_parser("train", help="train the CRETE estimator on generated data")
    sub.add_parser("fit-baseline", help="select tomographic lambdas and the KNN neighbor count")
    sub.add_parser("eval", help="per-environment MAE for the configured estimators")
    sub.add_parser("experiment", help="run a sweep experiment and write its CSV")
    check = sub.add_parser("check", help="run the self-test suites")
    check.add_argument("--dump-features", metavar="PATH", help="also dump a sample feature matrix CSV")
    return parser


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg, workdir = _resolve_config(args)
        if args.command == "gen-data":
            return _cmd_gen_data(cfg, workdir, argv)
        if args.command == "train":
            return _cmd_train(cfg, workdir, argv)
        if args.command == "fit-baseline":
            return _cmd_fit_baseline(cfg, workdir, argv)
        if args.command == "eval":
            return _cmd_eval(cfg, workdir, argv)
        if args.command == "experiment":
            return _cmd_experiment(cfg, workdir, argv)
        if args.command == "check":
            return _cmd_check(cfg, workdir, argv, getattr(args, "dump_features", None))
        parser.error(f"unknown command {args.command!r}")
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
