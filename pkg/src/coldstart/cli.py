"""Command-line interface.

Subcommands: train, synth, select, estimate, sweep, diagnose, oracle.
Machine-readable output goes to stdout (CSV or JSON); progress and summaries
go to stderr via logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import design, estimators, experiment, lfm, selection
from .data import load_ratings, rater_pool, reveal, save_ratings, split_items

logger = logging.getLogger("coldstart")


def _parse_scale(text: str):
    try:
        lo, hi = text.split(":")
        return float(lo), float(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f"scale must be MIN:MAX, got {text!r}") from None


def _parse_noise(text: str):
    parts = text.split(":")
    if len(parts) == 1:
        return float(parts[0])
    if len(parts) == 2:
        return float(parts[0]), float(parts[1])
    raise argparse.ArgumentTypeError(f"noise must be SIGMA or LO:HI, got {text!r}")


def _add_dataset_args(parser, name="--ratings", required=True):
    parser.add_argument(name, required=required, help="rating file path")
    parser.add_argument("--format", default="csv", choices=("csv", "movielens"))
    parser.add_argument("--scale", type=_parse_scale, default=(1.0, 5.0),
                        metavar="MIN:MAX", help="declared rating scale (default 1:5)")


def _save_variances(variances: lfm.UserVariances, user_ids, path):
    payload = {"floor": variances.floor,
               "values": {u: float(v) for u, v in zip(user_ids, variances.values)}}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def _load_variances(path, model: lfm.LatentModel) -> lfm.UserVariances:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    floor = float(payload["floor"])
    values = np.full(model.n_users, floor)
    for uid, v in payload["values"].items():
        idx = model.user_index.get(uid)
        if idx is not None:
            values[idx] = max(float(v), floor)
    return lfm.UserVariances(values=values, floor=floor)


def _cmd_train(args) -> int:
    dataset = load_ratings(args.ratings, args.format, args.scale)
    config = lfm.TrainConfig(k=args.k, epochs=args.epochs,
                             base_learning_rate=args.learning_rate,
                             l2_penalty=args.l2, seed=args.seed)

    def log_epoch(epoch, rmse):
        logger.info("epoch %d: train rmse %.6f", epoch, rmse)

    model = lfm.train_lfm(dataset, config, epoch_callback=log_epoch)
    lfm.save_model(model, args.out)
    if args.out_variances:
        variances = lfm.estimate_user_variances(model, dataset)
        _save_variances(variances, model.user_ids, args.out_variances)
    logger.info("model written to %s", args.out)
    return 0


def _cmd_synth(args) -> int:
    config = experiment.SyntheticConfig(
        n_users=args.users, n_items=args.items, k=args.k,
        raters_per_item=args.raters_per_item, noise=args.noise,
        factor_scale=args.factor_scale, isotropic=args.isotropic,
        quantize=args.quantize, seed=args.seed)
    dataset, truth, variances = experiment.generate_synthetic(config)
    save_ratings(dataset, args.out_ratings)
    lfm.save_model(truth, args.out_model)
    if args.out_variances:
        _save_variances(variances, truth.user_ids, args.out_variances)
    logger.info("synthetic dataset: %d ratings, scale [%g, %g]",
                dataset.n_ratings, *dataset.scale)
    return 0


def _pool_for(args, model):
    heldout = load_ratings(args.heldout, args.format, args.scale)
    variances = _load_variances(args.variances, model) if args.variances else None
    return heldout, rater_pool(heldout, model, args.item, variances)


def _cmd_select(args) -> int:
    model = lfm.load_model(args.model)
    heldout, pool = _pool_for(args, model)
    train = load_ratings(args.train, args.format, args.scale) if args.train else None
    params = {}
    if args.method == "cluster":
        params["mode"] = args.cluster_mode
        if args.clusters:
            params["c"] = args.clusters
    request = selection.SelectionRequest(pool=pool, budget=args.budget,
                                         method=args.method, ridge=args.ridge,
                                         seed=args.seed, method_params=params)
    result = selection.select(request, train=train, heldout=heldout)
    by_index = dict(zip(pool.users, pool.user_ids))
    for user in result.selected:
        print(by_index[user])
    logger.info("method %s selected %d of %d raters; objective %.6g (%.1f ms)",
                result.method, len(result.selected), pool.size,
                result.objective, result.elapsed * 1000)
    return 0


def _cmd_estimate(args) -> int:
    model = lfm.load_model(args.model)
    heldout, pool = _pool_for(args, model)
    wanted = [u.strip() for u in args.users.split(",") if u.strip()]
    by_id = dict(zip(pool.user_ids, pool.users))
    missing = [u for u in wanted if u not in by_id]
    if missing:
        raise SystemExit(f"users not in the item's pool: {missing}")
    subset = [by_id[u] for u in wanted]
    revealed_ratings, _ = reveal(pool, subset, heldout)
    variances = _load_variances(args.variances, model) if args.variances else None
    ridge = (args.ridge if args.ridge is not None
             else estimators.default_estimation_ridge(len(revealed_ratings), model.k))
    revealed = estimators.build_revealed(model, revealed_ratings, variances)
    if args.estimator == "gls":
        est = estimators.gls_estimate(revealed, ridge)
    elif args.estimator == "similarity":
        raw = [r.value for r in revealed_ratings]
        est = estimators.similarity_estimate(revealed, raw, model, args.gamma)
    else:
        est = estimators.least_squares_estimate(revealed, ridge)
    json.dump({"method": est.method, "bias": est.bias,
               "factors": est.factors.tolist()}, sys.stdout)
    print()
    return 0


def _cmd_sweep(args) -> int:
    job = experiment.load_sweep_job(args.config)
    config = job.config
    if args.budgets:
        config = experiment.SweepConfig(
            budgets=tuple(int(b) for b in args.budgets.replace(",", " ").split()),
            methods=config.methods, n_items_evaluated=config.n_items_evaluated,
            repeats=config.repeats, seed=config.seed,
            estimator_override=config.estimator_override, gamma=config.gamma,
            clamp=config.clamp, ridge=config.ridge)
    dataset = load_ratings(job.ratings_path, job.format, job.scale)
    model = lfm.load_model(job.model_path)
    train, new_items = split_items(dataset, job.heldout_count, job.split_seed)
    variances = None
    if job.variances_path:
        variances = _load_variances(job.variances_path, model)
    elif job.estimate_variances:
        variances = lfm.estimate_user_variances(model, train)
    rows = experiment.run_sweep(model, dataset, new_items, config, train=train,
                                variances=variances, threads=args.threads)
    out_path = args.output or job.output_path
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            experiment.write_sweep_csv(rows, fh, full_precision=args.full_precision,
                                       include_timing=not args.no_timing)
        logger.info("sweep written to %s", out_path)
    else:
        experiment.write_sweep_csv(rows, sys.stdout,
                                   full_precision=args.full_precision,
                                   include_timing=not args.no_timing)
    return 0


def _cmd_diagnose(args) -> int:
    model = lfm.load_model(args.model)
    _, pool = _pool_for(args, model)
    kind = "weighted_a_opt" if args.weighted else "a_opt"
    d = model.k + 1
    ridge = args.ridge if args.ridge is not None else 1e-6 * d
    report = design.check_supermodular(pool, ridge, kind=kind, seed=args.seed,
                                       samples=args.samples)
    print(f"pool_size: {pool.size}")
    print(f"supermodularity: {'ok' if report.ok else 'VIOLATED'} "
          f"({report.checked} triples, {len(report.violations)} violations, "
          f"{'exhaustive' if report.exhaustive else 'sampled'})")
    if pool.size <= design.MAX_EXHAUSTIVE_POOL:
        mono = design.check_monotone(pool, ridge, kind=kind)
        print(f"monotonicity: {'ok' if mono.ok else 'VIOLATED'} "
              f"({mono.checked} pairs, {len(mono.violations)} violations)")
    steep = design.steepness(pool, ridge, kind=kind)
    print(f"steepness: {steep.s:.6g}")
    print(f"t: {steep.t:.6g}")
    print(f"approximation_factor: {steep.approximation_factor:.6g}")
    print(f"phi_empty: {steep.phi_empty:.6g}"
          + (" (lower bound)" if pool.size > design.MAX_EXHAUSTIVE_POOL else ""))
    print(f"argmax_user: {steep.argmax_user}")
    return 0


def _cmd_oracle(args) -> int:
    noise = args.noise
    config = experiment.SyntheticConfig(
        n_users=args.eval_users + args.pool, n_items=1, k=args.k,
        raters_per_item=args.pool, noise=noise, isotropic=args.isotropic,
        seed=args.seed)
    dataset, truth, variances = experiment.generate_synthetic(config)
    item = dataset.item_ids[0]
    pool = rater_pool(dataset, truth, item, variances)
    subset = pool.users[: args.budget]
    eval_users = [u for u in range(truth.n_users) if u not in set(pool.users)]
    hetero = isinstance(noise, tuple)
    kind = "weighted_a_opt" if hetero else "a_opt"
    sigma = None if hetero else float(noise)
    obj = design.DesignObjective(kind=kind, ridge=0.0, sigma=sigma)
    eval_var = variances.values[np.asarray(eval_users)] if hetero else None
    formula = design.expected_mse(obj, pool, subset, eval_variances=eval_var)
    mc = experiment.monte_carlo_expected_mse(
        truth, pool, subset, eval_users,
        estimator="gls" if hetero else "ls", trials=args.trials,
        seed=args.seed + 1, noise=variances if hetero else sigma)
    rel = abs(mc - formula) / formula
    print(f"formula: {formula:.6g}")
    print(f"monte_carlo: {mc:.6g} ({args.trials} trials)")
    print(f"relative_error: {rel:.4%}")
    return 0 if rel < args.tolerance else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coldstart",
        description="Budget-constrained rater selection and rating estimation "
                    "for new items in a latent factor recommender.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a latent factor model by SGD")
    _add_dataset_args(p)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--learning-rate", type=float, default=lfm.DEFAULT_LEARNING_RATE)
    p.add_argument("--l2", type=float, default=lfm.DEFAULT_L2_PENALTY)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model output path (JSON)")
    p.add_argument("--out-variances", help="also estimate per-user variances")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("synth", help="generate a synthetic dataset + truth model")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--raters-per-item", type=int, required=True)
    p.add_argument("--noise", type=_parse_noise, default=0.5,
                   metavar="SIGMA|LO:HI", help="iid sigma or per-user sigma range")
    p.add_argument("--factor-scale", type=float, default=1.0)
    p.add_argument("--isotropic", action="store_true")
    p.add_argument("--quantize", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-ratings", required=True)
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-variances")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("select", help="select raters for one new item")
    p.add_argument("--model", required=True)
    _add_dataset_args(p, "--heldout")
    p.add_argument("--item", required=True)
    p.add_argument("--method", required=True, choices=selection.METHODS)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--ridge", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", help="training ratings (frequent/edgy baselines)")
    p.add_argument("--variances", help="per-user variance JSON (bgs2)")
    p.add_argument("--cluster-mode", default="one_per_cluster",
                   choices=("one_per_cluster", "proportional"))
    p.add_argument("--clusters", type=int)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("estimate", help="estimate a new item from chosen raters")
    p.add_argument("--model", required=True)
    _add_dataset_args(p, "--heldout")
    p.add_argument("--item", required=True)
    p.add_argument("--users", required=True, help="comma-separated rater ids")
    p.add_argument("--estimator", default="ls", choices=experiment.ESTIMATOR_TAGS)
    p.add_argument("--ridge", type=float)
    p.add_argument("--gamma", type=float, default=4.0)
    p.add_argument("--variances")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("sweep", help="run a (method x budget) sweep from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--output", help="CSV path (default: config output or stdout)")
    p.add_argument("--budgets", help="override the config's budgets")
    p.add_argument("--threads", type=int)
    p.add_argument("--full-precision", action="store_true")
    p.add_argument("--no-timing", action="store_true",
                   help="zero the elapsed_ms column for reproducible output")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("diagnose", help="steepness + supermodularity report for a pool")
    p.add_argument("--model", required=True)
    _add_dataset_args(p, "--heldout")
    p.add_argument("--item", required=True)
    p.add_argument("--ridge", type=float)
    p.add_argument("--weighted", action="store_true")
    p.add_argument("--variances")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_diagnose)

    p = sub.add_parser("oracle", help="Monte Carlo vs. closed-form expected MSE")
    p.add_argument("--eval-users", type=int, default=500)
    p.add_argument("--pool", type=int, default=30)
    p.add_argument("--budget", type=int, default=10)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--noise", type=_parse_noise, default=0.5)
    p.add_argument("--isotropic", action="store_true", default=True)
    p.add_argument("--trials", type=int, default=5000)
    p.add_argument("--tolerance", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_oracle)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
