"""Command-line surface: train / predict / impute / missing-bench / factors /
simulate workflows over manifest-described datasets.

Exit codes: 0 success, 1 usage or config error, 2 numerical failure,
3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, data, impute, inference, metrics, predict, synth
from .data import DataError, MultiViewDataset
from .inference import NumericalError
from .state import Hyperparams, load_state, save_state


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2
        raise UsageError(message)


def _hyperparams_from_args(args) -> Hyperparams:
    kwargs = dict(
        s=args.s,
        convergence_eps=args.eps,
        convergence_relative=args.relative_eps,
        max_iters=args.max_iters,
        convergence_window=args.window,
        prune_every=args.prune_every,
        prune_rel_threshold=args.prune_threshold,
        seed=args.seed,
    )
    if args.k is not None:
        kwargs["k"] = args.k
    try:
        return Hyperparams(**kwargs)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _add_hyper_flags(p: argparse.ArgumentParser):
    p.add_argument("--k", type=int, default=None, help="task latent size (default C-1)")
    p.add_argument("--s", type=int, default=100, help="generative latent size")
    p.add_argument("--eps", type=float, default=1e-6, help="convergence threshold")
    p.add_argument(
        "--relative-eps",
        action="store_true",
        dest="relative_eps",
        help="interpret --eps relative to |L|, e.g. 1e-8",
    )
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--window", type=int, default=100, help="convergence window")
    p.add_argument("--prune-every", type=int, default=10)
    p.add_argument("--prune-threshold", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)


def _write_trace(trace: inference.ElboTrace, path: Path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "elbo", "active_s", "event"])
        for i, (v, a, e) in enumerate(zip(trace.values, trace.active_s, trace.events), 1):
            w.writerow([i, repr(v), a, e])


def _write_report(report: inference.FitReport, path: Path):
    blob = {
        "iterations": report.iterations,
        "converged": report.converged,
        "final_elbo": report.final_elbo,
        "prune_events": report.prune_events,
        "wall_time_s": report.wall_time_s,
    }
    path.write_text(json.dumps(blob, indent=2))


def _write_predictions(out: predict.PredictiveOutput, classes: list[str], path: Path):
    norm = out.proba_normalized()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = (
            ["row"]
            + [f"proba_{c}" for c in classes]
            + [f"proba_norm_{c}" for c in classes]
            + [f"y_mean_{c}" for c in classes]
            + [f"y_var_{c}" for c in classes]
            + ["hard_label"]
        )
        w.writerow(header)
        for i in range(out.proba.shape[0]):
            row = (
                [i]
                + [repr(float(x)) for x in out.proba[i]]
                + [repr(float(x)) for x in norm[i]]
                + [repr(float(x)) for x in out.y_mean[i]]
                + [repr(float(x)) for x in out.y_var[i]]
                + [classes[out.hard_label[i]]]
            )
            w.writerow(row)


def cmd_train(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = data.load_dataset(args.manifest)
    ds_std, stats = data.standardize(ds)
    hp = _hyperparams_from_args(args)
    state, trace, report = inference.fit(ds_std, hp)
    save_state(state, out_dir / "state.npz")
    data.save_stats(stats, out_dir / "standardize_stats.json")
    _write_trace(trace, out_dir / "elbo_trace.csv")
    _write_report(report, out_dir / "fit_report.json")
    print(
        f"trained: {report.iterations} sweeps, converged={report.converged}, "
        f"final L(q)={report.final_elbo:.4f}, active dims={state.s_active}"
    )
    return 0


def cmd_predict(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = load_state(args.state)
    ds = data.load_dataset(args.manifest)
    stats_path = Path(args.state).parent / "standardize_stats.json"
    if args.stats:
        stats_path = Path(args.stats)
    if stats_path.exists():
        ds_std, _ = data.standardize(ds, data.load_stats(stats_path))
    else:
        ds_std, _ = data.standardize(ds)
    if args.mode == "transductive":
        if ds_std.n_samples != state.n_samples:
            raise UsageError(
                "transductive prediction needs the training dataset "
                f"({state.n_samples} rows), got {ds_std.n_samples}"
            )
        zq, gq = predict.project_latents(state, mode="transductive")
    else:
        zq, gq = predict.project_latents(state, x_star=ds_std, mode="inductive")
    out = predict.predict(state, zq, gq, spaces=args.spaces)
    _write_predictions(out, ds.labels.classes, out_dir / "predictions.csv")
    labels = ds.labels.class_indices()
    if (labels >= 0).any():
        rep = metrics.metric_report(out.proba, out.hard_label, labels)
        (out_dir / "metrics.json").write_text(
            json.dumps(
                {
                    "auc": rep.auc,
                    "bacc": rep.bacc,
                    "sensitivity": rep.sensitivity,
                    "specificity": rep.specificity,
                    "n_evaluated": rep.n_evaluated,
                },
                indent=2,
            )
        )
        print(f"predicted {out.proba.shape[0]} rows: AUC={rep.auc:.4f} BACC={rep.bacc:.4f}")
    else:
        print(f"predicted {out.proba.shape[0]} rows (no labels to score)")
    return 0


def cmd_impute(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = load_state(args.state)
    ds = data.load_dataset(args.manifest)
    stats_path = Path(args.stats) if args.stats else Path(args.state).parent / "standardize_stats.json"
    stats = data.load_stats(stats_path) if stats_path.exists() else None
    if stats is not None:
        ds_std, _ = data.standardize(ds, stats)
    else:
        ds_std, stats = data.standardize(ds)
    res = impute.impute(state, ds_std)
    for m, view in enumerate(ds.views):
        mu, sd = stats.mean[view.name], stats.std[view.name]
        filled_raw = res.filled[m] * sd + mu  # back to the input scale
        filled_raw = np.where(view.observed, view.values, filled_raw)
        var_raw = res.variance[m] * sd**2
        _write_matrix_csv(out_dir / f"{view.name}_imputed.csv", filled_raw)
        _write_matrix_csv(out_dir / f"{view.name}_variance.csv", var_raw)
    n_missing = sum(int((~v.observed).sum()) for v in ds.views)
    print(f"imputed {n_missing} missing cells across {ds.n_views} views")
    return 0


def _write_matrix_csv(path: Path, mat: np.ndarray):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(mat.shape[1])])
        for row in mat:
            w.writerow([repr(float(x)) for x in row])


def _bench_cell(ds_masked: MultiViewDataset, method: str, hp: Hyperparams, test_rows):
    """Train on a masked dataset under one imputation strategy and score."""
    if method == "mean":
        filled = impute.mean_impute(ds_masked)
    elif method == "knn":
        filled = impute.knn_impute(ds_masked)
    else:
        filled = None
    ds_in = ds_masked
    if filled is not None:
        views = [
            data.ViewMatrix(v.name, f, np.ones_like(v.observed))
            for v, f in zip(ds_masked.views, filled)
        ]
        ds_in = MultiViewDataset(views, ds_masked.labels.copy())
    ds_std, _ = data.standardize(ds_in)
    state, _, _ = inference.fit(ds_std, hp)
    zq, gq = predict.project_latents(state, mode="transductive", rows=test_rows)
    out = predict.predict(state, zq, gq)
    labels = ds_masked.labels.class_indices()[test_rows]
    rep = metrics.metric_report(out.proba, out.hard_label, labels)
    return rep


def cmd_missing_bench(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = data.load_dataset(args.manifest)
    rates = [float(r) for r in args.rates.split(",")]
    hp = _hyperparams_from_args(args)
    folds = data.split_folds(ds, args.folds, args.split_seed)
    train_rows, test_rows = folds[0]
    rows = []
    for rate in rates:
        for mask_seed in range(args.mask_seeds):
            masked = data.apply_mcar_mask(ds, rate, seed=args.seed * 1000 + mask_seed)
            masked = masked.mask_labels(test_rows)
            for method in ("internal", "mean", "knn"):
                rep = _bench_cell(masked, method, hp, test_rows)
                rows.append((rate, mask_seed, method, rep.bacc, rep.auc))
    with open(out_dir / "missing_bench.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rate", "mask_seed", "method", "bacc", "auc"])
        for row in rows:
            w.writerow(row)
    print(f"benchmark finished: {len(rows)} cells -> {out_dir / 'missing_bench.csv'}")
    return 0


def cmd_factors(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    states = [load_state(p) for p in args.states]
    report = {}
    for which in ("generative", "task"):
        folded = analysis.folded_from_states(states, which=which)
        stable = analysis.stable_factors(
            folded, cos_threshold=args.cos_threshold, min_folds=args.min_folds
        )
        summary = analysis.factor_summary(folded, stable, var_threshold=args.var_threshold)
        report[which] = {
            "n_folds": stable.n_folds,
            "stable_count": stable.count,
            "factors": summary,
        }
    (out_dir / "stability_report.json").write_text(json.dumps(report, indent=2))
    print(
        "stable factors: "
        f"generative={report['generative']['stable_count']}, "
        f"task={report['task']['stable_count']}"
    )
    return 0


def cmd_simulate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = synth.SynthConfig(
        n=args.n,
        view_dims=tuple(int(d) for d in args.dims.split(",")),
        s_true=args.s_true,
        k_true=args.k_true,
        n_classes=args.classes,
        psi=args.psi,
        tau=args.tau,
        eta=args.eta,
        mcar_rate=args.mcar_rate,
        mcar_seed=args.seed,
        seed=args.seed,
    )
    ds, truth = synth.generate(cfg)
    manifest = data.write_dataset(ds, out_dir)
    np.savez(
        out_dir / "ground_truth.npz",
        g=truth.g,
        z=truth.z,
        y=truth.y,
        u=truth.u,
        vy=truth.vy,
        t_raw=truth.t_raw,
        **{f"v{m}": v for m, v in enumerate(truth.v)},
        **{f"w{m}": w for m, w in enumerate(truth.w)},
    )
    print(
        f"simulated N={ds.n_samples}, views={[v.n_features for v in ds.views]}, "
        f"C={ds.labels.n_classes} -> {manifest}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bilatent", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit the model on a manifest dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_hyper_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="posterior-predictive classification")
    p.add_argument("--state", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stats", default=None, help="standardization stats JSON")
    p.add_argument("--mode", choices=["transductive", "inductive"], default="transductive")
    p.add_argument("--spaces", choices=["zg", "z", "g"], default="zg")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("impute", help="fill missing entries with variances")
    p.add_argument("--state", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stats", default=None)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("missing-bench", help="BACC vs missing rate benchmark")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rates", default="0.05,0.10,0.15,0.20,0.25,0.30")
    p.add_argument("--mask-seeds", type=int, default=10, dest="mask_seeds")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--split-seed", type=int, default=0, dest="split_seed")
    _add_hyper_flags(p)
    p.set_defaults(func=cmd_missing_bench)

    p = sub.add_parser("factors", help="cross-fold stability of latent factors")
    p.add_argument("--states", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cos-threshold", type=float, default=0.95, dest="cos_threshold")
    p.add_argument("--min-folds", type=int, default=8, dest="min_folds")
    p.add_argument("--var-threshold", type=float, default=0.10, dest="var_threshold")
    p.set_defaults(func=cmd_factors)

    p = sub.add_parser("simulate", help="sample a synthetic dataset + ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--dims", default="10,10", help="comma-separated view dims")
    p.add_argument("--s-true", type=int, default=3, dest="s_true")
    p.add_argument("--k-true", type=int, default=1, dest="k_true")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--psi", type=float, default=25.0)
    p.add_argument("--tau", type=float, default=25.0)
    p.add_argument("--eta", type=float, default=100.0)
    p.add_argument("--mcar-rate", type=float, default=0.0, dest="mcar_rate")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
