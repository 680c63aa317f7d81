"""Command-line front end.

Subcommands: ``randomize``, ``verify``, ``mst``, ``priors`` and ``sco``.
Exit codes: 0 success, 1 verification failure, 2 input error, 3 runtime or
privacy error. The seed defaults to ``$LABELRAND_SEED`` and then to 0.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from labelrand import __version__, fileio, mechanisms, multistage, priors, sco, verify
from labelrand.errors import (
    InputDomainError,
    ParameterError,
    PrivacyLedgerError,
    TrainingDivergenceError,
)
from labelrand.seeding import keyed_rng, keyed_uniform

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3

logger = logging.getLogger("labelrand")


class CliInputError(ValueError):
    pass


def _default_seed() -> int:
    raw = os.environ.get("LABELRAND_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliInputError(f"LABELRAND_SEED={raw!r} is not an integer") from None


def _manifest(command: str, params: dict, seed: int, inputs: dict, started: float) -> dict:
    return {
        "command": command,
        "params": params,
        "seed": seed,
        "inputs": {name: {"path": str(p), "sha256": fileio.file_digest(p)} for name, p in inputs.items() if p},
        "version": __version__,
        "wallclock_seconds": round(time.time() - started, 6),
    }


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# randomize ----------------------------------------------------------------


def cmd_randomize(args) -> int:
    started = time.time()
    seed = args.seed if args.seed is not None else _default_seed()
    eps = mechanisms.as_epsilon(args.eps)
    prior_ids = prior_rows = None
    if args.priors:
        prior_ids, prior_rows = fileio.read_priors(args.priors, args.classes)
        K = prior_rows.shape[1]
    elif args.classes:
        K = args.classes
    else:
        raise CliInputError("number of classes unknown: pass --classes or --priors")
    if args.mechanism != "classic" and prior_rows is None:
        raise CliInputError(f"mechanism {args.mechanism!r} needs --priors")
    ids, labels = fileio.read_labels(args.labels, K)
    positions = fileio.align(ids, prior_ids, args.priors) if prior_rows is not None else None

    out_rows = []
    k_counts = {}
    classic = mechanisms.classic_table(K, eps) if args.mechanism == "classic" else None
    for j, (example_id, y) in enumerate(zip(ids, labels)):
        u = keyed_uniform(seed, "randomize", example_id)
        if classic is not None:
            out_rows.append([example_id, mechanisms.inverse_cdf(classic[y], u)])
            continue
        prior = prior_rows[positions[j]]
        k = mechanisms.rrp_plan(prior, eps).k_star if args.mechanism == "with-prior" else args.k
        table = mechanisms.top_k_table(prior, k, eps)
        out_rows.append([example_id, mechanisms.inverse_cdf(table[y], u), k])
        k_counts[str(k)] = k_counts.get(str(k), 0) + 1

    out = Path(args.out)
    header = ["id", "label"] if classic is not None else ["id", "label", "k_star"]
    fileio.write_csv(out, header, out_rows)
    params = {"eps": eps, "mechanism": args.mechanism, "classes": K, "k": args.k}
    manifest = _manifest("randomize", params, seed, {"labels": args.labels, "priors": args.priors}, started)
    manifest["rows"] = len(out_rows)
    if k_counts:
        manifest["k_star_counts"] = dict(sorted(k_counts.items(), key=lambda kv: int(kv[0])))
    fileio.write_json(Path(str(out) + ".manifest.json"), manifest)
    print(f"wrote {len(out_rows)} randomized labels to {out}")
    return EXIT_OK


# verify -------------------------------------------------------------------


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    if args.suite == "dp":
        checks = verify.dp_suite(
            args.mechanism, args.eps if args.eps is not None else 1.0, args.claim_eps,
            args.classes or 4, args.trials or 100, args.k, seed,
        )
    elif args.suite == "optimality":
        grid = (args.eps,) if args.eps is not None else verify.DEFAULT_EPS_GRID
        checks = verify.optimality_suite(args.classes or 6, args.trials or 1000, grid, seed)
    elif args.suite == "unbiased":
        checks = verify.unbiased_suite(args.trials or 500, seed)
    else:
        checks = verify.dlaplace_suite(draws=args.draws, seed=seed, eps_p=args.eps if args.eps else 1.0)
    for check in checks:
        print(check.line())
    ok = all(c.ok for c in checks)
    print(f"{args.suite}: {'PASS' if ok else 'FAIL'} ({sum(c.ok for c in checks)}/{len(checks)} checks)")
    return EXIT_OK if ok else EXIT_VERIFY


# mst ----------------------------------------------------------------------

_CONFIG_KEYS = {
    "eps": float, "stages": int, "splits": str, "temperature": float,
    "mixup_alpha": float, "epochs": int, "learning_rate": float, "lr_schedule": str,
    "l2": float, "batch_size": int, "seed": int, "warm_start": str, "reuse": str,
    "filter_k": int, "classes": int,
}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise CliInputError(f"not a boolean: {text!r}")


def _parse_splits(text: str):
    try:
        return tuple(float(s) for s in text.replace(",", " ").split())
    except ValueError:
        raise CliInputError(f"bad splits {text!r}") from None


def _load_config(path) -> dict:
    if not path:
        return {}
    raw = fileio.read_config(path)
    out = {}
    for key, (value, line_no) in raw.items():
        if key not in _CONFIG_KEYS:
            raise fileio.FileFormatError(path, line_no, f"unknown key {key!r}")
        try:
            out[key] = _CONFIG_KEYS[key](value)
        except ValueError:
            raise fileio.FileFormatError(path, line_no, f"bad value for {key}: {value!r}") from None
    return out


def _settings(args) -> dict:
    """Config-file values overridden by explicit flags."""
    cfg = _load_config(args.config)
    for key in ("eps", "stages", "splits", "temperature", "mixup_alpha", "seed", "classes", "epochs",
                "learning_rate", "filter_k"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg.get("seed") is None:
        cfg["seed"] = _default_seed()
    return cfg


def cmd_mst(args) -> int:
    started = time.time()
    cfg = _settings(args)
    if "eps" not in cfg:
        raise CliInputError("privacy budget missing: pass --eps or set eps in the config file")
    seed = int(cfg["seed"])
    T = int(cfg.get("stages", 2))
    splits = cfg.get("splits")
    if isinstance(splits, str):
        splits = _parse_splits(splits)
    plan = multistage.StagePlan(T, splits, seed) if splits else multistage.StagePlan.default(T, seed)
    defaults = multistage.TrainConfig()
    train_cfg = multistage.TrainConfig(
        epochs=int(cfg.get("epochs", defaults.epochs)),
        learning_rate=float(cfg.get("learning_rate", defaults.learning_rate)),
        lr_schedule=str(cfg.get("lr_schedule", defaults.lr_schedule)),
        l2=float(cfg.get("l2", defaults.l2)),
        mixup_alpha=float(cfg.get("mixup_alpha", defaults.mixup_alpha)),
        temperature=float(cfg.get("temperature", defaults.temperature)),
        batch_size=int(cfg.get("batch_size", defaults.batch_size)),
    )
    feat_ids, X = fileio.read_matrix(args.features)
    label_ids, labels = fileio.read_labels(args.labels, cfg.get("classes"))
    K = int(cfg.get("classes") or labels.max() + 1)
    if K < 2:
        raise CliInputError("need at least 2 classes")
    order = fileio.align(feat_ids, label_ids, args.labels)
    labels = labels[order]
    test = None
    if args.test_features and args.test_labels:
        t_ids, Xt = fileio.read_matrix(args.test_features)
        tl_ids, yt = fileio.read_labels(args.test_labels, K)
        test = (Xt, yt[fileio.align(t_ids, tl_ids, args.test_labels)])

    model, report = multistage.lp_mst(
        X, labels, plan, cfg["eps"], train_cfg, K, ids=feat_ids,
        warm_start=_parse_bool(str(cfg.get("warm_start", "true"))),
        reuse=_parse_bool(str(cfg.get("reuse", "true"))),
        filter_k=cfg.get("filter_k"),
    )
    agreement = multistage.stage_agreement(report, labels) if args.diagnostics else None

    out = _out_dir(args)
    records = []
    for idx, (stage, rand, stage_model) in enumerate(zip(report.stages, report.randomized, report.models)):
        rec = {"type": "stage", **stage.as_dict()}
        rec["train_accuracy_randomized"] = stage_model.accuracy(X[rand.rows], rand.y_tilde) if rand.rows.size else None
        if test is not None:
            rec["test_accuracy"] = stage_model.accuracy(*test)
        if agreement is not None:
            rec["agreement"] = agreement[idx]
        records.append(rec)
    records.append({"type": "summary", "stages": T, "epsilon_spent": report.epsilon_spent,
                    "test_accuracy": model.accuracy(*test) if test is not None else None})
    fileio.write_jsonl(out / "report.jsonl", records)
    rows = []
    for rand in report.randomized:
        for example_id, yt, k in zip(rand.ids, rand.y_tilde, rand.k_star):
            rows.append([example_id, rand.stage, int(yt), int(k)])
    fileio.write_csv(out / "randomized_labels.csv", ["id", "stage", "label", "k_star"], rows)
    buf = _npz_bytes(weights=model.weights, bias=model.bias)
    fileio.atomic_write_bytes(out / "model.npz", buf)
    params = {k: v for k, v in cfg.items()}
    params["splits"] = list(plan.splits)
    params["stages"] = T
    manifest = _manifest("mst", params, seed, {
        "features": args.features, "labels": args.labels, "config": args.config,
        "test_features": args.test_features, "test_labels": args.test_labels,
    }, started)
    fileio.write_json(out / "manifest.json", manifest)
    for rec in records:
        print(rec)
    return EXIT_OK


def _npz_bytes(**arrays) -> bytes:
    import io

    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


# priors -------------------------------------------------------------------


def cmd_priors(args) -> int:
    started = time.time()
    seed = args.seed if args.seed is not None else _default_seed()
    feat_ids, X = fileio.read_matrix(args.features)
    label_ids, labels = fileio.read_labels(args.labels, args.classes)
    labels = labels[fileio.align(feat_ids, label_ids, args.labels)]
    K = args.classes or int(labels.max()) + 1
    if args.clusters > X.shape[0]:
        raise CliInputError(f"--clusters {args.clusters} exceeds number of examples {X.shape[0]}")
    P, spent, _ = priors.cluster_histogram_priors(
        X, labels, args.clusters, args.eps_prior, keyed_rng(seed, "priors"), num_classes=K
    )
    rows = [[i] + [fileio.format_float(v) for v in p] for i, p in zip(feat_ids, P)]
    out = Path(args.out)
    fileio.write_csv(out, ["id"] + [f"p{k}" for k in range(K)], rows)
    manifest = _manifest("priors", {"clusters": args.clusters, "eps_prior": args.eps_prior, "classes": K},
                         seed, {"features": args.features, "labels": args.labels}, started)
    manifest["epsilon_spent"] = spent.epsilon
    fileio.write_json(Path(str(out) + ".manifest.json"), manifest)
    print(f"wrote {len(rows)} priors to {out} (epsilon spent {spent.epsilon:g})")
    return EXIT_OK


# sco ----------------------------------------------------------------------


def _sco_problem(name: str, n: int, seed: int, args):
    if name == "lower-bound":
        problem, _ = sco.make_lower_bound_problem(max(n, 1), args.diameter, args.lipschitz,
                                                  keyed_rng(seed, "problem"))
        return problem, None, None
    if name == "softmax":
        problem = sco.make_softmax_problem(args.classes or 3, args.dim, D=args.diameter,
                                           rng=keyed_rng(0, "softmax-problem"))
        holdout = problem.sample(keyed_rng(0, "holdout"), args.holdout)
        reference = sco.reference_risk(problem, *holdout)
        return problem, holdout, reference
    raise CliInputError(f"unknown problem {name!r}")


def cmd_sco(args) -> int:
    base_seed = args.seed if args.seed is not None else _default_seed()
    seeds = list(range(base_seed, base_seed + args.seeds))
    header = ["seed", "n", "eps", "delta", "algorithm", "excess_risk", "wallclock", "diverged", "mean_noise_sq", "noise_bound"]
    rows = []
    diverged = 0
    for n in args.n:
        for seed in seeds:
            start = time.time()
            problem, holdout, reference = _sco_problem(args.problem, n, seed, args)
            rng = keyed_rng(seed, "sgd", n)
            noise_sq = bound = ""
            try:
                if args.algorithm == "rr-sgd":
                    run = sco.label_rr_sgd(problem, n, args.eps, rng)
                else:
                    run = sco.label_normal_sgd(problem, n, args.eps, args.delta, rng)
                    noise_sq = fileio.format_float(run.mean_noise_sq) if n else "0.0"
                    bound = fileio.format_float(problem.num_classes * run.sigma ** 2)
                risk = sco.excess_risk(problem, run.w, holdout, reference)
                flag = 0
            except TrainingDivergenceError:
                risk, flag = float("nan"), 1
                diverged += 1
            rows.append([seed, n, args.eps, args.delta if args.algorithm == "normal-sgd" else "",
                         args.algorithm, fileio.format_float(risk), f"{time.time() - start:.3f}", flag,
                         noise_sq, bound])
    fileio.write_csv(args.out, header, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    if rows and diverged == len(rows):
        return EXIT_RUNTIME
    return EXIT_OK


# parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="labelrand", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("randomize", help="randomize a label file")
    p.add_argument("--labels", required=True)
    p.add_argument("--priors")
    p.add_argument("--mechanism", choices=mechanisms.MECHANISMS, default=None)
    p.add_argument("--k", type=int)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_randomize)

    p = sub.add_parser("verify", help="run a verification suite")
    p.add_argument("suite", choices=sorted(verify.SUITES))
    p.add_argument("--mechanism", choices=mechanisms.MECHANISMS, default="classic")
    p.add_argument("--eps", type=float)
    p.add_argument("--claim-eps", type=float)
    p.add_argument("--classes", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--draws", type=int, default=1_000_000)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("mst", help="multi-stage label-private training")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--test-features")
    p.add_argument("--test-labels")
    p.add_argument("--config")
    p.add_argument("--eps", type=float)
    p.add_argument("--stages", type=int)
    p.add_argument("--splits", type=_parse_splits)
    p.add_argument("--temperature", type=float)
    p.add_argument("--mixup-alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--filter-k", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--diagnostics", action="store_true",
                   help="also report agreement of randomized and true labels (reads true labels again)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mst)

    p = sub.add_parser("priors", help="cluster-histogram priors from features")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--clusters", type=int, default=100)
    p.add_argument("--eps-prior", type=float, default=0.05)
    p.add_argument("--classes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_priors)

    p = sub.add_parser("sco", help="label-private SGD experiments")
    p.add_argument("--problem", choices=("lower-bound", "softmax"), default="lower-bound")
    p.add_argument("--n", type=int, nargs="+", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--algorithm", choices=("rr-sgd", "normal-sgd"), default="rr-sgd")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--diameter", type=float, default=1.0)
    p.add_argument("--lipschitz", type=float, default=1.0)
    p.add_argument("--holdout", type=int, default=2000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sco)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "randomize" and args.mechanism is None:
        args.mechanism = "with-prior" if args.priors else "classic"
    if args.command == "randomize" and args.mechanism == "top-k" and args.k is None:
        parser.error("--mechanism top-k needs --k")
    try:
        return args.func(args)
    except (CliInputError, InputDomainError, ParameterError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (PrivacyLedgerError, TrainingDivergenceError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
