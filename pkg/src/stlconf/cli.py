"""Command-line entry point: synth, mine, fit, fit-hyper, predict, evaluate, analyze.

Exit status is 0 on success, 2 for usage and file-system problems and 3 for
invalid data or models. Every file written embeds the seed and a hash of the
effective non-path options, so two runs with the same options produce the
same bytes wherever they are run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import estimator, hyper, metrics, miner, synth
from .errors import StlConfError
from .patterns import PatternSet
from .trace import SignalBatch, labels_of, load_dataset, save_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3
PATH_ARGS = {"train", "data", "patterns", "hyper", "out", "preds", "bins_csv", "config", "inputs", "model"}


class UsageError(Exception):
    pass


def config_hash(args: argparse.Namespace) -> str:
    opts = {k: v for k, v in sorted(vars(args).items()) if k not in PATH_ARGS and k != "func"}
    return hashlib.sha256(json.dumps(opts, sort_keys=True).encode()).hexdigest()[:16]


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _write(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _stamp(ps: PatternSet, args) -> PatternSet:
    from dataclasses import replace

    prov = dict(ps.provenance, run_config_hash=config_hash(args), seed=args.seed)
    return replace(ps, provenance=prov)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    data = synth.generate(args.scenario, args.n, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(data, out)
    doc = synth.oracle_document(args.scenario, args.n, args.seed, data)
    doc["config_hash"] = config_hash(args)
    _write(out.with_suffix(".oracle.json"), synth.dumps_oracle(doc))
    print(f"wrote {len(data)} instances to {out}")
    return EXIT_OK


def _mine_one(data, args) -> PatternSet:
    cfg = miner.MineConfig(n_pos=args.n_pos, n_neg=args.n_neg, K=args.K, seed=args.seed,
                           val_fraction=args.val_fraction, max_evals=args.max_evals)
    ps = miner.mine(data, cfg)
    if not args.no_fit:
        ps = estimator.fit_mapping(ps, data, lr=args.lr, epochs=args.epochs, seed=args.seed)
    return _stamp(ps, args)


def fold_indices(n: int, folds: int, seed: int):
    """Seeded shuffle cut into ``folds`` contiguous blocks."""
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(b) for b in np.array_split(perm, folds)]


def cmd_mine(args) -> int:
    if args.n_pos < 0 or args.n_neg < 0 or args.n_pos + args.n_neg == 0:
        raise UsageError("--n-pos and --n-neg must be >= 0 and not both 0")
    if args.K < 1 or args.folds < 1 or not 0.0 <= args.val_fraction < 1.0:
        raise UsageError("--K >= 1, --folds >= 1 and 0 <= --val-fraction < 1 required")
    data = load_dataset(args.train)
    out = Path(args.out)
    if args.folds == 1:
        ps = _mine_one(data, args)
        ps.save(out)
        print(f"mined {len(ps.pos)}+{len(ps.neg)} patterns; validation NLL {ps.provenance['val_nll']:.6f}")
        return EXIT_OK
    blocks = fold_indices(len(data), args.folds, args.seed)
    losses = []
    stem = out.name[: -len(out.suffix)] if out.suffix else out.name
    for k, held in enumerate(blocks):
        keep = np.setdiff1d(np.arange(len(data)), held)
        ps = _mine_one([data[i] for i in keep], args)
        test = [data[i] for i in held]
        P, _, _ = estimator.predict(ps, test)
        loss = estimator.binary_nll(P, labels_of(test))
        losses.append(loss)
        ps.save(out.with_name(f"{stem}.fold{k}.json"))
        print(f"fold {k}: held-out NLL {loss:.6f}")
    summary = {
        "folds": args.folds,
        "fold_val_nll": losses,
        "mean": float(np.mean(losses)),
        "std": float(np.std(losses)),
        "seed": args.seed,
        "config_hash": config_hash(args),
    }
    _write(out.with_name(f"{stem}.summary.json"), _dump(summary))
    print(f"held-out NLL {summary['mean']:.6f} +- {summary['std']:.6f}")
    return EXIT_OK


def cmd_fit(args) -> int:
    data = load_dataset(args.data)
    ps = PatternSet.load(args.patterns)
    tau = None if args.semantics == "hard" else float(args.semantics)
    fitted = estimator.fit_mapping(ps, data, lr=args.lr, epochs=args.epochs, seed=args.seed, tau=tau)
    _stamp(fitted, args).save(args.out)
    print(f"mapping NLL {fitted.provenance['mapping']['final_nll']:.6f}")
    return EXIT_OK


def cmd_fit_hyper(args) -> int:
    data = load_dataset(args.train)
    ps = PatternSet.load(args.patterns)
    model = hyper.train_hyper(ps, data, lr=args.lr, epochs=args.epochs, batch=args.batch, seed=args.seed,
                              hidden=args.hidden, init=args.init, weight_decay=args.weight_decay)
    model.config.update({"config_hash": config_hash(args), "seed": args.seed})
    model.save(args.out)
    print(f"final train NLL {min(model.history):.6f}")
    return EXIT_OK


def _semantics(text):
    if text == "hard":
        return "hard"
    try:
        tau = float(text)
    except ValueError:
        raise UsageError("--semantics must be 'hard' or a positive temperature") from None
    if tau <= 0:
        raise UsageError("--semantics temperature must be positive")
    return tau


def cmd_predict(args) -> int:
    data = load_dataset(args.data)
    semantics = _semantics(args.semantics)
    h = config_hash(args)
    lines = []
    if args.baseline == "avelogit":
        for inst in data:
            lines.append({"id": inst.id, "label": inst.label, "p": estimator.ave_logit_baseline(inst),
                          "config_hash": h, "seed": args.seed})
    else:
        if args.patterns is None:
            raise UsageError("--patterns is required unless --baseline is given")
        ps = PatternSet.load(args.patterns)
        if args.hyper:
            model = hyper.HyperModel.load(args.hyper)
            P_hat, rho, P = hyper.predict_with_hyper(model, ps, data, semantics)
        else:
            P_hat, rho, P = estimator.predict(ps, SignalBatch.from_instances(data), semantics)
        for i, inst in enumerate(data):
            blocks = [{"name": p.name, "polarity": p.polarity, "rho": float(rho[i, k]), "p": float(P[i, k])}
                      for k, p in enumerate(ps.patterns)]
            lines.append({"id": inst.id, "label": inst.label, "p": float(P_hat[i]), "per_block": blocks,
                          "config_hash": h, "seed": args.seed})
    _write(args.out, "".join(json.dumps(x, sort_keys=True) + "\n" for x in lines))
    print(f"wrote {len(lines)} predictions to {args.out}")
    return EXIT_OK


def _load_predictions(path):
    preds, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                preds.append(float(rec["p"]))
                labels.append(int(rec["label"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                from .errors import SchemaError

                raise SchemaError(f"bad prediction record: {exc}", n) from exc
    return preds, labels


def cmd_evaluate(args) -> int:
    preds, labels = _load_predictions(args.preds)
    rep = metrics.report(preds, labels, args.bins)
    rep.extra.update({"config_hash": config_hash(args), "seed": args.seed})
    auc = "n/a" if rep.auroc is None else f"{rep.auroc:.6f}"
    print(f"ECE {rep.ece:.6f}  Brier {rep.brier:.6f}  AUROC {auc}")
    _write(args.out, _dump(rep.to_dict()))
    if args.bins_csv:
        metrics.write_bins_csv(rep.bins, args.bins_csv)
    return EXIT_OK


def _load_json(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            from .errors import SchemaError

            raise SchemaError(f"{path}: not valid JSON ({exc.msg})") from exc


def _param_vector(path):
    d = _load_json(path)
    if isinstance(d, dict) and ("pos" in d or "neg" in d):
        return miner.flatten_params(PatternSet.from_dict(d))
    if not isinstance(d, dict):
        from .errors import SchemaError

        raise SchemaError(f"{path}: expected a pattern set or a parameter object")
    return {k: float(v) for k, v in d.items()}


def cmd_analyze(args) -> int:
    if args.kind == "jaccard":
        if len(args.inputs) != 2:
            raise UsageError("analyze jaccard takes exactly two pattern-set files")
        a, b = (PatternSet.load(p) for p in args.inputs)
        result = {"jaccard": miner.jaccard_similarity(a, b, args.polarity), "polarity": args.polarity}
        value = result["jaccard"]
    else:
        if args.model:
            if args.patterns is None or args.data is None:
                raise UsageError("model mode needs --model, --patterns and --data")
            vectors = _per_question_vectors(args)
        else:
            vectors = [_param_vector(p) for p in args.inputs]
        value = miner.param_variability(vectors, args.grouping)
        result = {"param_mae": value, "grouping": args.grouping, "n_vectors": len(vectors)}
    result.update({"config_hash": config_hash(args), "seed": args.seed})
    print(repr(float(value)))
    if args.out:
        _write(args.out, _dump(result))
    return EXIT_OK


def _per_question_vectors(args):
    """One predicted parameter vector per distinct question (its first instance)."""
    data = load_dataset(args.data)
    ps = PatternSet.load(args.patterns)
    model = hyper.HyperModel.load(args.model)
    seen, firsts = set(), []
    for inst in data:
        if inst.question not in seen:
            seen.add(inst.question)
            firsts.append(inst)
    params = hyper.predict_params(model, ps, firsts)
    vectors = []
    for i in range(len(firsts)):
        vec = {}
        for k, block in enumerate(params):
            for name, v in block.items():
                if name not in ("alpha", "beta"):
                    vec[f"b{k}.{name}"] = float(v[i])
        vectors.append(vec)
    return vectors


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stlconf", description="STL-based confidence estimation from stepwise signals.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="JSON file whose keys override command-line options")
        p.add_argument("--out", required=out_required)

    p = sub.add_parser("synth", help="generate a synthetic dataset and its oracle sidecar")
    p.add_argument("--scenario", choices=synth.SCENARIOS, required=True)
    p.add_argument("--n", type=int, default=400)
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mine", help="mine a pattern set from a training dataset")
    p.add_argument("--train", required=True)
    p.add_argument("--n-pos", type=int, default=5)
    p.add_argument("--n-neg", type=int, default=5)
    p.add_argument("--K", type=int, default=8)
    p.add_argument("--folds", type=int, default=1)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--max-evals", type=int, default=200)
    p.add_argument("--no-fit", action="store_true", help="skip the joint refit of block mappings and weights")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=500)
    common(p)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("fit", help="refit block mappings and aggregation weights")
    p.add_argument("--data", required=True)
    p.add_argument("--patterns", required=True)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--semantics", default="20")
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("fit-hyper", help="train the parameter hypernetwork")
    p.add_argument("--train", required=True)
    p.add_argument("--patterns", required=True)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--init", choices=("fitted", "midpoint"), default="fitted")
    p.add_argument("--weight-decay", type=float, default=1e-3)
    common(p)
    p.set_defaults(func=cmd_fit_hyper)

    p = sub.add_parser("predict", help="write per-instance predictions as JSONL")
    p.add_argument("--data", required=True)
    p.add_argument("--patterns")
    p.add_argument("--hyper")
    p.add_argument("--semantics", default="hard", help="'hard' or a soft temperature")
    p.add_argument("--baseline", choices=("avelogit",))
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="calibration report for a predictions file")
    p.add_argument("--preds", required=True)
    p.add_argument("--bins", type=int, default=metrics.DEFAULT_BINS)
    p.add_argument("--bins-csv")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="Jaccard similarity or parameter variability")
    p.add_argument("kind", choices=("jaccard", "param-mae"))
    p.add_argument("inputs", nargs="*")
    p.add_argument("--polarity", choices=("pos", "neg"), default="neg")
    p.add_argument("--grouping", choices=("time", "threshold", "difference"), default="threshold")
    p.add_argument("--model")
    p.add_argument("--patterns")
    p.add_argument("--data")
    common(p, out_required=False)
    p.set_defaults(func=cmd_analyze)
    return parser


def _apply_config(args, parser) -> None:
    if not args.config:
        return
    with open(args.config, encoding="utf-8") as fh:
        try:
            overrides = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc.msg}") from None
    if not isinstance(overrides, dict):
        raise UsageError("config file must hold a JSON object")
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if attr in ("func", "command", "config") or not hasattr(args, attr):
            raise UsageError(f"unknown option {key!r} in config file")
        setattr(args, attr, value)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        _apply_config(args, parser)
        return args.func(args)
    except UsageError as exc:
        print(f"stlconf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"stlconf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StlConfError as exc:
        print(f"stlconf: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"stlconf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
