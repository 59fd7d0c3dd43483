"""Command-line front end tying the toolkit into reproducible runs.

Every command takes one ``--seed``; all stage randomness (data synthesis,
weight init, shuffling, attack starts, permutations) is derived from it
through named substreams, so a rerun with the same flags reproduces every
artifact byte for byte.  Flags may also come from a JSON file via
``--run-config``; explicit flags override file values and unknown file
keys are rejected.

Budgets (``--eps``, ``--alpha``) are quoted on the 0-255 integer pixel
scale and divided by 255 internally, for every norm.

Exit codes: 0 success, 1 precondition violation, 2 I/O error, 64 unknown
command.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import attacks, baselines, checkpoint, data, evaluate, models
from . import detector as det
from .seeds import derive_seed

PROG = "lrdetect"

_IDX_PREFIX = {"train": "train", "test": "t10k"}


class _ArgError(Exception):
    """Argument parsing failed (flag level, before any pipeline runs)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2)
        raise _ArgError(message)


def _jsonable(value):
    """Recursively convert numpy containers/scalars for json.dumps."""
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, (np.integer, np.bool_)):
        return value.item()
    return value


def _emit(command: str, config: dict, result: dict) -> None:
    doc = {"command": command, "config": _jsonable(config), **_jsonable(result)}
    json.dump(doc, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


class _Command:
    """A subcommand plus its full default table (for config-file merging)."""

    def __init__(self, parser: argparse.ArgumentParser, run):
        self.parser = parser
        self.run = run
        self.defaults = {}
        self.required = []

    def arg(self, *flags, default=None, required=False, **kwargs):
        action = self.parser.add_argument(*flags, **kwargs)
        self.defaults[action.dest] = default
        if required:
            self.required.append(action.dest)


def _add_common(cmd: _Command) -> None:
    cmd.arg("--seed", type=int, default=0, help="master seed; every stage derives from it")
    cmd.arg("--threads", type=int, default=1,
            help="worker cap; the reference pipelines are single-threaded")
    cmd.arg("--run-config", default=None, metavar="FILE",
            help="JSON file of flag defaults; explicit flags override")


def _add_data(cmd: _Command) -> None:
    cmd.arg("--data", default=None, metavar="DIR",
            help="IDX dataset directory (default: $LR_DATA_DIR); falls back to --synthetic")
    cmd.arg("--split", choices=("train", "test"), default="test",
            help="which IDX file pair to read from --data")
    cmd.arg("--synthetic", type=int, default=None, metavar="N",
            help="synthesize N samples instead of reading --data")


def _add_attack(cmd: _Command, kinds=("fgsm", "bim", "pgd", "apgd_s")) -> None:
    cmd.arg("--attack", choices=kinds, default="pgd")
    cmd.arg("--eps", type=float, default=8.0, help="budget in 0-255 pixel levels")
    cmd.arg("--alpha", type=float, default=None, help="step size in 0-255 pixel levels")
    cmd.arg("--steps", type=int, default=10)
    cmd.arg("--norm", choices=("linf", "l2"), default="linf")
    cmd.arg("--targeted", action="store_true", default=False)
    cmd.arg("--target-class", type=int, default=None,
            help="fixed target class; default draws a random wrong class per sample")
    cmd.arg("--no-random-start", dest="random_start", action="store_false", default=True)
    cmd.arg("--n", type=int, default=1500, help="how many samples to draw from the data source")


def _load_source(args, purpose: str, count: int | None = None):
    """Labeled samples from the IDX directory or the synthesizer.

    purpose names the synthetic substream so different pipeline stages
    never reuse the same draw.
    """
    root = args.data or os.environ.get("LR_DATA_DIR")
    if root:
        prefix = _IDX_PREFIX[args.split]
        x, y = data.load_idx_dataset(
            os.path.join(root, f"{prefix}-images-idx3-ubyte"),
            os.path.join(root, f"{prefix}-labels-idx1-ubyte"),
        )
        if count is not None:
            x, y = x[:count], y[:count]
        return x, y
    if args.synthetic is None:
        raise ValueError(
            "no data source: pass --data DIR, set LR_DATA_DIR, or pass --synthetic N"
        )
    n = args.synthetic if count is None else min(args.synthetic, count)
    return data.make_dataset(n, derive_seed(args.seed, "data", purpose))


def _attack_config(args, labels=None, kind=None, lam=0.0) -> attacks.AttackConfig:
    target = None
    if args.targeted:
        if args.target_class is not None:
            target = args.target_class
        elif labels is not None:
            target = evaluate.random_targets(labels, 10, args.seed)
        else:
            raise ValueError("targeted attack needs --target-class or labeled data")
    return attacks.AttackConfig(
        kind=kind or args.attack,
        epsilon=args.eps / 255.0,
        step_size=None if args.alpha is None else args.alpha / 255.0,
        steps=args.steps,
        norm=args.norm,
        targeted=args.targeted,
        target=target,
        random_start=args.random_start,
        lam=lam,
        seed=args.seed,
    )


def _parse_transforms(text: str) -> tuple:
    """Parse 'bit_reduce:4,median_smooth:3' into TransformSpecs."""
    specs = []
    if not text:
        return ()
    for part in text.split(","):
        name, _, param = part.strip().partition(":")
        if name == "bit_reduce":
            specs.append(baselines.TransformSpec("bit_reduce", bits=int(param or 4)))
        elif name == "median_smooth":
            specs.append(baselines.TransformSpec("median_smooth", window=int(param or 3)))
        else:
            raise ValueError(f"unknown baseline transform {name!r}")
    return tuple(specs)


def _load_model(path) -> models.Classifier:
    artifact = checkpoint.load_checkpoint(path)
    if not isinstance(artifact, models.Classifier):
        raise ValueError(f"{path} holds a {type(artifact).__name__}, expected a classifier")
    return artifact


def _load_detector(path) -> det.Detector:
    artifact = checkpoint.load_checkpoint(path)
    if not isinstance(artifact, det.Detector):
        raise ValueError(f"{path} holds a {type(artifact).__name__}, expected a detector")
    return artifact


def _sets_from_batch(path) -> evaluate.EvalSets:
    """EvalSets from a stored adversarial batch.

    The stored predictions are for x_adv; samples whose prediction moved
    off the label count as successes, matching untargeted evaluation.
    """
    x, x_adv, labels, preds = checkpoint.load_adversarial(path)
    success = preds != labels
    if not success.any():
        raise ValueError(f"{path}: no successful attacks in batch")
    return evaluate.EvalSets(
        clean_x=x, clean_y=labels, adv_x=x_adv[success], adv_y=labels[success],
        success_mask=success, n_test=len(x), n_correct=len(x),
        success_rate=float(success.mean()),
    )


def _build_sets(args, model, detector=None, kind=None, lam=0.0, order_mode="resample"):
    x, y = _load_source(args, "eval-data", args.n)
    cfg = _attack_config(args, labels=y, kind=kind, lam=lam)
    return evaluate.build_eval_sets(model, cfg, x, y,
                                    detector=detector, order_mode=order_mode)


def _report_dict(report: evaluate.EvalReport) -> dict:
    doc = asdict(report)
    doc.pop("config", None)
    return doc


# ---------------------------------------------------------------- commands


def _run_train_model(args, config):
    mcfg = models.ModelConfig(arch=args.arch)
    model = models.Classifier.build(mcfg, seed=args.seed)
    args.split = "train"
    x, y = _load_source(args, "train-data")
    args.split = "test"
    if args.data or os.environ.get("LR_DATA_DIR"):
        xv, yv = _load_source(args, "eval-data")
    else:
        xv, yv = data.make_dataset(2000, derive_seed(args.seed, "data", "eval-data"))
    tcfg = models.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                              lr=args.lr, momentum=args.momentum, seed=args.seed)
    log = models.train_classifier(model, x, y, tcfg)
    acc = models.accuracy(model, xv, yv)
    checkpoint.save_checkpoint(args.out, model)
    _emit("train-model", config, {
        "out": args.out, "train_samples": len(x), "accuracy": acc,
        "final_train_loss": log["epochs"][-1]["loss"],
    })
    return 0


def _run_gen_adv(args, config):
    model = _load_model(args.model)
    x, y = _load_source(args, "eval-data", args.n)
    cfg = _attack_config(args, labels=y)
    result = evaluate.run_attack(model, x, y, cfg)
    preds = models.predict(model, result.x_adv)
    checkpoint.save_adversarial(args.out, x, result.x_adv, y, preds)
    _emit("gen-adv", config, {
        "out": args.out, "n": len(x), "success_rate": float(result.success.mean()),
    })
    return 0


def _run_train_detector(args, config):
    model = _load_model(args.model)
    x, _ = _load_source(args, "detector-data")
    spec = det.make_tap_spec(model, m=args.m, fraction=args.fraction,
                             order_policy=args.order_policy,
                             order_seed=derive_seed(args.seed, "order"),
                             seed=args.seed)
    hyper = det.RegressorTrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                                     lr=args.lr, input_dropout=args.dropout,
                                     hidden=args.hidden, seed=args.seed)
    detector = det.train_regressor(model, spec, x, hyper)
    checkpoint.save_checkpoint(args.out, detector)
    _emit("train-detector", config, {
        "out": args.out, "train_samples": len(x),
        "tap_layers": list(spec.layer_indices),
        "slice_bounds": [list(b) for b in spec.slice_bounds],
        "input_dim": spec.input_dim,
    })
    return 0


def _run_eval(args, config):
    model = _load_model(args.model)
    detector = _load_detector(args.detector)
    if args.adv:
        sets = _sets_from_batch(args.adv)
    else:
        sets = _build_sets(args, model)
    report = evaluate.evaluate_detector(model, detector, sets,
                                        with_conjecture=args.with_conjecture)
    doc = _report_dict(report)
    for tf in _parse_transforms(args.baselines):
        doc[f"auroc_{tf.kind}"] = evaluate.baseline_auroc(model, tf, sets)
    _emit("eval", config, doc)
    return 0


def _run_sweep_eps(args, config):
    model = _load_model(args.model)
    detector = _load_detector(args.detector)
    x, y = _load_source(args, "eval-data", args.n)
    eps_list = [float(e) / 255.0 for e in args.eps_list.split(",")]
    rows = evaluate.epsilon_sweep(model, detector, x, y, eps_list,
                                  attack_kind=args.attack, seed=args.seed,
                                  transforms=_parse_transforms(args.baselines))
    aurocs = [r["auroc"] for r in rows]
    summary = {"rows": rows, "auroc_range": max(aurocs) - min(aurocs)}
    for tf in _parse_transforms(args.baselines):
        vals = [r[f"auroc_{tf.kind}"] for r in rows]
        summary[f"auroc_range_{tf.kind}"] = max(vals) - min(vals)
    _emit("sweep-eps", config, summary)
    return 0


def _run_bench(args, config):
    model = _load_model(args.model)
    detector = _load_detector(args.detector)
    x, _ = _load_source(args, "eval-data", args.n)
    scorers = {
        "forward": lambda s: models.predict(model, s),
        "lr": lambda s: det.score(detector, model, s),
    }
    for tf in _parse_transforms(args.baselines):
        scorers[tf.kind] = lambda s, tf=tf: baselines.mismatch_score(model, s, tf)
    out = {name: evaluate.timing_bench(fn, x, repetitions=args.repetitions)
           for name, fn in scorers.items()}
    doc = {f"pts_{name}": r["pts_mean"] for name, r in out.items()}
    doc["detail"] = out
    doc["lr_over_forward"] = doc["pts_lr"] / doc["pts_forward"]
    _emit("bench", config, doc)
    return 0


def _run_stats(args, config):
    model = _load_model(args.model)
    detector = _load_detector(args.detector)
    if args.adv:
        sets = _sets_from_batch(args.adv)
    else:
        sets = _build_sets(args, model)
    stats = det.conjecture_stats(detector, model,
                                 sets.clean_x[sets.success_mask], sets.adv_x)
    spread = None
    if detector.tap_spec.order_policy == "randomized":
        spread = det.permutation_spread(detector, model, sets.clean_x[:200],
                                        seed=args.seed)
    _emit("stats", config, {
        "success_rate": sets.success_rate, "conjecture": stats,
        "permutation_spread": spread,
    })
    return 0


def _run_adaptive_eval(args, config):
    model = _load_model(args.model)
    detector = _load_detector(args.detector)
    sets = _build_sets(args, model, detector=detector, kind="adaptive_pgd",
                       lam=args.lam, order_mode=args.order_mode)
    report = evaluate.evaluate_detector(model, detector, sets)
    _emit("adaptive-eval", config, _report_dict(report))
    return 0


# ------------------------------------------------------------- dispatcher


def _build_commands():
    root = _Parser(prog=PROG, description=__doc__,
                   formatter_class=argparse.RawDescriptionHelpFormatter)
    subs = root.add_subparsers(dest="command")
    table = {}

    def command(name, run, help_text):
        parser = subs.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS,
                                 prog=f"{PROG} {name}")
        parser.error = root.error  # type: ignore[method-assign]
        cmd = _Command(parser, run)
        _add_common(cmd)
        table[name] = cmd
        return cmd

    c = command("train-model", _run_train_model, "train a classifier and save a checkpoint")
    c.arg("--arch", choices=models.ARCHITECTURES, required=True)
    c.arg("--out", required=True)
    _add_data(c)
    c.arg("--epochs", type=int, default=3)
    c.arg("--batch-size", type=int, default=64)
    c.arg("--lr", type=float, default=0.05)
    c.arg("--momentum", type=float, default=0.9)

    c = command("gen-adv", _run_gen_adv, "attack a sample set and save the batch")
    c.arg("--model", required=True)
    c.arg("--out", required=True)
    _add_data(c)
    _add_attack(c)

    c = command("train-detector", _run_train_detector,
                "fit the layer-regression detector to a frozen classifier")
    c.arg("--model", required=True)
    c.arg("--out", required=True)
    _add_data(c)
    c.arg("--order-policy", choices=("fixed", "randomized"), default="fixed")
    c.arg("--m", type=int, default=3, help="number of tapped layers")
    c.arg("--fraction", type=float, default=0.6, help="middle slice fraction per layer")
    c.arg("--epochs", type=int, default=120)
    c.arg("--batch-size", type=int, default=128)
    c.arg("--lr", type=float, default=3e-4)
    c.arg("--dropout", type=float, default=0.6)
    c.arg("--hidden", type=int, default=None, help="regressor hidden width override")

    c = command("eval", _run_eval, "attack, score, and report detector AUROC")
    c.arg("--model", required=True)
    c.arg("--detector", required=True)
    c.arg("--adv", default=None, help="stored adversarial batch instead of attacking")
    _add_data(c)
    _add_attack(c)
    c.arg("--baselines", default="", help="e.g. bit_reduce:4,median_smooth:3")
    c.arg("--with-conjecture", action="store_true", default=False)

    c = command("sweep-eps", _run_sweep_eps, "detector AUROC across attack budgets")
    c.arg("--model", required=True)
    c.arg("--detector", required=True)
    _add_data(c)
    c.arg("--attack", choices=("fgsm", "bim", "pgd", "apgd_s"), default="pgd")
    c.arg("--eps-list", default="4,8,16,32,64,128", help="0-255 pixel levels, comma separated")
    c.arg("--n", type=int, default=1500)
    c.arg("--baselines", default="bit_reduce:4,median_smooth:3")

    c = command("bench", _run_bench, "per-sample scoring time for detector and baselines")
    c.arg("--model", required=True)
    c.arg("--detector", required=True)
    _add_data(c)
    c.arg("--n", type=int, default=1000)
    c.arg("--repetitions", type=int, default=3)
    c.arg("--baselines", default="median_smooth:3")

    c = command("stats", _run_stats, "layer-change and regression-error statistics")
    c.arg("--model", required=True)
    c.arg("--detector", required=True)
    c.arg("--adv", default=None, help="stored adversarial batch instead of attacking")
    _add_data(c)
    _add_attack(c)

    c = command("adaptive-eval", _run_adaptive_eval,
                "detector-aware attack, then detector AUROC against it")
    c.arg("--model", required=True)
    c.arg("--detector", required=True)
    _add_data(c)
    _add_attack(c, kinds=("pgd",))
    c.arg("--lam", type=float, default=1.0,
          help="detector-score weight, in units of the batch's mean clean score")
    c.arg("--order-mode", choices=("resample", "fixed"), default="resample",
          help="how the attack treats randomized segment order")

    return root, table


def _merge_config(cmd: _Command, namespace: argparse.Namespace) -> dict:
    explicit = dict(vars(namespace))
    explicit.pop("command", None)
    merged = dict(cmd.defaults)
    path = explicit.get("run_config", cmd.defaults.get("run_config"))
    if path:
        with open(path, "r", encoding="utf-8") as f:
            try:
                file_values = json.load(f)
            except json.JSONDecodeError as exc:
                raise ValueError(f"bad JSON in {path}: {exc}") from exc
        if not isinstance(file_values, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        unknown = set(file_values) - set(merged)
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        merged.update(file_values)
    merged.update(explicit)
    missing = [d for d in cmd.required if merged.get(d) is None]
    if missing:
        flags = ", ".join("--" + d.replace("_", "-") for d in missing)
        raise ValueError(f"missing required arguments: {flags}")
    if merged.get("threads") is not None and merged["threads"] < 1:
        raise ValueError("--threads must be >= 1")
    return merged


def dispatch(argv) -> int:
    """Run one command line; returns the process exit code."""
    argv = list(argv)
    root, table = _build_commands()
    if not argv:
        root.print_usage(sys.stderr)
        return 64
    if argv[0] not in table and argv[0] not in ("-h", "--help"):
        sys.stderr.write(f"{PROG}: unknown command {argv[0]!r}\n")
        root.print_usage(sys.stderr)
        return 64
    try:
        namespace = root.parse_args(argv)
    except SystemExit as exc:  # -h/--help paths
        return int(exc.code or 0)
    except _ArgError as exc:
        sys.stderr.write(f"{PROG}: {exc}\n")
        return 1
    cmd = table[argv[0]]
    try:
        merged = _merge_config(cmd, namespace)
        args = argparse.Namespace(**merged)
        return cmd.run(args, merged)
    except (ValueError, TypeError, RuntimeError) as exc:
        sys.stderr.write(f"{PROG}: {exc}\n")
        return 1
    except OSError as exc:
        sys.stderr.write(f"{PROG}: {exc}\n")
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
