"""Command-line entry point: ``slseg <command> ...``.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 format/version, 5 numerical failure.
Failures print one line to stderr: ``slseg: error code=N kind=K msg="..."``.
"""
import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .data import (
    SyntheticTaskSpec,
    generate_dataset,
    load_dataset,
    read_pgm,
    save_dataset,
    stack_samples,
    to_gray,
    write_label_map,
    write_pgm,
)
from .errors import FormatError, NumericalError
from .evaluation import (
    CAMVID_GRID,
    TVUS_GRID,
    make_metric,
    pixel_rejection_curve,
    random_rejection_baseline,
    vanilla_ensemble_predict,
)
from .net import NetConfig, StochasticSegNet, count_parameters, count_submodels, load_checkpoint, save_checkpoint
from .training import SGD, TrainConfig, parse_config, split_config, train, train_stage1, train_stage2
from .uncertainty import (
    DEFAULT_SAMPLES,
    UncertaintyMap,
    mc_predict,
    normalize_uncertainty,
    uncertainty_from_stack,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4, 5
SWEEP_DEFAULT = (1, 2, 5, 10, 25, 50)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(code, kind, msg):
    msg = str(msg).replace("\n", " ").replace('"', "'")
    print(f'slseg: error code={code} kind={kind} msg="{msg}"', file=sys.stderr)
    return code


# ----------------------------------------------------------------- helpers


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _write_manifest(out_dir, command, config, seed, inputs, outputs, started):
    manifest = {
        "command": command,
        "config_hash": _config_hash(config),
        "config": config,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "wall_time": round(time.perf_counter() - started, 3),
    }
    path = os.path.join(out_dir, f"{command}.manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


def _require_dir(path, what):
    if not os.path.isdir(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def _require_file(path, what):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def _resolve_configs(args):
    """Defaults < config file < --set overrides < explicit flags."""
    values = {}
    if args.config:
        _require_file(args.config, "config file")
        with open(args.config) as fh:
            try:
                values.update(parse_config(fh.read()))
            except ValueError as exc:
                raise FormatError(f"{args.config}: {exc}") from None
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    flag_map = {"seed": args.seed, "stage1_steps": args.stage1_steps, "stage2_steps": args.stage2_steps,
                "lr": args.lr, "bank_size": args.bank_size}
    for k, v in flag_map.items():
        if v is not None:
            values[k] = str(v)
    try:
        net_kw, train_kw = split_config(values, NetConfig(), TrainConfig())
        tcfg = TrainConfig(**train_kw)
        net_kw.setdefault("seed", tcfg.seed)
        return net_kw, tcfg
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad configuration: {exc}") from None


def _load_split(dataset, test_dataset, test_fraction=0.25):
    _require_dir(dataset, "dataset")
    samples, classes = load_dataset(dataset)
    if test_dataset:
        _require_dir(test_dataset, "test dataset")
        test, test_classes = load_dataset(test_dataset)
        if test_classes != classes:
            raise FormatError("train and test datasets disagree on class count")
        return samples, test, classes
    n_test = max(1, int(round(len(samples) * test_fraction)))
    if n_test >= len(samples):
        raise FormatError("dataset too small to split into train and test")
    return samples[:-n_test], samples[-n_test:], classes


def _metric_name_ok(name):
    if name not in ("miou", "dice", "jaccard", "accuracy"):
        raise UsageError(f"unknown metric {name!r}")
    return name


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    started = time.perf_counter()
    spec = SyntheticTaskSpec(height=args.height, width=args.width, class_count=args.classes,
                             shape_density=args.density, noise=args.noise, band_width=args.band_width,
                             band_noise=args.band_noise, band_separation=args.band_separation, seed=args.seed)
    samples = generate_dataset(spec, args.n)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(args.out, samples, spec.class_count)
    cfg = dict(dataclasses.asdict(spec), n=args.n)
    _write_manifest(args.out, "gen-data", cfg, args.seed, [], ["images/", "labels/", "ambiguity/", "manifest.txt"],
                    started)


def cmd_train(args):
    started = time.perf_counter()
    _require_dir(args.dataset, "dataset")
    net_kw, tcfg = _resolve_configs(args)
    samples, classes = load_dataset(args.dataset)
    net_kw.setdefault("num_classes", classes)
    if net_kw["num_classes"] < classes:
        raise FormatError(f"num_classes={net_kw['num_classes']} but the dataset has {classes} classes")
    ncfg = NetConfig(**net_kw)
    X, Y, _ = stack_samples(samples)
    net = StochasticSegNet(ncfg)
    os.makedirs(args.out, exist_ok=True)
    outputs = []

    def ckpt(n, step):
        path = os.path.join(args.out, f"ckpt_{step:06d}.slsn")
        save_checkpoint(n, path, meta={"step": step})
        outputs.append(os.path.basename(path))

    stage1_path = os.path.join(args.out, "stage1.slsn") if args.save_stage1 else None
    log = _train_two_stage(net, X, Y, tcfg, stage1_path, ckpt if tcfg.checkpoint_every else None)
    model = os.path.join(args.out, "model.slsn")
    save_checkpoint(net, model, meta={"step": tcfg.stage1_steps + tcfg.stage2_steps})
    log_path = os.path.join(args.out, "train_log.csv")
    log.to_csv(log_path)
    outputs += ["model.slsn", "train_log.csv"] + (["stage1.slsn"] if args.save_stage1 else [])
    config = {"net": ncfg.to_dict(), "train": dataclasses.asdict(tcfg)}
    _write_manifest(args.out, "train", config, tcfg.seed, [args.dataset] + ([args.config] if args.config else []),
                    sorted(outputs), started)


def _train_two_stage(net, X, Y, tcfg, stage1_path, checkpoint_fn):
    # same schedule as training.train, with an optional stage-1 snapshot
    opt = SGD(tcfg.lr, tcfg.momentum)
    log = train_stage1(net, X, Y, tcfg, optimizer=opt, checkpoint_fn=checkpoint_fn)
    if stage1_path:
        save_checkpoint(net, stage1_path, meta={"step": tcfg.stage1_steps})
    if tcfg.stage2_steps > 0:
        opt.lr = tcfg.lr * tcfg.stage2_lr_scale
        log.extend(train_stage2(net, X, Y, tcfg, optimizer=opt, checkpoint_fn=checkpoint_fn))
    return log


def _predict_one(net, image, T, kind, rng):
    x = image[None].astype(net.parameters()[0].dtype)
    mean, stack = mc_predict(net, x, T, rng)
    if kind == "variance" and T < 2:
        raw = np.zeros(mean.shape[:1] + mean.shape[2:])
    else:
        raw = uncertainty_from_stack(stack, kind).values
    norm = normalize_uncertainty(UncertaintyMap(raw, kind)).values
    return mean.argmax(axis=1)[0], raw[0], norm[0]


def cmd_predict(args):
    started = time.perf_counter()
    if (args.image is None) == (args.dataset is None):
        raise UsageError("give exactly one of --image or --dataset")
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    _require_file(args.checkpoint, "checkpoint")
    net, _ = load_checkpoint(args.checkpoint)
    if args.image is not None:
        _require_file(args.image, "image")
        items = [(os.path.splitext(os.path.basename(args.image))[0], read_pgm(args.image)[None] / 255.0)]
    else:
        _require_dir(args.dataset, "dataset")
        samples, _ = load_dataset(args.dataset)
        items = [(f"{i:04d}", s.image) for i, s in enumerate(samples)]
    for sub in ("pred", "uncertainty"):
        os.makedirs(os.path.join(args.out, sub), exist_ok=True)
    outputs = []
    for i, (stem, img) in enumerate(items):
        pred, raw, norm = _predict_one(net, img, args.samples, args.kind, np.random.default_rng([args.seed, i]))
        write_label_map(os.path.join(args.out, "pred", f"{stem}.pgm"), pred)
        write_pgm(os.path.join(args.out, "uncertainty", f"{stem}.pgm"), to_gray(norm))
        _write_csv(os.path.join(args.out, "uncertainty", f"{stem}.csv"),
                   [f"c{j}" for j in range(raw.shape[1])], [[float(v) for v in row] for row in raw])
        outputs += [f"pred/{stem}.pgm", f"uncertainty/{stem}.pgm", f"uncertainty/{stem}.csv"]
    cfg = {"checkpoint": args.checkpoint, "samples": args.samples, "kind": args.kind}
    _write_manifest(args.out, "predict", cfg, args.seed, [args.checkpoint, args.image or args.dataset],
                    outputs, started)


def _read_raw_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    try:
        return np.array([[float(v) for v in row] for row in rows[1:]])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def _grid(args):
    if args.grid == "camvid":
        return list(CAMVID_GRID)
    if args.grid == "tvus":
        return list(TVUS_GRID)
    if not args.fractions:
        raise UsageError("--grid custom needs --fractions")
    return [float(v) for v in args.fractions.split(",")]


def cmd_reject(args):
    started = time.perf_counter()
    _require_dir(args.predictions_dir, "predictions directory")
    _require_dir(args.dataset, "dataset")
    metric = _metric_name_ok(args.metric)
    fractions = _grid(args)
    samples, classes = load_dataset(args.dataset)
    preds, truths, us = [], [], []
    for i, s in enumerate(samples):
        stem = f"{i:04d}"
        pred_path = os.path.join(args.predictions_dir, "pred", f"{stem}.pgm")
        unc_path = os.path.join(args.predictions_dir, "uncertainty", f"{stem}.csv")
        _require_file(pred_path, "prediction")
        _require_file(unc_path, "uncertainty CSV")
        pred = read_pgm(pred_path).astype(np.int64)
        raw = _read_raw_csv(unc_path)
        if pred.shape != s.labels.shape or raw.shape != s.labels.shape:
            raise FormatError(f"sample {stem}: prediction size does not match labels")
        preds.append(pred)
        truths.append(s.labels.astype(np.int64))
        us.append(normalize_uncertainty(UncertaintyMap(raw, "raw")).values)
    pred, truth, u = np.stack(preds), np.stack(truths), np.stack(us)
    score = make_metric(metric, classes)
    score.__name__ = metric
    curve = pixel_rejection_curve(pred, truth, u, fractions, score, per_image=args.per_image)
    randoms = [random_rejection_baseline(pred, truth, fractions, seed, score).scores
               for seed in range(args.random_seeds)]
    rand_mean = np.mean(randoms, axis=0) if randoms else [float("nan")] * len(fractions)
    out = args.out or os.path.join(args.predictions_dir, "rejection.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    _write_csv(out, ["fraction", "rejected", metric, f"{metric}_random"],
               [[float(f), int(r), float(s), float(m)] for f, r, s, m in
                zip(curve.fractions, curve.rejected, curve.scores, rand_mean)])
    cfg = {"grid": fractions, "metric": metric, "per_image": args.per_image, "random_seeds": args.random_seeds}
    _write_manifest(os.path.dirname(os.path.abspath(out)), "reject", cfg, None,
                    [args.predictions_dir, args.dataset], [os.path.basename(out)], started)


def _evaluate(nets_or_net, X, Y, classes, metric, T=None, seed=0):
    score = make_metric(metric, classes)
    if isinstance(nets_or_net, list):
        mean, _ = vanilla_ensemble_predict(nets_or_net, X)
    else:
        mean, _ = mc_predict(nets_or_net, X, T, np.random.default_rng(seed))
    return float(score(mean.argmax(axis=1).reshape(-1), Y.reshape(-1)))


def cmd_compare_ensemble(args):
    started = time.perf_counter()
    if not 1 <= args.k <= 5:
        raise UsageError("--k must lie in 1..5")
    metric = _metric_name_ok(args.metric)
    net_kw, tcfg = _resolve_configs(args)
    train_s, test_s, classes = _load_split(args.dataset, args.test_dataset)
    net_kw.setdefault("num_classes", classes)
    X, Y, _ = stack_samples(train_s)
    Xt, Yt, _ = stack_samples(test_s)
    total = tcfg.stage1_steps + tcfg.stage2_steps
    plain = dataclasses.replace(tcfg, stage1_steps=total, stage2_steps=0)
    members = []
    for i in range(args.k):
        cfg_i = dataclasses.replace(plain, seed=tcfg.seed + i)
        net = StochasticSegNet(NetConfig(**dict(net_kw, bank_size=1, seed=net_kw["seed"] + i)))
        train_stage1(net, X, Y, cfg_i)
        members.append(net)
    rows = []
    for k in range(1, args.k + 1):
        subset = members[:k]
        rows.append([f"ensemble_{k}", k, _evaluate(subset, Xt, Yt, classes, metric),
                     sum(count_parameters(n) for n in subset)])
    stoch = StochasticSegNet(NetConfig(**net_kw))
    train(stoch, X, Y, tcfg)
    rows.append(["stochastic", count_submodels(stoch), _evaluate(stoch, Xt, Yt, classes, metric, args.samples, tcfg.seed),
                 count_parameters(stoch)])
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "compare_ensemble.csv")
    _write_csv(out, ["model", "members", metric, "parameters"], rows)
    config = {"net": NetConfig(**net_kw).to_dict(), "train": dataclasses.asdict(tcfg), "k": args.k,
              "samples": args.samples, "metric": metric}
    _write_manifest(args.out, "compare-ensemble", config, tcfg.seed,
                    [args.dataset] + ([args.test_dataset] if args.test_dataset else []),
                    ["compare_ensemble.csv"], started)


def cmd_sample_sweep(args):
    started = time.perf_counter()
    _require_file(args.checkpoint, "checkpoint")
    _require_dir(args.dataset, "dataset")
    metric = _metric_name_ok(args.metric)
    try:
        t_values = [int(v) for v in args.t_values.split(",")] if args.t_values else list(SWEEP_DEFAULT)
    except ValueError:
        raise UsageError(f"bad --t-values {args.t_values!r}") from None
    if any(t < 1 for t in t_values):
        raise UsageError("--t-values must be >= 1")
    net, _ = load_checkpoint(args.checkpoint)
    samples, classes = load_dataset(args.dataset)
    X, Y, _ = stack_samples(samples)
    X = X.astype(net.parameters()[0].dtype)
    rows = []
    for t in t_values:
        scores = [_evaluate(net, X, Y, classes, metric, t, seed=[args.seed, r]) for r in range(args.repeats)]
        rows.append([t, float(np.mean(scores)), float(np.std(scores))])
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "sample_sweep.csv")
    _write_csv(out, ["samples", metric, f"{metric}_std"], rows)
    cfg = {"t_values": t_values, "repeats": args.repeats, "metric": metric}
    _write_manifest(args.out, "sample-sweep", cfg, args.seed, [args.checkpoint, args.dataset],
                    ["sample_sweep.csv"], started)


def cmd_plot(args):
    started = time.perf_counter()
    _require_file(args.csv, "CSV")
    with open(args.csv) as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise FormatError(f"{args.csv}: need a header and at least one row")
    header = rows[0]
    try:
        cols = {h: [float(r[i]) for r in rows[1:]] for i, h in enumerate(header)}
    except (ValueError, IndexError):
        raise FormatError(f"{args.csv}: non-numeric CSV cannot be plotted") from None
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "slseg"
    import matplotlib.pyplot as plt

    xname = header[0]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name in header[1:]:
        if name.endswith("_std") or name == "rejected":
            continue
        ax.plot(cols[xname], cols[name], marker="o", label=name)
    ax.set_xlabel(xname)
    ax.legend()
    if args.title:
        ax.set_title(args.title)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    fig.savefig(args.out, format="svg", metadata={"Date": None})
    plt.close(fig)
    _write_manifest(out_dir, "plot", {"csv": args.csv, "title": args.title}, None, [args.csv],
                    [os.path.basename(args.out)], started)


# ------------------------------------------------------------------ parser


def _add_train_flags(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--stage1-steps", type=int)
    p.add_argument("--stage2-steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--bank-size", type=int)


def build_parser():
    parser = _Parser(prog="slseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--density", type=float, default=0.35)
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--band-width", type=int, default=4)
    p.add_argument("--band-noise", type=float, default=0.08)
    p.add_argument("--band-separation", type=float, default=0.06)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="two-stage training; writes model.slsn and train_log.csv")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--save-stage1", action="store_true", help="also write the stage-1 checkpoint")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="MC prediction and uncertainty maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image")
    p.add_argument("--dataset")
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--kind", choices=("variance", "entropy"), default="variance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("reject", help="pixel-rejection curve with random baseline")
    p.add_argument("--predictions-dir", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--grid", choices=("camvid", "tvus", "custom"), default="camvid")
    p.add_argument("--fractions", help="comma-separated, with --grid custom")
    p.add_argument("--metric", default="miou")
    p.add_argument("--per-image", action="store_true")
    p.add_argument("--random-seeds", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_reject)

    p = sub.add_parser("compare-ensemble", help="vanilla ensembles of 1..k nets vs one stochastic net")
    p.add_argument("--dataset", required=True)
    p.add_argument("--test-dataset")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--metric", default="miou")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_compare_ensemble)

    p = sub.add_parser("sample-sweep", help="metric versus number of MC samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--t-values", help="comma-separated; default 1,2,5,10,25,50")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--metric", default="miou")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_sweep)

    p = sub.add_parser("plot", help="render a CSV as an SVG line chart")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("a command is required")
        args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except FormatError as exc:
        return _fail(EXIT_FORMAT, "format", exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except OSError as exc:
        return _fail(EXIT_IO, "io", exc)
    except ValueError as exc:
        return _fail(EXIT_USAGE, "invalid", exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
