"""Command-line entry point: ``sbngrad {gen-data,init-net,eval-grad,train}``.

Every flag can also be given in a config file (``--config FILE``) as flat
``key=value`` lines, keys spelled like the flags without the leading dashes
(``estimator=psa``, ``auto-lr=true``). Flags on the command line win.

Exit codes: 0 success, 2 config error, 3 capacity error, 4 divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import CapacityError, DivergenceError
from .harness import build_report, collect_samples, default_grid, report_csv
from .oracle import DEFAULT_MAX_WIDTH, dataset_gradient
from .registry import ESTIMATOR_NAMES
from .serialize import load_network, save_network
from .svg import write_chart
from .training import (
    DEFAULT_BAND_HEIGHT,
    NetworkSpec,
    gen_toy_data,
    init_network,
    load_dataset,
    lr_grid_search,
    save_dataset,
    train,
)

EXIT_CONFIG = 2
EXIT_CAPACITY = 3
EXIT_DIVERGENCE = 4


class ConfigError(Exception):
    pass


def _estimator_list(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    for n in names:
        if n not in ESTIMATOR_NAMES:
            raise argparse.ArgumentTypeError(f"unknown estimator {n!r}")
    return names


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sbngrad", description=__doc__.splitlines()[0], allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file; flags override it")
        sp.add_argument("--seed", type=int, default=0, help="experiment seed")
        sp.add_argument("--out", default=".", help="output directory")

    g = sub.add_parser("gen-data", help="write the toy dataset as CSV", allow_abbrev=False)
    common(g)
    g.add_argument("--n", type=int, default=100, help="points per class")
    g.add_argument("--band-height", type=float, default=DEFAULT_BAND_HEIGHT)

    i = sub.add_parser("init-net", help="write an initialized network", allow_abbrev=False)
    common(i)
    i.add_argument("--arch", default="5-5-5", help="hidden widths, e.g. 5-5-5")
    i.add_argument("--data", help="dataset CSV used for data-dependent whitening")
    i.add_argument("--classes", type=int, default=2)

    e = sub.add_parser("eval-grad", help="gradient accuracy reports at a frozen network", allow_abbrev=False)
    common(e)
    e.add_argument("--net", required=False, help="network file")
    e.add_argument("--data", required=False, help="dataset CSV")
    e.add_argument("--estimator", type=_estimator_list, default=["psa", "st", "reinforce"],
                   help=f"comma-separated subset of {','.join(ESTIMATOR_NAMES)}")
    e.add_argument("--samples", type=int, default=10000, help="bank size T")
    e.add_argument("--ms", default=None, help="comma-separated M grid (default: powers of 2 up to T/2)")
    e.add_argument("--point-id", default=None, help="name used in report file names")
    e.add_argument("--max-width", type=int, default=DEFAULT_MAX_WIDTH)

    t = sub.add_parser("train", help="train on the toy dataset", allow_abbrev=False)
    common(t)
    t.add_argument("--net", help="initial network file (default: fresh init from --arch)")
    t.add_argument("--arch", default="5-5-5")
    t.add_argument("--data", help="dataset CSV (default: generated with --seed)")
    t.add_argument("--estimator", default="psa", choices=ESTIMATOR_NAMES)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--auto-lr", action="store_true", help="grid-search the lr first")
    t.add_argument("--probe-epochs", type=int, default=5)
    t.add_argument("--epochs", type=int, default=500)
    t.add_argument("--batch", type=int, default=None, help="batch size (default: full batch)")
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--no-timing", action="store_true", help="write 0 for wallclock_ms (byte-reproducible output)")
    return p


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    raise ConfigError(f"unknown command {command!r}")


def read_config(path) -> dict:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and known.command:
        sp = _subparser(parser, known.command)
        actions = {a.dest: a for a in sp._actions}
        defaults = {}
        for key, raw in read_config(known.config).items():
            dest = key.replace("-", "_")
            if dest not in actions or dest in ("help", "config"):
                raise ConfigError(f"unknown config key {key!r}")
            act = actions[dest]
            if act.nargs == 0:
                defaults[dest] = _bool(raw)
            elif act.type is not None:
                try:
                    defaults[dest] = act.type(raw)
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise ConfigError(f"bad value for {key}: {exc}") from exc
            else:
                defaults[dest] = raw
            if act.choices is not None and defaults[dest] not in act.choices:
                raise ConfigError(f"bad value for {key}: {raw!r}")
            act.required = False
        sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    data = gen_toy_data(args.n, args.seed, args.band_height)
    path = save_dataset(data, _out_dir(args) / "data.csv")
    counts = np.bincount(data.labels, minlength=2)
    print(f"wrote {path}: {len(data)} points (class 0: {counts[0]}, class 1: {counts[1]})")
    return 0


def cmd_init_net(args) -> int:
    spec = NetworkSpec.parse(args.arch, n_in=2, n_classes=args.classes)
    batch = load_dataset(args.data) if args.data else None
    net = init_network(spec, args.seed, whiten_batch=batch)
    path = save_network(net, _out_dir(args) / "network.sbn")
    print(f"wrote {path}: widths {net.widths}, {net.n_params} parameters")
    return 0


def cmd_eval_grad(args) -> int:
    if not args.net or not args.data:
        raise ConfigError("eval-grad needs --net and --data")
    net = load_network(args.net)
    data = load_dataset(args.data)
    for k, n in enumerate(net.widths, start=1):
        if n > args.max_width:
            raise CapacityError(k, n, args.max_width)
    out = _out_dir(args)
    point_id = args.point_id or Path(args.net).stem
    Ms = [int(m) for m in args.ms.split(",")] if args.ms else default_grid(args.samples)
    g_true = dataset_gradient(net, data.points, data.labels, args.max_width).flat()
    curves = {}
    for name in args.estimator:
        bank = collect_samples(net, name, data.points, data.labels, args.samples, args.seed, point_id)
        report = build_report(bank, g_true, Ms)
        path = report_csv(report, out / f"{point_id}_{name}.csv")
        curves[name] = report
        first = next(r for r in report.rows if r[1] == 1)
        print(f"{name}: layer-1 rmse_rel(M={first[2]}) = {first[3]:.4g}, cos_mean = {first[4]:.4f} -> {path}")
    for k in range(1, net.depth + 2):
        series = {}
        for name, rep in curves.items():
            rows = [r for r in rep.rows if r[1] == k]
            series[name] = ([r[2] for r in rows], [r[3] for r in rows])
        label = "head" if k == net.depth + 1 else f"layer {k}"
        write_chart(out / f"{point_id}_rmse_layer{k}.svg", series, f"{point_id}: RMSE, {label}")
    return 0


def cmd_train(args) -> int:
    data = load_dataset(args.data) if args.data else gen_toy_data(100, args.seed)
    if args.net:
        net = load_network(args.net)
    else:
        net = init_network(NetworkSpec.parse(args.arch), args.seed, whiten_batch=data)
    out = _out_dir(args)
    lr = args.lr
    if args.auto_lr:
        res = lr_grid_search(net, data, args.estimator, probe_epochs=args.probe_epochs,
                             seed=args.seed, batch_size=args.batch, momentum=args.momentum)
        lr = res.best_lr
        with (out / "lr_search.csv").open("w") as fh:
            fh.write("lr,score,chosen\n")
            for cand, score in sorted(res.scores.items()):
                fh.write(f"{float(cand)!r},{float(score)!r},{int(cand == lr)}\n")
        note = " (all probes diverged)" if res.all_diverged else ""
        print(f"auto-lr selected {lr!r}{note}")
    try:
        final, hist = train(net, data, args.estimator, lr, args.momentum, args.epochs, args.batch, args.seed)
    except DivergenceError as exc:
        print(f"divergence: epoch {exc.epoch}, parameter block {exc.block}", file=sys.stderr)
        return EXIT_DIVERGENCE
    if args.no_timing:
        for r in hist.records:
            r.wallclock_ms = 0.0
    hist.to_csv(out / "history.csv")
    save_network(final, out / "network.sbn")
    if hist.records:
        last = hist.records[-1]
        print(f"epoch {last.epoch}: exp_loss_mc={last.exp_loss_mc:.4f} train_acc={last.train_acc:.3f} lr={lr:g}")
    else:
        print("no epochs run; initial network saved")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "init-net": cmd_init_net, "eval-grad": cmd_eval_grad, "train": cmd_train}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY


if __name__ == "__main__":
    sys.exit(main())
