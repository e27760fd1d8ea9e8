"""``mal`` command line.

Exit codes: 0 success, 2 usage/config, 3 numeric failure, 4 I/O or format.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from mal import __version__
from mal.align import ENGINES, AlignmentResult, match
from mal.assembly import AssemblyConfig, AssemblyState, assemble
from mal.data import DATASETS, data_root, load_dataset, subsample
from mal.errors import ConfigError, FormatError, MalError
from mal.grid import pairwise_rows, rows_to_csv
from mal.heatmap import grid_to_csv, read_pairs, render_svg
from mal.lmc import DEFAULT_EPSILON, DEFAULT_GRID, curve_report, naive_plan, sweep
from mal.merge import merge_convex, parse_mask
from mal.nn import ArchSpec, Hyperparams, train_sgd
from mal.zoo import LEARNING_RATES, ZooConfig, ZooManifest, build_zoo, load_checkpoint, query, save_checkpoint

log = logging.getLogger("mal")


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _config_echo(args) -> dict:
    skip = {"func", "log_level"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k not in skip}


def _write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dataset(args, split):
    data = load_dataset(args.dataset, data_root(args.data_root), split)
    if getattr(args, "subsample", None):
        data = subsample(data, args.subsample, args.seed)
    return data


def _sibling(path, suffix):
    return Path(path).with_suffix(suffix)


def cmd_train(args):
    arch = ArchSpec(tuple(args.arch))
    data = _dataset(args, "train")
    model = train_sgd(arch, data, Hyperparams(args.lr, args.epochs, args.batch_size, args.seed))
    save_checkpoint(model, args.out)
    print(f"saved {args.out}: loss {model.meta.final_loss:.4f} accuracy {model.meta.final_accuracy:.4f}")
    return 0


def cmd_match(args):
    base, target = load_checkpoint(args.base), load_checkpoint(args.target)
    res = match(base, target, engine=args.engine, seed=args.seed, max_passes=args.max_passes,
                max_rounds=args.max_rounds)
    _write(args.out, res.to_json(base=str(args.base), target=str(args.target)))
    print(f"{res.engine}: objective {res.objective:.6g} after {res.iterations} passes (converged={res.converged})")
    return 0


def _load_alignment(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        res = AlignmentResult.from_dict(doc)
        refs = doc["base"], doc["target"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"{path}: not an alignment document ({exc})") from None

    def resolve(ref):
        p = Path(ref)
        return p if p.exists() or p.is_absolute() else path.parent / p

    return res, load_checkpoint(resolve(refs[0])), load_checkpoint(resolve(refs[1]))


def cmd_merge(args):
    res, base, target = _load_alignment(args.align)
    merged = merge_convex(base, target, res.plan, args.lam, parse_mask(args.mask, base.num_layers,
                                                                       base.arch.widths[-1] != target.arch.widths[-1]))
    save_checkpoint(merged, args.out)
    print(f"saved {args.out}: widths {list(merged.arch.widths)}")
    return 0


def cmd_sweep(args):
    res, base, target = _load_alignment(args.align)
    data = _dataset(args, args.split)
    curve = sweep(base, target, res.plan, args.mask, data, args.grid, args.split, args.threads)
    naive = sweep(base, target, naive_plan(base, target), args.mask, data, args.grid, args.split, args.threads)
    report = curve_report(curve, naive, args.epsilon)
    report.update(engine=res.engine, objective=res.objective, config=_config_echo(args))
    _write(args.out, curve.to_csv())
    _write(args.report or _sibling(args.out, ".json"), json.dumps(report, indent=2) + "\n")
    print(f"barrier {report['barrier']:.4f}  aulc_ratio {report['aulc_ratio']:.4f}  lambda* {report['lambda_star']:.3g}")
    return 0


def cmd_assemble(args):
    zoo_dir = args.zoo or args.zoo_dir
    if zoo_dir is None:
        raise ConfigError("assemble needs --zoo (or --zoo-dir)")
    manifest = ZooManifest.load_dir(zoo_dir)
    base = load_checkpoint(args.base)
    data = _dataset(args, args.split)
    exclude = [e.id for e in manifest.entries
               if e.status == "ok" and manifest.resolve(e).resolve() == Path(args.base).resolve()]
    config = AssemblyConfig(engine=args.engine, grid=args.grid, epsilon=args.epsilon, min_lambda=args.min_lambda,
                            max_lambda=args.max_lambda, layer_mask=args.mask, seed=args.seed, workers=args.threads)
    state = AssemblyState.start(base, data, base_id=Path(args.base).stem)
    state, report = assemble(state, manifest, data, args.budget, config, exclude=exclude)
    doc = report.to_dict(include_runtime=False)
    doc["config_echo"] = _config_echo(args)
    _write(args.out, json.dumps(doc, indent=2) + "\n")
    _write(args.csv or _sibling(args.out, ".csv"), report.to_csv())
    _write(_sibling(args.out, ".timing.json"), json.dumps({"runtime_seconds": report.runtime_seconds}) + "\n")
    if args.save_merged:
        save_checkpoint(state.current, args.save_merged)
    print(f"{doc['accepted_count']} of {len(report.steps)} candidates accepted; final loss {report.final_loss:.4f}; "
          f"{report.runtime_seconds:.1f} s")
    return 0


def cmd_build_zoo(args):
    zoo_dir = args.zoo_dir or args.out
    if zoo_dir is None:
        raise ConfigError("build-zoo needs --zoo-dir")
    root = data_root(args.data_root)
    data = {}
    for name in args.datasets:
        train = load_dataset(name, root, "train")
        if args.subsample:
            train = subsample(train, args.subsample, args.seed)
        data[name] = (train, load_dataset(name, root, "test"))
    config = ZooConfig(archs=args.archs, datasets=args.datasets, seeds=args.seeds,
                       learning_rates=tuple(args.lrs), epochs=args.epochs, batch_size=args.batch_size)
    manifest = build_zoo(config, zoo_dir, data, workers=args.threads)
    ok = sum(e.status == "ok" for e in manifest.entries)
    print(f"zoo {zoo_dir}: {ok} trained, {len(manifest.entries) - ok} failed")
    return 0


def cmd_pairs(args):
    if args.zoo_dir is None:
        raise ConfigError("pairs needs --zoo-dir")
    manifest = ZooManifest.load_dir(args.zoo_dir)
    entries = query(manifest, dataset_id=args.dataset)
    data = _dataset(args, args.split)
    rows = pairwise_rows(manifest, entries, data, grid=args.grid, engine=args.engine, layer_mask=args.mask,
                         epsilon=args.epsilon, seed=args.seed, split=args.split, workers=args.threads)
    _write(args.out, rows_to_csv(rows))
    print(f"wrote {len(rows)} pair rows to {args.out}")
    return 0


def cmd_heatmap(args):
    rows, cols, grid = read_pairs(Path(args.pairs).read_text(), args.metric)
    _write(args.out, render_svg(rows, cols, grid, args.metric, args.title))
    _write(args.csv or _sibling(args.out, ".csv"), grid_to_csv(rows, cols, grid))
    print(f"wrote {len(rows)}x{len(cols)} heatmap to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data-root", type=Path, default=None, help="dataset directory (default: $MAL_DATA_ROOT)")
    common.add_argument("--zoo-dir", type=Path, default=None)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--log-level", default="WARNING")

    parser = argparse.ArgumentParser(prog="mal", description="Align, merge and assemble MLP checkpoints.")
    parser.add_argument("--version", action="version", version=f"mal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    def data_flags(p, split_default="test"):
        p.add_argument("--dataset", required=True, choices=sorted(DATASETS))
        p.add_argument("--split", default=split_default, choices=("train", "test"))
        p.add_argument("--subsample", type=int, default=None)

    p = add("train", cmd_train, "train one checkpoint")
    p.add_argument("--arch", required=True, type=_int_list, help="full widths, e.g. 784,64,64,10")
    p.add_argument("--dataset", required=True, choices=sorted(DATASETS))
    p.add_argument("--subsample", type=int, default=None)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--out", required=True, type=Path)

    p = add("match", cmd_match, "align a target checkpoint to a base")
    p.add_argument("--base", required=True, type=Path)
    p.add_argument("--target", required=True, type=Path)
    p.add_argument("--engine", default="auto", choices=("auto", *ENGINES))
    p.add_argument("--max-passes", type=int, default=100)
    p.add_argument("--max-rounds", type=int, default=50)
    p.add_argument("--out", required=True, type=Path)

    p = add("merge", cmd_merge, "merge an aligned pair at one lambda")
    p.add_argument("--align", required=True, type=Path)
    p.add_argument("--lambda", dest="lam", required=True, type=float)
    p.add_argument("--mask", default=None, help="'full', 'shallow:k' or e.g. 1,1,0")
    p.add_argument("--out", required=True, type=Path)

    p = add("sweep", cmd_sweep, "loss along the merge path")
    p.add_argument("--align", required=True, type=Path)
    p.add_argument("--grid", type=int, default=DEFAULT_GRID)
    data_flags(p)
    p.add_argument("--mask", default=None)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--out", required=True, type=Path, help="curve CSV")
    p.add_argument("--report", type=Path, default=None, help="report JSON (default: next to --out)")

    p = add("assemble", cmd_assemble, "iteratively merge zoo models into a base")
    p.add_argument("--base", required=True, type=Path)
    p.add_argument("--zoo", type=Path, default=None)
    data_flags(p)
    p.add_argument("--budget", type=int, default=10)
    p.add_argument("--engine", default="auto", choices=("auto", *ENGINES))
    p.add_argument("--grid", type=int, default=DEFAULT_GRID)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--min-lambda", type=float, default=0.1)
    p.add_argument("--max-lambda", type=float, default=0.5)
    p.add_argument("--mask", default=None)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--csv", type=Path, default=None)
    p.add_argument("--save-merged", type=Path, default=None)

    p = add("build-zoo", cmd_build_zoo, "train an architecture x dataset x seed grid")
    p.add_argument("--archs", required=True, type=lambda s: [_int_list(a) for a in s.split(";") if a.strip()],
                   help="hidden widths per arch, ';'-separated, e.g. '64,64,64;128,64,32'")
    p.add_argument("--datasets", required=True, type=lambda s: s.split(","))
    p.add_argument("--seeds", required=True, type=_int_list)
    p.add_argument("--lrs", type=_float_list, default=list(LEARNING_RATES))
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--subsample", type=int, default=None)
    p.add_argument("--out", type=Path, default=None, help="alias for --zoo-dir")

    p = add("pairs", cmd_pairs, "merge every ordered pair in a zoo and tabulate LMC metrics")
    data_flags(p)
    p.add_argument("--grid", type=int, default=DEFAULT_GRID)
    p.add_argument("--engine", default="auto", choices=("auto", *ENGINES))
    p.add_argument("--mask", default=None)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--out", required=True, type=Path)

    p = add("heatmap", cmd_heatmap, "render a pairs CSV as an SVG heatmap")
    p.add_argument("--pairs", required=True, type=Path)
    p.add_argument("--metric", default="aulc_ratio")
    p.add_argument("--title", default="")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--csv", type=Path, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MalError as exc:
        print(f"mal {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mal {args.command}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
