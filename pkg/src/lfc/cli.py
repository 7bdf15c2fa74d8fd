"""Command-line entry point: data generation, source training, adaptation, evaluation.

Exit codes: 0 success, 2 usage or configuration error, 3 filesystem conflict,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import curriculum
from .adaptation import AdaptConfig, AdaptResult, adapt
from .config import RunConfig
from .errors import ConfigurationError, DivergenceError, LFCError, PGMError
from .metrics import CLASS_NAMES, MetricReport, report
from .model import ModelBranch, SegNetConfig, load, save
from .source import evaluate, split_train_val, train_source
from .synth import SOURCE_SPEC, TARGET_SPEC, Dataset, DomainSpec, benchmark, load_split

log = logging.getLogger("lfc")

EXIT_OK, EXIT_USAGE, EXIT_CONFLICT, EXIT_NUMERIC = 0, 2, 3, 4
SUITE_MODES = ("no_adaptation", "no_easy2hard", "no_src2tgt", "full")
EPOCH_COLUMNS = ("epoch", "alpha", "mean_omega", "l_fix", "l_sl", "l_total", "dice_val")


class Conflict(Exception):
    """Output location already holds data."""


# ---------------------------------------------------------------- helpers


def _num(v) -> str:
    return repr(float(v))


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _prepare_out(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        if not force:
            raise Conflict(f"output directory {path} is not empty (use --force to overwrite)")
        shutil.rmtree(path) if path.is_dir() else path.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve(args, **flags) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg.with_overrides(**flags)


def _require(cfg: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if not getattr(cfg, k)]
    if missing:
        raise ConfigurationError(f"missing required setting(s): {', '.join(missing)} (flag or config key)")


def _net_config(cfg: RunConfig) -> SegNetConfig:
    return SegNetConfig(base_width=cfg.base_width, depth=cfg.depth)


def _adapt_config(cfg: RunConfig, seed: int | None = None, ablation: str | None = None) -> AdaptConfig:
    return AdaptConfig(
        seed=cfg.seed if seed is None else seed,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        tau=cfg.tau,
        r_max=cfg.r_max,
        delta=cfg.delta,
        ablation=ablation or cfg.ablation,
        adabn_batch_size=cfg.adabn_batch_size,
        bn_mode=cfg.bn_mode,
    )


def _target_split(data: str, split: str, labelled: bool) -> Dataset | None:
    root = Path(data) / "target" / split
    if not (root / "manifest.txt").exists():
        if labelled:
            return None
        raise FileNotFoundError(f"no target/{split} manifest under {data}")
    ds = load_split(data, "target", split)
    # adaptation is source-free and label-free: drop labels from the training split
    return ds if labelled else Dataset(ds.ids, ds.images)


def _load_model(path) -> ModelBranch:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model checkpoint {path} not found")
    return load(path)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    src = DomainSpec.from_text(Path(args.source_spec).read_text()) if args.source_spec else SOURCE_SPEC
    tgt = DomainSpec.from_text(Path(args.target_spec).read_text()) if args.target_spec else TARGET_SPEC
    sizes = {k: v for k, v in (("source_train", args.source_train), ("target_train", args.target_train),
                                ("target_test", args.target_test)) if v is not None}
    try:
        benchmark(args.out, src, tgt, sizes, seed=args.seed, force=args.force)
    except FileExistsError as exc:
        raise Conflict(str(exc)) from exc
    log.info("wrote benchmark to %s", args.out)
    return EXIT_OK


def run_train_source(cfg: RunConfig, out: Path) -> tuple[ModelBranch, MetricReport]:
    _require(cfg, "data")
    data = load_split(cfg.data, "source", "train")
    train, val = split_train_val(data, cfg.val_fraction)
    rows = []

    def on_epoch(epoch, model, loss):
        rows.append([epoch, _num(loss)])

    f_s = train_source(train, _net_config(cfg), cfg.source_seed, cfg.source_epochs, cfg.source_batch_size,
                       cfg.source_lr, on_epoch=on_epoch)
    save(f_s, out / "source.ckpt")
    _write_csv(out / "source_log.csv", ["epoch", "loss"], rows)
    val_report = evaluate(f_s, val) if len(val) else None
    if val_report is not None:
        (out / "metrics_source_val.csv").write_text(val_report.to_csv())
        log.info("source validation mean Dice %.4f", val_report.mean_dice())
    test = _target_split(cfg.data, "test", labelled=True)
    if test is not None:
        (out / "metrics_target_test.csv").write_text(evaluate(f_s, test).to_csv())
    return f_s, val_report


def cmd_train_source(args) -> int:
    cfg = _resolve(args, data=args.data, out=args.out)
    _require(cfg, "data", "out")
    if not (Path(cfg.data) / "source" / "train" / "manifest.txt").exists():
        raise FileNotFoundError(f"no source/train manifest under {cfg.data}")
    out = _prepare_out(cfg.out, args.force)
    (out / "resolved_config.txt").write_text(cfg.to_text())
    run_train_source(cfg, out)
    return EXIT_OK


def write_run_record(out: Path, cfg: RunConfig, result: AdaptResult, test: Dataset | None) -> MetricReport | None:
    """Everything needed to audit an adaptation run, written under ``out``."""
    (out / "resolved_config.txt").write_text(cfg.to_text())
    _write_csv(out / "epoch_log.csv", EPOCH_COLUMNS, [
        [r["epoch"], _num(r["alpha"]), _num(r["omega"]), _num(r["l_fix"]), _num(r["l_sl"]), _num(r["l_total"]),
         _num(r["dice_val"])] for r in result.epochs])
    _write_csv(out / "step_log.csv", ["epoch", "step", "sample_ids", "omega", "l_fix", "l_sl", "l_total"], [
        [s.epoch, s.step, " ".join(map(str, s.sample_ids)), " ".join(map(_num, s.loss.omega)),
         " ".join(map(_num, s.loss.l_fix)), "" if s.loss.l_sl is None else " ".join(map(_num, s.loss.l_sl)),
         _num(s.loss.l_total)] for s in result.steps])
    rank_dir = out / "rankings"
    rank_dir.mkdir(exist_ok=True)
    for epoch, ranking in enumerate(result.rankings):
        (rank_dir / f"epoch_{epoch:02d}.csv").write_text(curriculum.ranking_csv(ranking))
    save(result.target, out / "target.ckpt")
    if test is None:
        return None
    rep = evaluate(result.target, test)
    (out / "metrics.csv").write_text(rep.to_csv())
    return rep


def run_adapt(cfg: RunConfig, f_s: ModelBranch, train: Dataset, test: Dataset | None, out: Path,
              seed: int | None = None, ablation: str | None = None) -> MetricReport | None:
    acfg = _adapt_config(cfg, seed, ablation)
    resolved = cfg.with_overrides(seed=acfg.seed, ablation=acfg.ablation, out=str(out))
    result = adapt(f_s, train, acfg, monitor=test, out_dir=out)
    return write_run_record(out, resolved, result, test)


def cmd_adapt(args) -> int:
    cfg = _resolve(args, data=args.data, out=args.out, source_model=args.source_model)
    _require(cfg, "data", "out", "source_model")
    f_s = _load_model(cfg.source_model)
    train = _target_split(cfg.data, "train", labelled=False)
    test = _target_split(cfg.data, "test", labelled=True)
    _adapt_config(cfg)  # validate before touching the output directory
    out = _prepare_out(cfg.out, args.force)
    rep = run_adapt(cfg, f_s, train, test, out)
    if rep is not None:
        _print_report(rep)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    data = load_split(args.data, args.domain, args.split)
    if args.oracle:
        rep = report(zip(data.labels, data.labels))
    else:
        if not args.model:
            raise ConfigurationError("evaluate needs --model unless --oracle is given")
        rep = evaluate(_load_model(args.model), data)
    text = rep.to_csv()
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    _print_report(rep)
    return EXIT_OK


def _summary(values: list[float], scale: float) -> str:
    arr = np.asarray(values, dtype=np.float64) * scale
    return f"{arr.mean():.2f}±{arr.std():.2f}"


def run_ablate_suite(cfg: RunConfig, seeds: list[int], out: Path, f_s: ModelBranch | None = None) -> dict:
    _require(cfg, "data")
    if f_s is None:
        src_dir = out / "source"
        src_dir.mkdir()
        (src_dir / "resolved_config.txt").write_text(cfg.to_text())
        f_s, _ = run_train_source(cfg, src_dir)
    train = _target_split(cfg.data, "train", labelled=False)
    test = _target_split(cfg.data, "test", labelled=True)
    if test is None:
        raise FileNotFoundError(f"ablation suite needs a target/test split under {cfg.data}")

    base_dir = out / "no_adaptation"
    base_dir.mkdir()
    base = evaluate(f_s, test)
    (base_dir / "metrics.csv").write_text(base.to_csv())

    per_run: dict[str, list[tuple[int, MetricReport]]] = {"no_adaptation": [(s, base) for s in seeds]}
    for mode in SUITE_MODES[1:]:
        per_run[mode] = []
        for s in seeds:
            run_dir = out / mode / f"seed_{s}"
            run_dir.mkdir(parents=True)
            per_run[mode].append((s, run_adapt(cfg, f_s, train, test, run_dir, seed=s, ablation=mode)))
            log.info("%s seed %d mean Dice %.4f", mode, s, per_run[mode][-1][1].mean_dice())

    metrics = [(c, m) for c in (1, 2) for m in ("dice", "asd")]
    run_rows, table_rows = [], []
    for mode in SUITE_MODES:
        for s, rep in per_run[mode]:
            run_rows.append([mode, s] + [_num(rep.mean_std(m, c)[0]) for c, m in metrics] + [_num(rep.mean_dice())])
        cols = []
        for c, m in metrics:
            cols.append(_summary([rep.mean_std(m, c)[0] for _, rep in per_run[mode]], 100.0 if m == "dice" else 1.0))
        cols.append(_summary([rep.mean_dice() for _, rep in per_run[mode]], 100.0))
        table_rows.append([mode] + cols + [len(per_run[mode])])
    names = [f"{CLASS_NAMES[c]}_{m}" for c, m in metrics]
    _write_csv(out / "ablation_runs.csv", ["mode", "seed"] + names + ["mean_dice"], run_rows)
    _write_csv(out / "ablation_table.csv", ["mode"] + names + ["mean_dice", "seeds"], table_rows)
    return {mode: [rep for _, rep in runs] for mode, runs in per_run.items()}


def cmd_ablate_suite(args) -> int:
    cfg = _resolve(args, data=args.data, out=args.out, source_model=args.source_model)
    _require(cfg, "data", "out")
    if args.seeds < 1:
        raise ConfigurationError("--seeds must be at least 1")
    _adapt_config(cfg)
    f_s = _load_model(cfg.source_model) if cfg.source_model else None
    out = _prepare_out(cfg.out, args.force)
    (out / "resolved_config.txt").write_text(cfg.to_text())
    run_ablate_suite(cfg, [cfg.seed + k for k in range(args.seeds)], out, f_s)
    print((out / "ablation_table.csv").read_text(), end="")
    return EXIT_OK


def _print_report(rep: MetricReport) -> None:
    for c in rep.classes:
        print(f"{CLASS_NAMES.get(c, c)}: Dice {rep.formatted('dice', c)}  ASD {rep.formatted('asd', c)}")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lfc", description="Curriculum source-free adaptation on a synthetic benchmark.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--source-spec")
    g.add_argument("--target-spec")
    g.add_argument("--source-train", type=int)
    g.add_argument("--target-train", type=int)
    g.add_argument("--target-test", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-source", help="supervised training of the source model")
    t.add_argument("--data")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train_source)

    a = sub.add_parser("adapt", help="adapt a source model to the target domain")
    a.add_argument("--source-model")
    a.add_argument("--data")
    a.add_argument("--config")
    a.add_argument("--out")
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("evaluate", help="Dice/ASD report for a model on a split")
    e.add_argument("--model")
    e.add_argument("--data", required=True)
    e.add_argument("--domain", default="target", choices=("source", "target"))
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--out")
    e.add_argument("--oracle", action="store_true", help="score the ground truth against itself")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate-suite", help="all ablation modes over several seeds")
    s.add_argument("--data")
    s.add_argument("--config")
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--source-model")
    s.add_argument("--out")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_ablate_suite)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Conflict as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFLICT
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, FileNotFoundError, PGMError, LFCError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
