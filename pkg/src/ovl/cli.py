"""Command line entry point.

Every file a command writes lands under ``--out`` (default: ``$OVERLORD_OUT``).
Exit status: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, parse_config
from .evaluation import EvalReport, fit_oracles, full_report
from .reporting import GridSpec, emit_curves, render_grid, write_curve_tsv, write_report
from .synth import build_dataset, load_folder_dataset
from .trainer import train_stage1, train_stage2

__all__ = ["run_cli", "main", "UsageError"]

log = logging.getLogger("ovl")

TRAIN_TARGETS = ("stage1", "stage2", "amortized", "no-xcorr")
ABLATIONS = ("amortized", "no_xcorr", "no_adv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--config", type=Path, default=None, help="key = value config file")
    common.add_argument("--out", type=Path, default=None, help="run directory (default: $OVERLORD_OUT)")
    common.add_argument("--threads", type=int, default=1, help="torch threads; 1 keeps runs bitwise reproducible")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="ovl", parents=[common], description="class-conditional disentanglement and translation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth-data", parents=[common], help="render the synthetic benchmark into <out>/data")
    p = sub.add_parser("train", parents=[common], help="train a stage or an ablation variant")
    p.add_argument("target", choices=TRAIN_TARGETS)
    p = sub.add_parser("translate", parents=[common], help="write a translation grid")
    p.add_argument("--sources", default="0,1,2,3", help="comma-separated eval-split indices")
    p.add_argument("--references", default="4,5,6,7", help="comma-separated eval-split indices")
    p.add_argument("--name", default="grid.png", help="file name under <out>/translations")
    sub.add_parser("evaluate", parents=[common], help="compute the metric report of the latest stage")
    sub.add_parser("report", parents=[common], help="render figures and the text report")
    p = sub.add_parser("ablate", parents=[common], help="train and evaluate ablation variants")
    p.add_argument("--only", default=",".join(ABLATIONS), help=f"subset of {','.join(ABLATIONS)}")
    return parser


# helpers ----------------------------------------------------------------------

def _index_list(raw: str, n: int, flag: str) -> list[int]:
    try:
        idx = [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {raw!r}") from None
    if not idx:
        raise UsageError(f"{flag} is empty")
    bad = [i for i in idx if not 0 <= i < n]
    if bad:
        raise UsageError(f"{flag}: indices {bad} outside the eval split of {n} images")
    return idx


def _load_config(args) -> RunConfig:
    out = args.out
    snapshot = out / "config.snapshot"
    if args.config is not None:
        cfg = parse_config(args.config)
    elif snapshot.exists():
        cfg = parse_config(snapshot)
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if snapshot.exists() and parse_config(snapshot) != cfg:
        raise ConfigError(f"{snapshot} differs from the requested config; use a fresh --out directory")
    cfg.write_snapshot(snapshot)
    return cfg


def _datasets(cfg: RunConfig, out: Path):
    """Train/eval splits cached as ``<out>/data/{train,eval}.ovld``."""
    train_path, eval_path = out / "data" / "train.ovld", out / "data" / "eval.ovld"
    if train_path.exists() and eval_path.exists():
        return ckpt.load_dataset(train_path), ckpt.load_dataset(eval_path)
    size = (cfg["data.size"], cfg["data.size"])
    if cfg["data.source"] == "synthetic":
        spec = cfg.correlation_spec()
        masks = cfg["data.masks"] or cfg["t.mode"] == "mask"
        train_ds = build_dataset(spec, cfg["data.n_train"], size, np.random.default_rng([cfg["seed"], 100]), masks)
        eval_ds = build_dataset(spec, cfg["data.n_eval"], size, np.random.default_rng([cfg["seed"], 101]), masks)
    else:
        if not cfg["data.image_dir"] or not cfg["data.labels_file"]:
            raise ConfigError("data.source = folder needs data.image_dir and data.labels_file")
        full = load_folder_dataset(cfg["data.image_dir"], cfg["data.labels_file"],
                                   cfg["data.masks_dir"] or None, size)
        perm = np.random.default_rng([cfg["seed"], 102]).permutation(len(full))
        n_eval = max(1, int(round(len(full) * cfg["data.eval_frac"])))
        train_ds, eval_ds = full.subset(np.sort(perm[n_eval:])), full.subset(np.sort(perm[:n_eval]))
    ckpt.save_dataset(train_ds, train_path)
    ckpt.save_dataset(eval_ds, eval_path)
    return train_ds, eval_ds


def _oracles(cfg: RunConfig, out: Path, train_ds):
    """Ground-truth factor predictors, trained once per run directory."""
    if train_ds.factors is None:
        return None
    path = out / "oracles.ovlm"
    if path.exists():
        return ckpt.load_oracles(path)
    # the oracle set is large and cheap to re-render, so only the fitted oracles are cached
    size = (cfg["data.size"], cfg["data.size"])
    data = build_dataset(cfg.correlation_spec(), cfg["eval.oracle_n"], size,
                         np.random.default_rng([cfg["seed"], 200]))
    oracles = fit_oracles(data, np.random.default_rng([cfg["seed"], 201]), cfg["eval.oracle_epochs"],
                          augment=cfg.spatial_config(), strict=cfg["eval.oracle_strict"])
    ckpt.save_oracles(oracles, path)
    return oracles


def _evaluate(cfg: RunConfig, run_dir: Path, train_ds, eval_ds, oracles) -> EvalReport:
    artifacts = ckpt.load_checkpoint(run_dir)
    report = full_report(artifacts, train_ds, eval_ds, oracles, cfg["seed"], cfg["eval.refs_per_source"],
                         cfg["eval.probe_hidden"], cfg["eval.probe_epochs"], cfg["eval.t_mode"])
    write_report(report, run_dir)
    return report


def _write_curve(artifacts, run_dir: Path):
    if artifacts.curve:
        write_curve_tsv(run_dir / "curves" / "probe_by_epoch.tsv", artifacts.curve)


def _grid(cfg: RunConfig, run_dir: Path, eval_ds, sources, references, path):
    artifacts = ckpt.load_checkpoint(run_dir)
    t_mode = "mask" if cfg["t.mode"] == "mask" else cfg["eval.t_mode"]
    spec = GridSpec(eval_ds.images[sources], eval_ds.images[references],
                    eval_ds.labels[sources], eval_ds.labels[references])
    col_masks = eval_ds.masks[references] if t_mode == "mask" else None
    render_grid(spec, artifacts.bundle, path, artifacts.bank.y_embed, t_mode, col_masks)


def _default_grid_indices(eval_ds, per_side: int = 4):
    """A few sources and one reference per class (or the first few images)."""
    labels = eval_ds.labels
    sources = list(range(min(per_side, len(labels))))
    refs = [int(np.flatnonzero(labels == k)[-1]) for k in range(eval_ds.num_classes) if (labels == k).any()]
    return sources, refs or sources


# commands ---------------------------------------------------------------------

def _cmd_synth_data(args, cfg):
    train_ds, eval_ds = _datasets(cfg, args.out)
    print(f"wrote {len(train_ds)} train and {len(eval_ds)} eval images to {args.out / 'data'}")


def _cmd_train(args, cfg):
    train_ds, _ = _datasets(cfg, args.out)
    tc = cfg.train_config()
    out = args.out
    if args.target == "stage2":
        stage1 = ckpt.load_checkpoint(out, stage="stage1")
        artifacts = train_stage2(stage1, train_ds, tc, out)
    else:
        variant = {"stage1": "full", "amortized": "amortized", "no-xcorr": "no_xcorr"}[args.target]
        if variant == "amortized":
            tc = replace(tc, probe_curve=True)
        artifacts = train_stage1(train_ds, tc, out, variant=variant)
        _write_curve(artifacts, out)
    print(f"{artifacts.stage} ({artifacts.variant}) written to {out / artifacts.stage}")


def _cmd_translate(args, cfg):
    _, eval_ds = _datasets(cfg, args.out)
    sources = _index_list(args.sources, len(eval_ds), "--sources")
    references = _index_list(args.references, len(eval_ds), "--references")
    if Path(args.name).name != args.name:
        raise UsageError("--name must be a plain file name")
    path = args.out / "translations" / args.name
    _grid(cfg, args.out, eval_ds, sources, references, path)
    print(f"wrote {path}")


def _cmd_evaluate(args, cfg):
    train_ds, eval_ds = _datasets(cfg, args.out)
    report = _evaluate(cfg, args.out, train_ds, eval_ds, _oracles(cfg, args.out, train_ds))
    sys.stdout.write(report.to_text())


def _curve_inputs(out: Path) -> dict:
    inputs = {}
    main = out / "curves" / "probe_by_epoch.tsv"
    if main.exists():
        inputs["latent optimization"] = main
    amort = out / "ablations" / "amortized" / "curves" / "probe_by_epoch.tsv"
    if amort.exists():
        inputs["amortized"] = amort
    return inputs


def _cmd_report(args, cfg):
    out = args.out
    _, eval_ds = _datasets(cfg, out)
    figures = out / "figures"
    written = []
    if (out / "stage2" / "model.ovlm").exists():
        sources, refs = _default_grid_indices(eval_ds)
        _grid(cfg, out, eval_ds, sources, refs, figures / "translation_grid.png")
        written.append(figures / "translation_grid.png")
    curves = _curve_inputs(out)
    if curves:
        written.append(emit_curves(curves, figures / "probe_curves.png", chance=1.0 / eval_ds.num_classes))
    report_json = out / "report.json"
    if report_json.exists():
        import json

        report = EvalReport.from_dict(json.loads(report_json.read_text(encoding="utf-8")))
        written += list(write_report(report, out))
    if not written:
        raise RuntimeError(f"nothing to report in {out}; train and evaluate first")
    for path in written:
        print(f"wrote {path}")


def _cmd_ablate(args, cfg):
    which = [w.strip() for w in args.only.split(",") if w.strip()]
    unknown = sorted(set(which) - set(ABLATIONS))
    if unknown:
        raise UsageError(f"--only: unknown ablations {unknown}; choose from {','.join(ABLATIONS)}")
    out = args.out
    train_ds, eval_ds = _datasets(cfg, out)
    oracles = _oracles(cfg, out, train_ds)
    tc = cfg.train_config()
    rows = []
    for name in which:
        run_dir = out / "ablations" / name
        if name != "no_adv":
            cfg.write_snapshot(run_dir / "config.snapshot")
        if name == "amortized":
            artifacts = train_stage1(train_ds, replace(tc, probe_curve=True), run_dir, variant="amortized")
            _write_curve(artifacts, run_dir)
        elif name == "no_xcorr":
            stage1 = train_stage1(train_ds, tc, run_dir, variant="no_xcorr")
            train_stage2(stage1, train_ds, tc, run_dir)
        else:
            no_adv = cfg.with_overrides(**{"loss.lambda_adv": 0.0})
            no_adv.write_snapshot(run_dir / "config.snapshot")
            # reuse the main stage 1 when it is the full model, so the pair differs only in stage 2
            stage1 = None
            if (out / "stage1" / "model.ovlm").exists():
                stage1 = ckpt.load_checkpoint(out, stage="stage1")
            if stage1 is None or stage1.variant != "full":
                stage1 = train_stage1(train_ds, tc)
            ckpt.save_checkpoint(stage1, run_dir)
            train_stage2(stage1, train_ds, no_adv.train_config(), run_dir)
        report = _evaluate(cfg, run_dir, train_ds, eval_ds, oracles)
        rows.append((name, report))
    lines = ["variant\tprobe_u\tprobe_eu\tleakage\tfrechet_mean\tdiversity\n"]
    for name, r in rows:
        vals = (r.probe_acc_y_from_u, r.probe_acc_y_from_eu, r.leakage_acc, r.frechet_mean, r.diversity)
        lines.append(name + "".join("\t" + ("nan" if v is None else f"{v:.6f}") for v in vals) + "\n")
    summary = out / "ablations" / "summary.tsv"
    summary.write_text("".join(lines), encoding="utf-8")
    sys.stdout.write("".join(lines))


COMMANDS = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "translate": _cmd_translate,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
    "ablate": _cmd_ablate,
}


def run_cli(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        if args.out is None:
            env = os.environ.get("OVERLORD_OUT")
            if not env:
                raise UsageError("no output directory: pass --out or set OVERLORD_OUT")
            args.out = Path(env)
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(args.threads)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        cfg = _load_config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # every other failure is a runtime failure
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
