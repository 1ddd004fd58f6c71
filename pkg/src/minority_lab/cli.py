"""Command-line entry point: world, train, sample, eval, ablate.

Exit codes: 0 success, 2 invalid input, 3 training diverged, 4 numerical
failure during sampling or evaluation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import xml.etree.ElementTree as ET
from dataclasses import asdict, fields
from pathlib import Path

from .conditioning import build_vocab
from .denoiser import TrainConfig, TrainingDiverged, base_prompt, load_checkpoint, make_analytic, save_checkpoint, \
    train_denoiser
from .evaluation import METRICS, IntegrationError, aggregate_report
from .objectives import NonFiniteObjective
from .samplers import SAMPLERS, SamplerConfig, read_run, run_sampler, with_overrides, write_run
from .schedule import SCHEDULE_KINDS, make_schedule
from .world import PRESETS, ToyWorld, load_world, make_world, save_world

log = logging.getLogger("minority_lab")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_NUMERIC = 0, 2, 3, 4

ABLATION_AXES = {
    "objective": [("unoptimized", "ddim", {}), ("naive", "minority", {"kind": "naive"}),
                  ("ours", "minority", {})],
    "init": [("default", "minority", {"init_mode": "default"}), ("gaussian", "minority", {"init_mode": "gaussian"}),
             ("word", "minority", {"init_mode": "word"})],
    "position": [("prefix", "minority", {"position": "prefix"}), ("postfix", "minority", {"position": "postfix"})],
    "tokens": [("m=1", "minority", {"m": 1}), ("m=2", "minority", {"m": 2}), ("m=4", "minority", {"m": 4})],
    "flaws": [("ours", "minority", {"kind": "ours"}), ("+cfg", "minority", {"kind": "flaw_cfg"}),
              ("+sg", "minority", {"kind": "flaw_sg"}), ("+cv", "minority", {"kind": "flaw_cv"}),
              ("+all", "minority", {"kind": "naive"})],
}
DEFAULT_METRICS = ("true_logp", "minority", "consistency", "precision_recall", "ibs")


class CLIError(Exception):
    def __init__(self, msg: str, code: int = EXIT_INPUT):
        super().__init__(msg)
        self.code = code


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CLIError(f"{what} not found: {path}")
    return p


# -- world ------------------------------------------------------------------------

def cmd_world(args) -> int:
    if args.spec:
        params = json.loads(_existing(args.spec, "world spec").read_text())
        relaxed = params.get("require_minority", True) is False
        world = make_world(params, require_minority=not relaxed)
    else:
        if args.preset not in PRESETS:
            raise CLIError(f"unknown preset {args.preset!r}; expected one of {sorted(PRESETS)}")
        world = PRESETS[args.preset]()
        relaxed = args.preset == "gaussian"
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_world(world, out, require_minority=not relaxed)
    if load_world(out).hash() != world.hash():
        raise CLIError("world file failed its round-trip check")
    print(f"world\t{out}\t{world.hash()}")
    return EXIT_OK


# -- train ------------------------------------------------------------------------

def cmd_train(args) -> int:
    world = load_world(_existing(args.world, "world file"))
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, dropout=args.dropout, seed=args.seed,
                      ema_decay=args.ema_decay, attribute_rate=args.attribute_rate, neutral_rate=args.neutral_rate)
    sched = make_schedule(args.T, args.schedule)
    vocab = build_vocab(world, seed=args.seed)
    try:
        model, report = train_denoiser(world, vocab, cfg, sched, progress=args.verbose)
    except TrainingDiverged as exc:
        out = Path(args.out).with_suffix(".report.json")
        out.write_text(json.dumps({"status": "diverged", "step": exc.step, "loss": str(exc.loss)}, indent=2))
        raise CLIError(str(exc), EXIT_DIVERGED) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = save_checkpoint(out, model, world, cfg, report)
    rep = {"status": "ok", "checkpoint": str(out), "checkpoint_sha256": digest, "world_hash": world.hash(),
           "train_config": asdict(cfg), **asdict(report)}
    rep_path = out.with_suffix(".report.json")
    rep_path.write_text(json.dumps(rep, indent=2, sort_keys=True))
    load_checkpoint(out)  # validate
    print(f"train\t{out}\tfinal_loss={report.final_loss:.6f}\tval_loss={report.val_loss:.6f}"
          f"\tnull_branch={report.null_branch_trained}")
    return EXIT_OK


# -- shared model / config plumbing -------------------------------------------------

def _load_model(args, world: ToyWorld, T: int):
    """Returns (model, description) for --checkpoint or --analytic."""
    if getattr(args, "checkpoint", None):
        path = _existing(args.checkpoint, "checkpoint")
        model, doc = load_checkpoint(path)
        if doc["world_hash"] != world.hash():
            raise CLIError("checkpoint was trained on a different world (hash mismatch)")
        if model.sched.T != T:
            raise CLIError(f"checkpoint schedule has T={model.sched.T}, config asks for T={T}")
        return model, {"kind": "trained", "path": str(path), "sha256": _sha(path.read_text())}
    if getattr(args, "analytic", False):
        model = make_analytic(world, make_schedule(T, args.schedule), bandwidth=args.bandwidth)
        return model, {"kind": "analytic", "bandwidth": args.bandwidth, "schedule": args.schedule, "T": T}
    raise CLIError("pass --checkpoint PATH or --analytic")


_CFG_FLAGS = {f.name: f for f in fields(SamplerConfig)}


def _sampler_config(args) -> SamplerConfig:
    base = {}
    if getattr(args, "config", None):
        base = json.loads(_existing(args.config, "config file").read_text())
        unknown = set(base) - set(_CFG_FLAGS)
        if unknown:
            raise CLIError(f"unknown sampler config keys {sorted(unknown)}")
    cfg = SamplerConfig(**base)
    over = {name: getattr(args, name, None) for name in _CFG_FLAGS}
    if getattr(args, "no_fallback", False):
        over["fallback"] = False
    if over.get("s_schedule") not in (None, "inverse"):
        over["s_schedule"] = int(over["s_schedule"])
    return with_overrides(cfg, **over)


def _conds(arg: str, world: ToyWorld) -> list[int]:
    if arg == "all":
        return list(range(world.n_conditions))
    conds = [int(c) for c in arg.split(",")]
    for c in conds:
        if not 0 <= c < world.n_conditions:
            raise CLIError(f"unknown condition {c}")
    return conds


def _default_word(world: ToyWorld, cond: int) -> str | None:
    """Attribute word of the condition's first minority component."""
    cands = sorted((k, w) for w, (c, k) in world.attribute_words.items() if c == cond)
    return cands[0][1] if cands else None


def _validate_run(rec_path: Path, n: int):
    rec = read_run(rec_path)
    if len(rec.samples) != n:
        raise CLIError(f"{rec_path}: wrote {len(rec.samples)} samples, expected {n}", EXIT_NUMERIC)


def _plot(world, cond, latents, path: Path, title: str):
    from .plotting import scatter_svg

    scatter_svg(world, cond, latents, path, title)
    ET.parse(path)  # must be well-formed XML


def _run_grid(model, world, rows, conds, n, out: Path, plot: bool, world_hash: str, model_desc: dict,
              nest: bool = True):
    records = []
    for label, sampler, cfg in rows:
        for c in conds:
            ccfg = cfg
            if ccfg.init_mode == "word" and ccfg.init_word is None:
                ccfg = with_overrides(ccfg, init_word=_default_word(world, c))
            rec = run_sampler(sampler, model, base_prompt(world, c), c, ccfg, n)
            if label != sampler:
                rec.extra["label"] = label
            sub = out / _safe(label) if nest else out
            rec_path, _ = write_run(rec, sub, world_hash=world_hash, model=model_desc)
            _validate_run(rec_path, n)
            if plot and world.d == 2:
                _plot(world, c, rec.latents, sub / f"{rec.method}_c{c}.svg", f"{label}, condition {c}")
            records.append(rec)
    return records


def _safe(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_=" else "_" for ch in label)


def _write_run_config(out: Path, doc: dict) -> str:
    text = json.dumps(doc, indent=2, sort_keys=True)
    (out / "run_config.json").write_text(text)
    return _sha(text)[:16]


# -- sample -----------------------------------------------------------------------

def cmd_sample(args) -> int:
    if args.sampler not in SAMPLERS:
        raise CLIError(f"unknown sampler {args.sampler!r}; expected one of {SAMPLERS}")
    world = load_world(_existing(args.world, "world file"))
    cfg = _sampler_config(args)
    model, desc = _load_model(args, world, cfg.T)
    conds = _conds(args.cond, world)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_cfg = {"verb": "sample", "world": args.world, "world_hash": world.hash(), "model": desc,
               "sampler": args.sampler, "sampler_config": cfg.to_dict(), "conditions": conds, "n": args.n,
               "seed": cfg.seed, "plot": not args.no_plot}
    tag = _write_run_config(out, run_cfg)
    rows = [(args.sampler, args.sampler, cfg)]
    _run_grid(model, world, rows, conds, args.n, out, not args.no_plot, world.hash(), desc, nest=False)
    print(f"sample\t{out}\t{args.sampler}\tconditions={len(conds)}\tn={args.n}\trun_config={tag}")
    return EXIT_OK


# -- eval -------------------------------------------------------------------------

def _parse_metrics(arg: str | None, has_model: bool) -> tuple[str, ...]:
    if arg is None:
        return DEFAULT_METRICS + (("bpd",) if has_model else ())
    ms = tuple(m.strip() for m in arg.split(",") if m.strip())
    bad = set(ms) - set(METRICS)
    if bad:
        raise CLIError(f"unknown metrics {sorted(bad)}; expected a subset of {METRICS}")
    return ms


def _report(records, world, model, metrics, args, out: Path, prefix: str, basis: dict) -> Path:
    report = aggregate_report(records, world, model, metrics=metrics, k=args.k, n_boot=args.bootstrap,
                              seed=args.seed)
    tag = f"{prefix}_{_sha(_canon(basis))[:12]}"
    csv_path, json_path = report.write(out, tag)
    json.loads(json_path.read_text())
    sys.stdout.write(report.to_csv())
    return csv_path


def cmd_eval(args) -> int:
    world = load_world(_existing(args.world, "world file"))
    rec_paths = []
    for d in args.runs:
        rec_paths += sorted(_existing(d, "run directory").rglob("*.jsonl"))
    if not rec_paths:
        raise CLIError("no run records (*.jsonl) found")
    records = [read_run(p) for p in rec_paths]
    model, desc = None, None
    if args.checkpoint or args.analytic:
        model, desc = _load_model(args, world, records[0].config.T)
    metrics = _parse_metrics(args.metrics, model is not None)
    if "bpd" in metrics and model is None:
        raise CLIError("metric bpd needs --checkpoint or --analytic")
    for rec in records:
        rec.extra.setdefault("label", rec.method)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    basis = {"records": [_sha(p.read_text()) for p in rec_paths], "metrics": list(metrics), "model": desc,
             "world_hash": world.hash(), "k": args.k, "bootstrap": args.bootstrap, "seed": args.seed}
    path = _report(records, world, model, metrics, args, out, "eval", basis)
    if not args.no_plot and world.d == 2:
        for rec in records:
            _plot(world, rec.cond, rec.latents, out / f"scatter_{_safe(rec.extra['label'])}_c{rec.cond}.svg",
                  f"{rec.extra['label']}, condition {rec.cond}")
    log.info("report written to %s", path)
    return EXIT_OK


# -- ablate -----------------------------------------------------------------------

def cmd_ablate(args) -> int:
    if args.axis not in ABLATION_AXES:
        raise CLIError(f"unknown ablation axis {args.axis!r}; expected one of {sorted(ABLATION_AXES)}")
    world = load_world(_existing(args.world, "world file"))
    base = _sampler_config(args)
    model, desc = _load_model(args, world, base.T)
    conds = _conds(args.cond, world)
    metrics = _parse_metrics(args.metrics, False)
    if "bpd" in metrics and model is None:
        raise CLIError("metric bpd needs a model")
    rows = [(label, sampler, with_overrides(base, **over)) for label, sampler, over in ABLATION_AXES[args.axis]]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_cfg = {"verb": "ablate", "axis": args.axis, "world": args.world, "world_hash": world.hash(), "model": desc,
               "rows": [{"label": lb, "sampler": s, "sampler_config": c.to_dict()} for lb, s, c in rows],
               "conditions": conds, "n": args.n, "seed": base.seed, "metrics": list(metrics)}
    _write_run_config(out, run_cfg)
    records = _run_grid(model, world, rows, conds, args.n, out, not args.no_plot, world.hash(), desc)
    for rec in records:
        rec.extra.setdefault("label", rec.method)
    _report(records, world, model, metrics, args, out, f"ablate_{args.axis}", run_cfg)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def _add_model_flags(p, required_T=True):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--checkpoint", help="trained model checkpoint (JSON)")
    g.add_argument("--analytic", action="store_true", help="use the exact analytic denoiser of the world")
    p.add_argument("--bandwidth", type=float, default=0.1, help="analytic conditioning kernel bandwidth")
    p.add_argument("--schedule", choices=SCHEDULE_KINDS, default="cosine")


def _add_sampler_flags(p):
    p.add_argument("--config", help="JSON file with sampler config values (flags override it)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--T", type=int)
    p.add_argument("--w", type=float, help="guidance scale")
    p.add_argument("--N", type=int, help="optimise every N steps")
    p.add_argument("--K", type=int, help="inner Adam iterations")
    p.add_argument("--lr", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--s-schedule", dest="s_schedule", help="'inverse' or a fixed step")
    p.add_argument("--kind", help="objective kind")
    p.add_argument("--init-mode", dest="init_mode", choices=("default", "gaussian", "word"))
    p.add_argument("--init-word", dest="init_word")
    p.add_argument("--m", type=int, help="number of placeholder tokens")
    p.add_argument("--position", choices=("prefix", "postfix"))
    p.add_argument("--no-fallback", action="store_true", help="reuse the latest optimised token between updates")
    p.add_argument("--sgms-lr", dest="sgms_lr", type=float)
    p.add_argument("--sgms-s", dest="sgms_s", type=int)
    p.add_argument("--tau1", type=float)
    p.add_argument("--tau2", type=float)
    p.add_argument("--noise-scale", dest="noise_scale", type=float)
    p.add_argument("--batch", type=int, help="group size of the diversity sampler")
    p.add_argument("--cond", default="all", help="'all' or comma-separated condition ids")
    p.add_argument("--n", type=int, default=100, help="samples per condition")


def _add_report_flags(p):
    p.add_argument("--metrics", help=f"comma-separated subset of {','.join(METRICS)}")
    p.add_argument("--k", type=int, default=5, help="neighbourhood size for precision/recall")
    p.add_argument("--bootstrap", type=int, default=1000, help="bootstrap resamples for half-widths")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="minority-lab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("world", help="write a validated world JSON")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset", help=f"one of {sorted(PRESETS)}")
    g.add_argument("--spec", help="world description JSON to validate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_world)

    p = sub.add_parser("train", help="train the small denoiser")
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, required=True)
    d = TrainConfig()
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--dropout", type=float, default=d.dropout)
    p.add_argument("--ema-decay", type=float, default=d.ema_decay)
    p.add_argument("--attribute-rate", type=float, default=d.attribute_rate)
    p.add_argument("--neutral-rate", type=float, default=d.neutral_rate)
    p.add_argument("--T", type=int, default=50)
    p.add_argument("--schedule", choices=SCHEDULE_KINDS, default="cosine")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples and write run records")
    p.add_argument("--world", required=True)
    p.add_argument("--sampler", required=True, help=f"one of {SAMPLERS}")
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true")
    _add_model_flags(p)
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="aggregate metrics over run directories")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="seed for reference data and bootstrap")
    p.add_argument("--no-plot", action="store_true")
    _add_model_flags(p)
    _add_report_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid with paired seeds")
    p.add_argument("--axis", required=True, help=f"one of {sorted(ABLATION_AXES)}")
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true")
    _add_model_flags(p)
    _add_sampler_flags(p)
    _add_report_flags(p)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (IntegrationError, NonFiniteObjective) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
