"""Command-line entry point: prepare, train, evaluate, ablate (and synth for
a quick synthetic log).

Every command takes ``--seed``, ``--out`` and ``--config`` and writes a JSON
run manifest into its output directory before doing any work.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (LoadFormat, PopularityProfile, chrono_split, dataset_digest, dedup_and_kcore,
                   load_dataset, load_interactions, save_dataset)
from .errors import CheckpointError, ConfigError, DataError, FairDiffError, InvalidHyperparameter, UndefinedMetric
from .metrics import CUTOFFS, baseline_mostpop, baseline_random, fairness_accuracy, tradeoff
from .numerics import SeededRng
from .synthetic import write_events, zipf_events
from .trainer import (MAX_WEAK_EPOCH, RANGES, Checkpoint, TrainConfig, assemble_ag, format_value,
                      load_checkpoint, parse_value, recommend, save_checkpoint, train_diffrec, train_joint,
                      validate_config)

log = logging.getLogger("fairdiff")

CONFIG_FIELDS = [f.name for f in dataclasses.fields(TrainConfig)]

# ablation variant -> the single config knob it changes
VARIANTS = {
    "no_d1": ("use_d1", "false"),
    "no_d2": ("use_d2", "false"),
    "no_d3": ("use_d3", "false"),
    "no_tail_bonus": ("eta", "0.0"),
    "no_ag": ("constant_w", "1.0"),
    "no_pop": ("lambda_pop", "0.0"),
}
EXTRA_VARIANTS = ("full",)

BASELINE_SEED_KEY = 7


# config ------------------------------------------------------------------------

def parse_config(path=None, overrides=None, unsafe_ranges=False, base=None):
    """Resolve a TrainConfig from a key=value file plus overrides.

    Lines are ``key = value``; ``#`` starts a comment. Overrides (a mapping of
    key to text) are applied after the file. Unknown keys and unparsable
    values raise ConfigError naming the key and where it came from.
    """
    cfg = base or TrainConfig()
    updates = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigError(f"{path}: cannot read config ({exc})") from None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            updates[key] = (value, f"{path}:{lineno}")
    for key, value in (overrides or {}).items():
        updates[key] = (value, f"--{key}")

    for key, (value, where) in updates.items():
        if key not in CONFIG_FIELDS:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        try:
            cfg = cfg.replace(**{key: parse_value(key, value)})
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {value.strip()!r} ({exc})") from None
    try:
        return validate_config(cfg, unsafe_ranges)
    except InvalidHyperparameter as exc:
        raise ConfigError(str(exc)) from None


def config_text(cfg: TrainConfig):
    return "".join(f"{k}={v}\n" for k, v in cfg.to_dict().items())


def _overrides(args):
    out = {name: getattr(args, "cfg_" + name) for name in CONFIG_FIELDS
           if getattr(args, "cfg_" + name, None) is not None}
    if getattr(args, "seed", None) is not None:
        out["seed"] = str(args.seed)
    return out


# manifest ---------------------------------------------------------------------

def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """JSON record of a command: resolved config, seed, paths, dataset hash."""

    def __init__(self, out_dir, command, argv, seed, config=None, inputs=None, dataset_hash=None):
        self.path = Path(out_dir) / "manifest.json"
        self.data = dict(command=command, argv=list(argv), version=__version__, seed=seed,
                         config=config, inputs=inputs or {}, outputs={}, dataset_sha256=dataset_hash,
                         started=_now(), finished=None, status="running")
        self.write()

    def write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def output(self, name, path):
        self.data["outputs"][name] = str(path)

    def finish(self, status="ok"):
        self.data["finished"] = _now()
        self.data["status"] = status
        self.write()


# tsv writers ------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if np.isnan(v):
            return "nan"
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.6f}"
    return str(v)


def write_tsv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(v) for v in row) + "\n")
    return path


EPOCH_COLUMNS = ("epoch", "L_base", "L_AG", "L_pop", "Recall@20", "wall")
STEP_COLUMNS = ("step", "epoch", "L_base", "L_AG", "L_pop", "L_pop_contrib", "L_total", "w_mean",
                "feat_d1_maxabs", "feat_d2_maxabs", "feat_d3_maxabs")


def epoch_rows(history):
    return [(r["epoch"], r["base"], r["ag"], r["pop"], r["recall"], r["wall"]) for r in history]


def step_rows(steps):
    return [(i, s["epoch"], s["base"], s["ag"], s["pop"], s["pop_contrib"], s["total"],
             s.get("w_mean", float("nan")), s.get("feat_d1_maxabs", float("nan")),
             s.get("feat_d2_maxabs", float("nan")), s.get("feat_d3_maxabs", float("nan")))
            for i, s in enumerate(steps, start=1)]


def write_logs(out, result, prefix=""):
    a = write_tsv(out / f"{prefix}train_log.tsv", EPOCH_COLUMNS, epoch_rows(result.history))
    b = write_tsv(out / f"{prefix}steps.tsv", STEP_COLUMNS, step_rows(result.steps))
    return a, b


# commands ---------------------------------------------------------------------

def cmd_synth(args):
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    events = zipf_events(args.users, args.items, args.per_user, args.exponent, seed=seed)
    write_events(events, out)
    print(f"wrote {len(events)} events to {out}")
    return 0


def cmd_prepare(args):
    out = Path(args.out)
    man = RunManifest(out, "prepare", args.argv, args.seed,
                      inputs=dict(raw=str(args.input), sep=args.sep, min_weight=args.min_weight, kcore=args.kcore))
    sep = args.sep.encode().decode("unicode_escape")
    try:
        events = load_interactions(args.input, LoadFormat(sep=sep, min_weight=args.min_weight))
    except OSError as exc:
        raise DataError(f"{args.input}: cannot read interactions ({exc})") from None
    ds = chrono_split(dedup_and_kcore(events, args.kcore))
    save_dataset(ds, out)
    man.data["dataset_sha256"] = dataset_digest(out)
    man.output("dataset", out)
    man.finish()
    print(f"{ds.n_users} users, {ds.n_items} items, {ds.n_interactions} interactions -> {out}")
    return 0


def _load_data(path):
    ds = load_dataset(path)
    return ds, PopularityProfile.from_dataset(ds)


def _check_arch(ckpt: Checkpoint, cfg: TrainConfig, ds, what):
    if ckpt.n_items != ds.n_items:
        raise CheckpointError(f"{what} checkpoint scores {ckpt.n_items} items, dataset has {ds.n_items}")
    have = ckpt.train_config()
    if (have.dims, have.emb_dim) != (cfg.dims, cfg.emb_dim):
        raise CheckpointError(f"{what} checkpoint has dims={format_value(have.dims)} emb_dim={have.emb_dim}, "
                              f"config asks for dims={format_value(cfg.dims)} emb_dim={cfg.emb_dim}")


def _base_and_weak(args, cfg, ds, out, man):
    """Resolve the DiffRec base and the weak checkpoint: given paths, or train here."""
    if args.base or args.weak:
        if not (args.base and args.weak):
            raise ConfigError("--base and --weak must be given together")
        base, weak = load_checkpoint(args.base), load_checkpoint(args.weak)
        _check_arch(base, cfg, ds, "base")
        _check_arch(weak, cfg, ds, "weak")
        return base, weak
    if cfg.e_weak > min(cfg.epochs, MAX_WEAK_EPOCH):
        raise ConfigError(f"e_weak={cfg.e_weak} needs at least that many DiffRec epochs (epochs={cfg.epochs})")
    res = train_diffrec(ds, cfg)
    if cfg.e_weak not in res.epoch_checkpoints:
        raise ConfigError(f"DiffRec stopped after {len(res.history)} epochs, before e_weak={cfg.e_weak}")
    weak = res.epoch_checkpoints[cfg.e_weak]
    man.output("base", save_checkpoint(res.best, out / "base.ckpt"))
    man.output("weak", save_checkpoint(weak, out / "weak.ckpt"))
    write_logs(out, res, prefix="base_")
    return res.best, weak


def cmd_train(args):
    out = Path(args.out)
    overrides = _overrides(args)
    overrides["model"] = args.model
    cfg = parse_config(args.config, overrides, args.unsafe_ranges)
    man = RunManifest(out, "train", args.argv, cfg.seed, cfg.to_dict(),
                      inputs=dict(data=str(args.data), config=args.config, base=args.base, weak=args.weak),
                      dataset_hash=dataset_digest(args.data))
    ds, profile = _load_data(args.data)
    (out / "config.txt").write_text(config_text(cfg), encoding="utf-8")

    if cfg.model == "diffrec":
        res = train_diffrec(ds, cfg)
        man.output("checkpoint", save_checkpoint(res.best, out / "model.ckpt"))
        if cfg.e_weak in res.epoch_checkpoints:
            man.output("weak", save_checkpoint(res.epoch_checkpoints[cfg.e_weak], out / "weak.ckpt"))
        write_logs(out, res)
        best = res.best
    else:
        base, weak = _base_and_weak(args, cfg, ds, out, man)
        if cfg.model == "ag":
            best = assemble_ag(base, weak, cfg)
        else:
            res = train_joint(ds, base, weak, cfg, profile)
            write_logs(out, res)
            best = res.best
        man.output("checkpoint", save_checkpoint(best, out / "model.ckpt"))
    man.finish()
    print(f"{cfg.model}: best epoch {best.epoch} -> {out / 'model.ckpt'}")
    return 0


def _parse_ks(text):
    try:
        ks = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise ConfigError(f"--k needs positive cutoffs, got {text!r}")
    return ks


def _named_checkpoints(entries):
    named, seen = [], set()
    for entry in entries or []:
        name, sep, path = entry.partition("=")
        if not sep:
            path, name = entry, None
        ckpt = load_checkpoint(path)
        name = name or ckpt.config.get("model", Path(path).stem)
        base, i = name, 2
        while name in seen:
            name, i = f"{base}_{i}", i + 1
        seen.add(name)
        named.append((name, ckpt, path))
    return named


def _tradeoff_rows(reports, base_name, ks):
    if base_name not in reports:
        raise ConfigError(f"--tradeoff names {base_name!r}, evaluated models are {sorted(reports)}")
    base = reports[base_name]
    rows = []
    for name, rep in reports.items():
        if name == base_name:
            continue
        for k in ks:
            for metric in ("Gini", "APLT"):
                try:
                    t = tradeoff(metric, base.get(metric, k), rep.get(metric, k),
                                 base.get("NDCG", k), rep.get("NDCG", k)).value
                except UndefinedMetric as exc:
                    log.warning("T_%s@%d for %s undefined: %s", metric, k, name, exc)
                    t = float("nan")
                rows.append((name, k, f"T_{metric}", t))
    return rows


def render_pretty(rows):
    """Aligned text table: one line per model, one column per metric@K."""
    models, cols, cells = [], [], {}
    for model, k, metric, value in rows:
        col = f"{metric}@{k}"
        if model not in models:
            models.append(model)
        if col not in cols:
            cols.append(col)
        cells[model, col] = _fmt(value)
    header = ["model"] + cols
    table = [header] + [[m] + [cells.get((m, c), "") for c in cols] for m in models]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in table)


def evaluate_models(ds, profile, named, ks, baselines=(), seed=None):
    """MetricsReports keyed by model name, checkpoints first then baselines."""
    for name, ckpt, _ in named:
        if ckpt.n_items != ds.n_items:
            raise CheckpointError(f"checkpoint {name!r} scores {ckpt.n_items} items, dataset has {ds.n_items}")
    kmax = max(ks)
    if kmax > ds.n_items:
        raise ConfigError(f"cutoff {kmax} exceeds catalog size {ds.n_items}")
    mask = (ds.train + ds.val).toarray() > 0
    tail = profile.tail
    reports = {}
    for name, ckpt, _ in named:
        lists = recommend(ds, ckpt, tail.astype(np.float64), kmax, seed)
        reports[name] = fairness_accuracy(lists, ds.test, tail, ds.n_items, ks, model=name)
    for b in baselines:
        if b == "random":
            rng = SeededRng(0 if seed is None else seed).child(BASELINE_SEED_KEY)
            lists = baseline_random(rng, mask, kmax).items
        elif b == "mostpop":
            lists = baseline_mostpop(profile.counts, mask, kmax).items
        else:
            raise ConfigError(f"unknown baseline {b!r}; valid: random, mostpop")
        reports[b] = fairness_accuracy(lists, ds.test, tail, ds.n_items, ks, model=b)
    return reports


def write_reports(out, ds, reports: dict, extra_rows=()):
    rows = [row for rep in reports.values() for row in rep.rows()] + list(extra_rows)
    report = write_tsv(out / "report.tsv", ("model", "K", "metric", "value"), rows)
    per_user = []
    for rep in reports.values():
        for (k, metric), vec in sorted(rep.per_user.items()):
            per_user.extend((rep.model, ds.user_ids[u], k, metric, v) for u, v in zip(rep.users, vec))
    users = write_tsv(out / "per_user.tsv", ("model", "user", "K", "metric", "value"), per_user)
    return rows, report, users


def cmd_evaluate(args):
    out = Path(args.out)
    ks = _parse_ks(args.k)
    baselines = [b.strip() for b in (args.baselines or "").split(",") if b.strip()]
    if not args.checkpoint and not baselines:
        raise ConfigError("nothing to evaluate: give --checkpoint and/or --baselines")
    man = RunManifest(out, "evaluate", args.argv, args.seed,
                      inputs=dict(data=str(args.data), checkpoints=args.checkpoint or [], k=list(ks),
                                  baselines=baselines, tradeoff=args.tradeoff),
                      dataset_hash=dataset_digest(args.data))
    ds, profile = _load_data(args.data)
    named = _named_checkpoints(args.checkpoint)
    man.data["config"] = {name: ckpt.config for name, ckpt, _ in named}
    man.write()
    reports = evaluate_models(ds, profile, named, ks, baselines, args.seed)
    extra = _tradeoff_rows(reports, args.tradeoff, ks) if args.tradeoff else []
    rows, report, users = write_reports(out, ds, reports, extra)
    man.output("report", report)
    man.output("per_user", users)
    man.finish()
    if args.pretty:
        print(render_pretty(rows))
    else:
        print(f"wrote {report}")
    return 0


ABLATION_COLUMNS = ("variant", "NDCG", "Gini", "T_Gini", "APLT", "T_APLT")


def variant_config(cfg: TrainConfig, variant):
    if variant == "full":
        return cfg
    key, value = VARIANTS[variant]
    # the knob's "disabled" value may sit outside the tuning range on purpose
    return parse_config(None, {key: value}, unsafe_ranges=True, base=cfg)


def _parse_variants(text):
    names = [v.strip() for v in text.split(",") if v.strip()]
    valid = list(VARIANTS) + list(EXTRA_VARIANTS)
    bad = [v for v in names if v not in valid]
    if bad:
        raise ConfigError(f"unknown ablation variant(s) {bad}; valid names: {', '.join(valid)}")
    return names


def cmd_ablate(args):
    out = Path(args.out)
    variants = _parse_variants(args.variants)
    k = _parse_ks(args.k)[0]
    cfg = parse_config(args.config, {**_overrides(args), "model": "a2g"}, args.unsafe_ranges)
    man = RunManifest(out, "ablate", args.argv, cfg.seed, cfg.to_dict(),
                      inputs=dict(data=str(args.data), config=args.config, variants=variants, k=k),
                      dataset_hash=dataset_digest(args.data))
    ds, profile = _load_data(args.data)
    (out / "config.txt").write_text(config_text(cfg), encoding="utf-8")

    base, weak = _base_and_weak(args, cfg, ds, out, man)
    reports = evaluate_models(ds, profile, [("diffrec", base, None)], (k,), seed=cfg.seed)
    vdir = out / "variants"
    vdir.mkdir(parents=True, exist_ok=True)
    for name in variants:
        vcfg = variant_config(cfg, name)
        (vdir / f"{name}.config.txt").write_text(config_text(vcfg), encoding="utf-8")
        res = train_joint(ds, base, weak, vcfg, profile)
        write_logs(vdir, res, prefix=f"{name}.")
        man.output(name, save_checkpoint(res.best, vdir / f"{name}.ckpt"))
        reports.update(evaluate_models(ds, profile, [(name, res.best, None)], (k,), seed=cfg.seed))

    base_rep = reports["diffrec"]
    rows = [("diffrec", base_rep.get("NDCG", k), base_rep.get("Gini", k), "-", base_rep.get("APLT", k), "-")]
    for name in variants:
        rep = reports[name]
        t = {}
        for metric in ("Gini", "APLT"):
            try:
                t[metric] = tradeoff(metric, base_rep.get(metric, k), rep.get(metric, k),
                                     base_rep.get("NDCG", k), rep.get("NDCG", k)).value
            except UndefinedMetric:
                t[metric] = float("nan")
        rows.append((name, rep.get("NDCG", k), rep.get("Gini", k), t["Gini"], rep.get("APLT", k), t["APLT"]))
    table = write_tsv(out / "ablation.tsv", ABLATION_COLUMNS, rows)
    man.output("ablation", table)
    man.finish()
    if args.pretty:
        print(render_pretty([(r[0], k, c, v) for r in rows for c, v in zip(ABLATION_COLUMNS[1:], r[1:])
                             if v != "-"]))
    else:
        print(f"wrote {table}")
    return 0


# parser ------------------------------------------------------------------------

def _add_common(p, out_help):
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config file)")
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--config", default=None, help="key=value config file")


def _add_config_flags(p, skip=("seed", "model")):
    g = p.add_argument_group("config overrides", "any config key; applied after --config")
    for name in CONFIG_FIELDS:
        if name in skip:
            continue
        flags = [f"--{name}"]
        if "_" in name:
            flags.append(f"--{name.replace('_', '-')}")
        rng = RANGES.get(name)
        hint = f" (range [{rng[0]}, {rng[1]}])" if rng else ""
        g.add_argument(*flags, dest="cfg_" + name, default=None, metavar="VALUE",
                       help=f"default {format_value(getattr(TrainConfig, name, None))}{hint}")
    p.add_argument("--unsafe-ranges", action="store_true", help="allow values outside the tuning ranges")


def build_parser():
    parser = argparse.ArgumentParser(prog="fairdiff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="dedup, k-core filter and split a raw interaction log")
    p.add_argument("input", help="user<TAB>item<TAB>timestamp[<TAB>weight] file")
    p.add_argument("--sep", default="\\t", help="field separator (default tab)")
    p.add_argument("--min-weight", type=float, default=None, help="drop rows with weight below this")
    p.add_argument("--kcore", type=int, default=5)
    _add_common(p, "dataset directory")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train DiffRec, AG-DiffRec or A2G-DiffRec")
    p.add_argument("--data", required=True, help="prepared dataset directory")
    p.add_argument("--model", choices=("diffrec", "ag", "a2g"), default="a2g")
    p.add_argument("--base", default=None, help="trained DiffRec checkpoint (ag/a2g)")
    p.add_argument("--weak", default=None, help="early DiffRec checkpoint used as the weak model (ag/a2g)")
    _add_common(p, "run directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="accuracy and fairness report for checkpoints and baselines")
    p.add_argument("--data", required=True, help="prepared dataset directory")
    p.add_argument("--checkpoint", action="append", metavar="[NAME=]PATH",
                   help="checkpoint to evaluate; repeatable")
    p.add_argument("--k", default=",".join(map(str, CUTOFFS)), help="cutoffs (default 10,20,50,100)")
    p.add_argument("--baselines", default="", help="comma list from: random, mostpop")
    p.add_argument("--tradeoff", default=None, metavar="NAME",
                   help="add T_Gini and T_APLT rows against this evaluated model")
    p.add_argument("--pretty", action="store_true", help="print an aligned table")
    _add_common(p, "report directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train A2G variants with one component removed")
    p.add_argument("--data", required=True, help="prepared dataset directory")
    p.add_argument("--variants", default=",".join(VARIANTS),
                   help=f"comma list from: {', '.join(list(VARIANTS) + list(EXTRA_VARIANTS))}")
    p.add_argument("--k", default="50", help="cutoff for the table (default 50)")
    p.add_argument("--base", default=None, help="trained DiffRec checkpoint")
    p.add_argument("--weak", default=None, help="weak checkpoint")
    p.add_argument("--pretty", action="store_true", help="print an aligned table")
    _add_common(p, "ablation directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="write a synthetic Zipf-popularity interaction log")
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--items", type=int, default=200)
    p.add_argument("--per-user", type=int, default=20)
    p.add_argument("--exponent", type=float, default=1.2)
    _add_common(p, "output file")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FairDiffError as exc:
        print(f"fairdiff {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
