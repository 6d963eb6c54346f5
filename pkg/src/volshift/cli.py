"""Command-line entry point: ``volshift <subcommand> [options]``.

Every command resolves a :class:`RunConfig` from defaults, an optional
``--preset``, an optional ``--config`` JSON file and finally command-line
flags (including generic ``--set section.key=value`` overrides), and echoes
the resolved config next to its outputs as ``config.json``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from volshift.cycletrain import CycleTrainConfig, loss_history_csv, train_cyclegan, translate_volume
from volshift.domainstats import (
    compute_head_mask,
    delta_js,
    histogram_match,
    nearest_reference,
    zscore_normalize,
)
from volshift.errors import ConfigError, DataError, NumericalError, VolshiftError
from volshift.evalkit import ExperimentConfig, dice, gap_recovery, preprocess, run_experiment_matrix
from volshift.netarch import (
    DiscriminatorConfig,
    GeneratorConfig,
    UNetConfig,
    build_discriminator,
    build_generator,
    build_unet,
    load_params,
    save_params,
)
from volshift.segtrain import SegTrainConfig, binarize, segment_volume, train_segmenter
from volshift.synthgen import default_specs, generate_dataset, subject_seed
from volshift.volio import DomainSet, Volume, load_labels, load_volume, save_volume, write_label_nifti
from volshift.voltensor.gradcheck import run_suite

log = logging.getLogger("volshift")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

_EXPERIMENT_KEYS = ("n_folds", "n_val", "folds_to_run", "seg_window", "seg_stride", "translate_tile",
                    "hm_levels", "hm_points", "bins", "empty_dice")


def default_sections() -> dict[str, dict[str, Any]]:
    exp = ExperimentConfig().to_dict()
    return {
        "synth": {"domains": 3, "subjects": 20, "extent": 64, "format": "vvol"},
        "jsdiv": {"bins": 128, "mode": "inter", "zscore": True, "channel": 0},
        "histmatch": {"levels": 1024, "match_points": 7, "bins": 128},
        "train-cyclegan": asdict(CycleTrainConfig()),
        "train-seg": asdict(SegTrainConfig()),
        "adapt": {"tile": None, "overlap": 8},
        "segment": {"window": 32, "stride": 16, "threshold": 0.5},
        "evaluate": {"empty_dice": 1.0},
        "gradcheck": {"seeds": 5, "tol": 1e-4, "h": 1e-3},
        "experiment": {k: exp[k] for k in _EXPERIMENT_KEYS},
    }


# hyperparameters pinned by ``--preset desk`` (toy scale used by the acceptance tests)
DESK_PRESET: dict[str, dict[str, Any]] = {
    "synth": {"domains": 2, "subjects": 12, "extent": 64},
    "train-cyclegan": {"epochs": 20, "steps_per_epoch": 50, "base_filters": 8, "n_resblocks": 2,
                       "patch_size": 16, "disc_filters": 8, "w_cyc": 10.0, "w_id": 5.0},
    "train-seg": {"epochs": 15, "batches_per_epoch": 20, "batch_size": 8, "patch_size": 16, "base_filters": 8,
                  "lr": 1e-3, "val_window": 32, "val_stride": 32},
    "experiment": {"n_folds": 4, "n_val": 3, "folds_to_run": [0], "seg_window": 32, "seg_stride": 16,
                   "translate_tile": 16},
}
PRESETS = {"desk": DESK_PRESET}


class RunConfig:
    """Resolved parameters of one command invocation (sections of flat key/value maps)."""

    def __init__(self, command: str, seed: int = 0, threads: int | None = None, preset: str | None = None):
        self.command, self.seed, self.threads, self.preset = command, seed, threads, preset
        self.sections = default_sections()
        # the master seed drives every trainer unless a section overrides it
        self.sections["train-cyclegan"]["seed"] = seed
        self.sections["train-seg"]["seed"] = seed

    def update(self, overrides: dict[str, dict[str, Any]], origin: str) -> None:
        for sec, vals in overrides.items():
            if sec not in self.sections:
                raise ConfigError(f"{origin}: unknown config section {sec!r}")
            if not isinstance(vals, dict):
                raise ConfigError(f"{origin}: section {sec!r} must be an object")
            for k, v in vals.items():
                if k not in self.sections[sec]:
                    raise ConfigError(f"{origin}: unknown key {sec}.{k}")
                self.sections[sec][k] = _coerce(self.sections[sec][k], v, f"{sec}.{k}")

    def set(self, sec: str, key: str, value: Any) -> None:
        self.update({sec: {key: value}}, "command line")

    def __getitem__(self, sec: str) -> dict[str, Any]:
        return self.sections[sec]

    def to_dict(self) -> dict:
        return {"command": self.command, "seed": self.seed, "threads": self.threads, "preset": self.preset,
                "sections": copy.deepcopy(self.sections)}

    def cycle(self) -> CycleTrainConfig:
        return CycleTrainConfig(**self.sections["train-cyclegan"])

    def seg(self) -> SegTrainConfig:
        return SegTrainConfig(**self.sections["train-seg"])

    def experiment(self) -> ExperimentConfig:
        e = dict(self.sections["experiment"])
        if e["folds_to_run"] is not None:
            e["folds_to_run"] = tuple(e["folds_to_run"])
        return ExperimentConfig(seg=self.seg(), cyc=self.cycle(), seed=self.seed, **e)


def _coerce(default: Any, value: Any, name: str) -> Any:
    if default is None or value is None:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, (list, tuple)):
            return list(json.loads(value) if isinstance(value, str) else value)
        return type(default)(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot use {value!r} (expected {type(default).__name__})") from None


def _parse_set(item: str) -> tuple[str, str, Any]:
    if "=" not in item or "." not in item.split("=", 1)[0]:
        raise ConfigError(f"--set expects section.key=value, got {item!r}")
    lhs, rhs = item.split("=", 1)
    sec, key = lhs.split(".", 1)
    try:
        val = json.loads(rhs)
    except json.JSONDecodeError:
        val = rhs
    return sec, key, val


# ----------------------------------------------------------------------------
# I/O helpers


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_domain(path: str | Path, name: str | None = None) -> DomainSet:
    """All ``*.vvol`` / ``*.nii`` volumes in a directory (sorted), with ``<stem>_labels.nii`` attached."""
    d = Path(path)
    if not d.is_dir():
        raise DataError(f"domain directory not found: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix in (".vvol", ".nii") and not p.stem.endswith("_labels"))
    if not files:
        raise DataError(f"no volumes in {d}")
    vols = []
    for p in files:
        v = load_volume(p)
        lab = p.with_name(f"{p.stem}_labels.nii")
        if lab.exists():
            v.labels = load_labels(lab)
        v.provenance = f"{d.name}/{p.stem}"
        vols.append(v)
    return DomainSet(name or d.name, vols)


def save_network(out_dir: Path, name: str, net) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.vsck").write_bytes(save_params(net))
    _dump(out_dir / f"{name}.json", {"kind": net.kind, "cfg": asdict(net.cfg)})


def load_network(ckpt: str | Path):
    ckpt = Path(ckpt)
    meta_path = ckpt.with_suffix(".json")
    if not meta_path.exists():
        raise DataError(f"missing architecture sidecar {meta_path}")
    meta = json.loads(meta_path.read_text())
    builders = {"generator": (GeneratorConfig, build_generator), "discriminator": (DiscriminatorConfig, build_discriminator),
                "unet": (UNetConfig, build_unet)}
    if meta.get("kind") not in builders:
        raise DataError(f"unknown network kind {meta.get('kind')!r} in {meta_path}")
    cfg_cls, build = builders[meta["kind"]]
    known = {f.name for f in fields(cfg_cls)}
    net = build(cfg_cls(**{k: v for k, v in meta["cfg"].items() if k in known}))
    return load_params(ckpt.read_bytes(), net)


def _prepared(v: Volume) -> Volume:
    return zscore_normalize(v, compute_head_mask(v))


# ----------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, args) -> dict:
    s = cfg["synth"]
    specs = default_specs()
    if not 1 <= s["domains"] <= len(specs):
        raise ConfigError(f"synth.domains must be in 1..{len(specs)}")
    ext = ".nii" if s["format"] == "nii" else ".vvol"
    doms = generate_dataset(specs[:s["domains"]], s["subjects"], s["extent"], cfg.seed)
    out = Path(args.output)
    manifest = {"master_seed": cfg.seed, "extent": s["extent"],
                "domains": [sp.to_dict() for sp in specs[:s["domains"]]], "subjects": []}
    for dom in doms:
        (out / dom.name).mkdir(parents=True, exist_ok=True)
        for i, v in enumerate(dom):
            vp = out / dom.name / f"{i:02d}{ext}"
            lp = out / dom.name / f"{i:02d}_labels.nii"
            save_volume(vp, v)
            lp.write_bytes(write_label_nifti(v.labels, v.spacing))
            manifest["subjects"].append({
                "domain": dom.name, "subject": i, "seed": subject_seed(cfg.seed, i),
                "path": str(vp.relative_to(out)), "labels": str(lp.relative_to(out)),
                "lesion_voxels": int(v.labels.sum()),
            })
    _dump(out / "manifest.json", manifest)
    return {"volumes": len(manifest["subjects"])}


def cmd_jsdiv(cfg: RunConfig, args) -> dict:
    s = cfg["jsdiv"]
    a = load_domain(args.a)
    if s["zscore"]:
        a = DomainSet(a.name, [_prepared(v) for v in a])
    if s["mode"] == "intra":
        rep = delta_js(a, mode="intra", bins=s["bins"], channel=s["channel"])
    else:
        if not args.b:
            raise ConfigError("jsdiv inter mode needs --b")
        b = load_domain(args.b)
        if s["zscore"]:
            b = DomainSet(b.name, [_prepared(v) for v in b])
        rep = delta_js(a, b, bins=s["bins"], channel=s["channel"])
    result = {"delta_js": rep.delta_js, "mode": rep.mode, "domains": list(rep.labels)}
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        (out / "divergence.json").write_text(rep.to_json() + "\n")
        (out / "divergence.csv").write_text(rep.to_csv())
    print(json.dumps(result, sort_keys=True))
    return result


def cmd_histmatch(cfg: RunConfig, args) -> dict:
    s = cfg["histmatch"]
    y = _prepared(load_volume(args.input))
    ref_path = Path(args.reference)
    if ref_path.is_dir():
        refs = [_prepared(v) for v in load_domain(ref_path)]
        idx, ref = nearest_reference(y, refs, s["bins"])
    else:
        idx, ref = 0, _prepared(load_volume(ref_path))
    out = histogram_match(y, ref, s["levels"], s["match_points"])
    save_volume(args.output, out)
    return {"reference_index": idx}


def cmd_train_cyclegan(cfg: RunConfig, args) -> dict:
    cc = cfg.cycle()
    x = [_prepared(v) for v in load_domain(args.x)]
    y = [_prepared(v) for v in load_domain(args.y)]
    out = Path(args.output)
    res = train_cyclegan(x, y, cc, checkpoint_dir=out / "checkpoints")
    for name, net in res.nets.networks().items():
        save_network(out, name, net)
    (out / "losses.csv").write_text(loss_history_csv(res.history))
    last = res.history[-1]
    return {"steps": len(res.history), "final_cyc": last.cyc, "final_idt": last.idt}


def cmd_train_seg(cfg: RunConfig, args) -> dict:
    sc = cfg.seg()
    dom = load_domain(args.data)
    missing = dom.unlabeled()
    if missing:
        raise DataError(f"subjects without labels: {missing}")
    dom = preprocess(dom)
    val = load_domain(args.val) if args.val else None
    val = preprocess(val) if val is not None else None
    res = train_segmenter(dom, sc, val=val)
    out = Path(args.output)
    save_network(out, "segmenter", res.net)
    (out / "curve.csv").write_text(res.curve_csv())
    return {"best_epoch": res.best_epoch}


def cmd_adapt(cfg: RunConfig, args) -> dict:
    s = cfg["adapt"]
    net = load_network(args.generator)
    out = translate_volume(net, _prepared(load_volume(args.input)), s["tile"], s["overlap"])
    save_volume(args.output, out)
    return {}


def cmd_segment(cfg: RunConfig, args) -> dict:
    s = cfg["segment"]
    net = load_network(args.model)
    vol = _prepared(load_volume(args.input))
    prob = segment_volume(net, vol, s["window"], s["stride"])
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(out / "prob.vvol", prob)
    mask = binarize(prob, s["threshold"])
    (out / "labels.nii").write_bytes(write_label_nifti(mask, vol.spacing))
    return {"lesion_voxels": int(mask.sum())}


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    preds, truths = args.pred, args.truth
    if len(preds) != len(truths):
        raise ConfigError("--pred and --truth need the same number of files")
    scores = {str(p): dice(load_labels(p), load_labels(t), cfg["evaluate"]["empty_dice"]) for p, t in zip(preds, truths)}
    vals = [v for v in scores.values() if not np.isnan(v)]
    result = {"dice": scores, "mean": float(np.mean(vals)) if vals else None}
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "dice.json", result)
    print(json.dumps(result, sort_keys=True))
    return result


def cmd_gradcheck(cfg: RunConfig, args) -> dict:
    s = cfg["gradcheck"]
    res = run_suite(seeds=tuple(range(s["seeds"])), h=s["h"])
    worst = {k: max(v) for k, v in res.items()}
    for k, v in worst.items():
        print(f"{k:32s} {v:.3e} {'ok' if v <= s['tol'] else 'FAIL'}")
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "gradcheck.json", res)
    failed = [k for k, v in worst.items() if v > s["tol"]]
    if failed:
        raise NumericalError(f"gradient check failed for: {', '.join(failed)}")
    return {"worst": max(worst.values())}


def cmd_pipeline(cfg: RunConfig, args) -> dict:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    s = cfg["synth"]
    specs = default_specs()[:s["domains"]]
    if len(specs) < 2:
        raise ConfigError("pipeline needs at least 2 domains")
    doms = generate_dataset(specs, s["subjects"], s["extent"], cfg.seed)
    with open(out / "timing.log", "w") as timing:
        report = run_experiment_matrix(doms, cfg.experiment(), out_dir=out, timing_log=timing)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.csv").write_text(report.to_csv())
    (out / "delta_js.csv").write_text(report.delta_js_csv())
    summary = {}
    for src, tgt in report.pairs():
        js = report.delta_js[(src, tgt)]
        summary[f"{src}->{tgt}"] = {
            **{f"dice_{c}": report.mean(src, tgt, c) for c in ("none", "hm", "cyclegan", "target-trained")},
            "gap_recovery": gap_recovery(report, src, tgt),
            **{f"js_{c}": v for c, v in js.items()},
        }
    _dump(out / "summary.json", summary)
    return summary


COMMANDS = {
    "synth": cmd_synth, "jsdiv": cmd_jsdiv, "histmatch": cmd_histmatch, "train-cyclegan": cmd_train_cyclegan,
    "train-seg": cmd_train_seg, "adapt": cmd_adapt, "segment": cmd_segment, "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck, "pipeline": cmd_pipeline,
}

# command-specific flags that map straight onto config keys: flag -> (section, key)
FLAG_KEYS = {
    "synth": {"domains": ("synth", "domains"), "subjects": ("synth", "subjects"), "extent": ("synth", "extent"),
              "format": ("synth", "format")},
    "jsdiv": {"mode": ("jsdiv", "mode"), "bins": ("jsdiv", "bins")},
    "train-cyclegan": {"epochs": ("train-cyclegan", "epochs"), "steps": ("train-cyclegan", "steps_per_epoch")},
    "train-seg": {"epochs": ("train-seg", "epochs")},
    "adapt": {"tile": ("adapt", "tile")},
    "segment": {"threshold": ("segment", "threshold")},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which is reserved for data errors
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--config", help="JSON file with per-command sections")
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("-o", "--output")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="volshift", description="Volumetric domain adaptation toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sp = sub.add_parser("synth", parents=[common], help="generate synthetic domains")
    sp.add_argument("--domains", type=int)
    sp.add_argument("--subjects", type=int)
    sp.add_argument("--extent", type=int)
    sp.add_argument("--format", choices=["vvol", "nii"])
    sp = sub.add_parser("jsdiv", parents=[common], help="mean pairwise JS divergence between domains")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b")
    sp.add_argument("--mode", choices=["inter", "intra"])
    sp.add_argument("--bins", type=int)
    sp = sub.add_parser("histmatch", parents=[common], help="histogram-match a volume to a reference")
    sp.add_argument("--input", required=True)
    sp.add_argument("--reference", required=True, help="volume file, or a domain directory (nearest reference)")
    sp = sub.add_parser("train-cyclegan", parents=[common], help="train G: X->Y and F: Y->X")
    sp.add_argument("--x", required=True)
    sp.add_argument("--y", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--steps", type=int)
    sp = sub.add_parser("train-seg", parents=[common], help="train the U-Net segmenter")
    sp.add_argument("--data", required=True)
    sp.add_argument("--val")
    sp.add_argument("--epochs", type=int)
    sp = sub.add_parser("adapt", parents=[common], help="translate a volume with a trained generator")
    sp.add_argument("--generator", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--tile", type=int)
    sp = sub.add_parser("segment", parents=[common], help="segment a volume")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--threshold", type=float)
    sp = sub.add_parser("evaluate", parents=[common], help="Dice between label files")
    sp.add_argument("--pred", nargs="+", required=True)
    sp.add_argument("--truth", nargs="+", required=True)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    sub.add_parser("pipeline", parents=[common], help="synthetic end-to-end adaptation experiment")
    return p


NEEDS_OUTPUT = {"synth", "histmatch", "train-cyclegan", "train-seg", "adapt", "segment", "pipeline"}


def resolve_config(args) -> RunConfig:
    cfg = RunConfig(args.command, seed=args.seed, threads=args.threads, preset=args.preset)
    if args.preset:
        cfg.update(PRESETS[args.preset], f"preset {args.preset}")
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config file {args.config}: {e}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object of sections")
        cfg.update(file_cfg, args.config)
    for flag, (sec, key) in FLAG_KEYS.get(args.command, {}).items():
        val = getattr(args, flag, None)
        if val is not None:
            cfg.set(sec, key, val)
    for item in args.set:
        cfg.set(*_parse_set(item))
    return cfg


def _run(args) -> int:
    cfg = resolve_config(args)
    if args.command in NEEDS_OUTPUT and not args.output:
        raise ConfigError(f"{args.command} needs -o/--output")
    if args.output:
        # histmatch and adapt write a single volume file; the config goes beside it
        out = Path(args.output)
        cfg_dir = out.parent if args.command in ("histmatch", "adapt") else out
        cfg_dir.mkdir(parents=True, exist_ok=True)
        _dump(cfg_dir / "config.json", cfg.to_dict())
    fn = COMMANDS[args.command]
    if cfg.threads is not None:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=cfg.threads):
            fn(cfg, args)
    else:
        fn(cfg, args)
    return EXIT_OK


def dispatch(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"volshift: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return _run(args)
    except ConfigError as e:
        print(f"volshift: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"volshift: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as e:
        print(f"volshift: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except VolshiftError as e:
        print(f"volshift: error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
