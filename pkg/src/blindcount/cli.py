"""``blindcount`` command line: generate, train, eval, count.

Every command accepts ``--config file.json`` holding flat option names (the
same names as the flags, with underscores); explicit flags win over the
file, and the file wins over built-in defaults. The effective configuration
is written to the output directory as ``config.json``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

log = logging.getLogger("blindcount")

EXIT_USAGE = 1
EXIT_RUNTIME = 2

DEFAULTS = {
    "generate": {
        "out": None, "seed": 0, "train": 200, "val": 50, "test": 50, "m1": False,
        "image_size": 64, "min_classes": 1, "max_classes": 4, "class_count_mean": 1.75,
        "min_instances": 1, "max_instances": 20, "sigma": 3.0,
    },
    "train": {
        "data": None, "out": None, "split": "train", "seed": 0, "mhat": 5, "epochs": 100,
        "lr": 3e-4, "halve_every": 35, "batch_size": 2, "freeze_backbone": False,
        "augment": True, "warmup_blur": 5.0, "warmup_epochs": 20, "limit": None,
    },
    "eval": {
        "checkpoint": None, "data": None, "out": None, "split": "test", "baseline": [],
        "combine": None, "gt_as_pred": False, "frequency_threshold": 0.004, "limit": None,
    },
    "count": {
        "checkpoint": None, "image": None, "out": None, "similarity_threshold": 0.15,
        "zero_threshold": 0.5, "n_per_head": 3, "discovery": True, "peak_fraction": 0.35,
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="blindcount", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help):
        p = sub.add_parser(name, help=help, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file with option values")
        return p

    g = add("generate", "write a synthetic multi-class counting dataset")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    for split in ("train", "val", "test"):
        g.add_argument(f"--{split}", type=int, help=f"number of {split} images")
    g.add_argument("--m1", action="store_true", help="single-class scenes only")
    g.add_argument("--image-size", type=int)
    g.add_argument("--min-classes", type=int)
    g.add_argument("--max-classes", type=int)
    g.add_argument("--class-count-mean", type=float)
    g.add_argument("--min-instances", type=int)
    g.add_argument("--max-instances", type=int)
    g.add_argument("--sigma", type=float, help="pseudo-density kernel width in pixels")

    t = add("train", "train the multi-head counter with the matched loss")
    t.add_argument("--data", help="dataset root written by 'generate'")
    t.add_argument("--out")
    t.add_argument("--split")
    t.add_argument("--seed", type=int)
    t.add_argument("--mhat", type=int, help="number of prediction heads")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--halve-every", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--freeze-backbone", action="store_true")
    t.add_argument("--no-augment", dest="augment", action="store_false")
    t.add_argument("--warmup-blur", type=float)
    t.add_argument("--warmup-epochs", type=int)
    t.add_argument("--limit", type=int, help="use only the first N images")

    e = add("eval", "matched evaluation with the counting metric suite")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--out")
    e.add_argument("--split")
    e.add_argument("--baseline", action="append", choices=["mean", "median"])
    e.add_argument("--combine", choices=["sum", "max"], help="fold sub-class heads into labels")
    e.add_argument("--gt-as-pred", action="store_true",
                   help="score the ground-truth maps themselves (sanity check)")
    e.add_argument("--frequency-threshold", type=float)
    e.add_argument("--limit", type=int)

    c = add("count", "count one image and discover examples")
    c.add_argument("--checkpoint")
    c.add_argument("--image")
    c.add_argument("--out")
    c.add_argument("--similarity-threshold", type=float)
    c.add_argument("--zero-threshold", type=float)
    c.add_argument("--n-per-head", type=int)
    c.add_argument("--peak-fraction", type=float)
    c.add_argument("--no-discovery", dest="discovery", action="store_false")
    return parser


def resolve_config(command: str, ns: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose", "config")}
    if getattr(ns, "config", None):
        try:
            file_cfg = json.loads(Path(ns.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {ns.config}: {exc}") from exc
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(file_cfg)
    cfg.update(given)
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-")
                                                                   for k in missing))


def _echo_config(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"command": command, **cfg}, indent=1,
                                                sort_keys=True))


# -- commands ---------------------------------------------------------------

def cmd_generate(cfg: dict) -> dict:
    from .scenegen import GenConfig, SPLITS, generate_split

    _require(cfg, "out")
    gen = GenConfig(image_size=cfg["image_size"], min_classes=cfg["min_classes"],
                    max_classes=cfg["max_classes"], class_count_mean=cfg["class_count_mean"],
                    min_instances=cfg["min_instances"], max_instances=cfg["max_instances"],
                    sigma=cfg["sigma"])
    try:
        gen.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(cfg["out"])
    _echo_config(out, "generate", cfg)
    summary = {}
    for split in SPLITS:
        manifest = generate_split(split, cfg[split], gen, cfg["seed"], out, m1=cfg["m1"])
        summary[split] = manifest["stats"]
        stats = manifest["stats"]
        print(f"{split}: {cfg[split]} images, {len(manifest['class_pool'])} classes in pool, "
              f"classes/image {stats['mean_classes_per_image']:.2f}, "
              f"instances/class {stats['mean_instances_per_class']:.2f} "
              f"(max {stats['max_instances_per_class']}); classes per image histogram "
              f"{stats['classes_per_image']}")
    return summary


def _set_threads() -> None:
    threads = os.environ.get("BLINDCOUNT_THREADS")
    if threads:
        import torch
        torch.set_num_threads(max(1, int(threads)))


def cmd_train(cfg: dict) -> dict:
    from .matching import write_match_log
    from .model import ModelConfig, TrainConfig, save_checkpoint, train
    from .scenegen import load_split, read_manifest

    _require(cfg, "data", "out")
    split_dir = Path(cfg["data"]) / cfg["split"]
    if not (split_dir / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset split at {split_dir}")
    manifest = read_manifest(split_dir)
    samples = load_split(split_dir, cfg["limit"])
    image_size = manifest["config"]["image_size"]
    tc = TrainConfig(epochs=cfg["epochs"], lr=cfg["lr"], halve_every=cfg["halve_every"],
                     batch_size=cfg["batch_size"], seed=cfg["seed"],
                     freeze_backbone=cfg["freeze_backbone"], augment=cfg["augment"],
                     warmup_blur=cfg["warmup_blur"], warmup_epochs=cfg["warmup_epochs"],
                     model=ModelConfig(n_heads=cfg["mhat"], image_size=image_size))
    try:
        tc.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(cfg["out"])
    _echo_config(out, "train", cfg)
    _set_threads()
    result = train(samples, tc, log_path=out / "train_log.jsonl")
    save_checkpoint(out / "checkpoint.bin", result.model, {"train_config": asdict(tc)})
    ids = [s.image_id for s in samples if len(s.densities) <= tc.model.n_heads]
    # one entry per image per epoch, in training order
    write_match_log(out / "match_log.jsonl",
                    ((f"step{k}", a) for k, a in enumerate(result.match_log)))
    first, last = result.log[0]["loss"], result.log[-1]["loss"]
    print(f"trained {len(ids)} images for {tc.epochs} epochs: loss {first:.4f} -> {last:.4f}, "
          f"head utilisation {result.log[-1]['head_utilization']:.0%}")
    return {"initial_loss": first, "final_loss": last}


def _gt_predictions(sample):
    from .matching import PredictionSet
    return PredictionSet(sample.densities)


def cmd_eval(cfg: dict) -> dict:
    from .matching import evaluate_combined, head_utilization, match, write_match_log
    from .metrics import (CountPair, baseline_pairs, baseline_predict, compute_metrics,
                          write_report_csv, write_report_json)
    from .model import load_checkpoint, predict
    from .scenegen import load_split

    _require(cfg, "data", "out")
    if not cfg["gt_as_pred"]:
        _require(cfg, "checkpoint")
        if not Path(cfg["checkpoint"]).exists():
            raise FileNotFoundError(f"no checkpoint at {cfg['checkpoint']}")
    split_dir = Path(cfg["data"]) / cfg["split"]
    if not (split_dir / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset split at {split_dir}")
    out = Path(cfg["out"])
    _echo_config(out, "eval", cfg)
    _set_threads()
    samples = load_split(split_dir, cfg["limit"])

    model = None
    n_heads = None
    if not cfg["gt_as_pred"]:
        model, _ = load_checkpoint(cfg["checkpoint"])
        n_heads = model.n_heads

    pairs, match_entries = [], []
    for s in samples:
        preds = _gt_predictions(s) if model is None else predict(model, s.image)
        if len(s.densities) > len(preds):
            log.warning("%s: %d labels exceed %d heads, skipped", s.image_id,
                        len(s.densities), len(preds))
            continue
        if cfg["combine"]:
            yy, assignment = evaluate_combined(s.densities, preds, cfg["combine"])
        else:
            assignment = match(s.densities, preds)
            yy = [(float(s.label["counts"][j]), preds.counts[i]) for i, j in assignment.pairs]
        match_entries.append((s.image_id, assignment))
        for j, (y, y_hat) in enumerate(yy):
            pairs.append(CountPair(y, y_hat, s.image_id, j))

    reports = {"model" if model is not None else "ground_truth": compute_metrics(pairs)}
    test_counts = [p.y for p in pairs]
    baselines = cfg["baseline"] or []
    if baselines:
        train_dir = Path(cfg["data"]) / "train"
        train_counts = [c for s in load_split(train_dir) for c in s.label["counts"]]
        for mode in baselines:
            value = baseline_predict(train_counts, mode)
            reports[mode] = compute_metrics(baseline_pairs(test_counts, value))

    extra = {"split": cfg["split"], "combine": cfg["combine"]}
    if n_heads is None:
        n_heads = max(len(s.densities) for s in samples)
    extra["head_utilization"] = head_utilization((a for _, a in match_entries), n_heads,
                                                 cfg["frequency_threshold"])
    write_report_json(out / "metrics.json", reports, extra)
    write_report_csv(out / "metrics.csv", reports)
    write_match_log(out / "match_log.jsonl", match_entries)
    with open(out / "pairs.jsonl", "w") as f:
        for p in pairs:
            f.write(json.dumps({"image_id": p.image_id, "class_index": p.class_index,
                                "y": p.y, "y_hat": p.y_hat}) + "\n")
    for name, r in reports.items():
        print(f"{name:>12}: MAE {r.mae:.3f}  RMSE {r.rmse:.3f}  NAE {r.nae:.3f}  "
              f"SRE {r.sre:.3f}  ({r.pair_count} pairs)")
    print(f"head utilisation: {extra['head_utilization']:.0%}")
    return {name: r.to_dict() for name, r in reports.items()} | extra


def cmd_count(cfg: dict) -> dict:
    from PIL import Image, UnidentifiedImageError

    from .densitymap import write_dmap
    from .discovery import discover_examples, write_examples
    from .matching import deployment_postprocess
    from .model import extract_features, load_checkpoint, predict

    _require(cfg, "checkpoint", "image", "out")
    if not Path(cfg["checkpoint"]).exists():
        raise FileNotFoundError(f"no checkpoint at {cfg['checkpoint']}")
    try:
        image = np.asarray(Image.open(cfg["image"]).convert("RGB"))
    except (OSError, UnidentifiedImageError) as exc:
        raise RuntimeError(f"cannot read image {cfg['image']}: {exc}") from exc
    out = Path(cfg["out"])
    _echo_config(out, "count", cfg)
    _set_threads()
    model, _ = load_checkpoint(cfg["checkpoint"])
    raw = predict(model, image)
    preds = deployment_postprocess(raw, cfg["similarity_threshold"], cfg["zero_threshold"])
    entries = []
    for k, (dmap, count, sources) in enumerate(zip(preds.maps, preds.counts, preds.sources)):
        name = f"count_{k}.dmap"
        write_dmap(out / name, dmap, {"image": str(cfg["image"]), "heads": list(sources),
                                      "count": count})
        entries.append({"count": count, "heads": list(sources), "density": name})
    (out / "counts.json").write_text(json.dumps({"image": str(cfg["image"]),
                                                 "counts": entries}, indent=1))
    if cfg["discovery"] and len(preds):
        feats = extract_features(model, image)
        examples = discover_examples(image, preds, feats, cfg["n_per_head"],
                                     cfg["peak_fraction"])
        write_examples(out, examples)
    print(json.dumps([round(e["count"], 2) for e in entries]))
    return {"counts": entries}


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "count": cmd_count}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not ns.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = resolve_config(ns.command, ns)
        COMMANDS[ns.command](cfg)
    except UsageError as exc:
        print(f"blindcount {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures map to exit code 2
        log.debug("failure", exc_info=True)
        print(f"blindcount {ns.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
