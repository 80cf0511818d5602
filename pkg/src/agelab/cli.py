"""``agelab`` command-line entry point."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
import traceback
from contextlib import nullcontext
from pathlib import Path


from . import data, plots, synth
from . import encoding as enc
from .config import dump_config, load_config
from .models import load_checkpoint
from .nn import ConfigError
from .training import (ArchConfig, HierarchyModel, TrainConfig, build_model, evaluate,
                       hierarchy_report, sweep, train, write_metrics, write_sweep_csv,
                       write_sweep_table)

log = logging.getLogger("agelab")

COMMANDS = ("synth", "clean", "subset", "stats", "encode", "augment", "train", "eval",
            "hier-eval", "sweep")


def _need(value, key):
    if not value:
        raise ConfigError(f"config key {key!r} is required for this command")
    return value


def _image_size(cfg):
    w, h = cfg["data"]["image_size"]
    return int(w), int(h)


def _load_records(path, cfg):
    records, rejects = data.load_labels(path, tuple(cfg["data"]["age_range"]))
    return records, rejects, Path(path).parent


def _rebase(records, src_root, dst_root):
    """Rewrite relative image paths so they resolve from ``dst_root``."""
    out = []
    for r in records:
        p = data.resolve_path(r, src_root)
        rel = os.path.relpath(p.resolve(), Path(dst_root).resolve())
        out.append(data.LabelRecord(r.subject_id, rel, r.age, r.gender, r.race, r.dob))
    return out


def _dataset(path, cfg):
    return data.load_manifest_dataset(path, _image_size(cfg), tuple(cfg["data"]["age_range"]))


def _train_config(cfg):
    t, e = cfg["train"], cfg["encoding"]
    return TrainConfig(
        batch_size=t["batch_size"], epochs=t["epochs"], serial_splits=t["serial_splits"],
        val_sample_size=t["val_sample_size"], loss=t["loss"], seed=cfg["seed"],
        augment=t["augment"], crop=tuple(t["crop"]) if t["crop"] else None,
        input_mode=t["input_mode"], encoding=e["kind"], schedule=str(e["alpha"]),
        rho=t["rho"], epsilon=t["epsilon"], decoder=e["decoder"])


def _arch(cfg):
    m, t = cfg["model"], cfg["train"]
    size = tuple(t["crop"]) if t["augment"] and t["crop"] else _image_size(cfg)
    return ArchConfig(input_size=size, channels=cfg["data"]["channels"],
                      stacks=[tuple(s) for s in m["stacks"]], dense_sizes=list(m["dense_sizes"]),
                      dropout=m["dropout"])


def _backbone(cfg):
    path = cfg["model"]["init_checkpoint"]
    return load_checkpoint(path) if path else None


# -- commands ----------------------------------------------------------------

def cmd_synth(cfg, out):
    s = cfg["synth"]
    spec = synth.SyntheticSpec(size=s["size"], count=s["count"], age_min=s["age_min"],
                               age_max=s["age_max"], male_fraction=s["male_fraction"],
                               noise=s["noise"], seed=cfg["seed"], radius_scale=s["radius_scale"])
    manifest = synth.write_synthetic(spec, out)
    print(f"wrote {spec.count} images and {manifest}")


def cmd_clean(cfg, out):
    src = _need(cfg["data"]["manifest"], "data.manifest")
    records, rejects, root = _load_records(src, cfg)
    overrides = data.load_overrides(cfg["data"]["overrides"]) if cfg["data"]["overrides"] else []
    report = data.detect_inconsistencies(records)
    result = data.clean_labels(records, report, overrides)
    data.write_labels(_rebase(result.records, root, out), out / "cleaned.csv")
    data.write_labels(_rebase(result.quarantined, root, out), out / "quarantine.csv")
    report.write_csv(out / "inconsistencies.csv")
    _write_rejects(rejects, out / "rejects.csv")
    (out / "warnings.txt").write_text("".join(w + "\n" for w in result.warnings))
    print(f"{len(result.records)} cleaned, {len(result.quarantined)} quarantined, "
          f"{len(report)} inconsistent subjects, {len(rejects)} rejected rows")


def _write_rejects(rejects, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["line", "reason"])
        writer.writerows((r.line, r.reason) for r in rejects)


def cmd_subset(cfg, out):
    src = _need(cfg["data"]["manifest"], "data.manifest")
    records, rejects, root = _load_records(src, cfg)
    split = data.guo_mu_subset(records, cfg["seed"], cfg["subset"]["size"],
                               cfg["subset"]["strict_subjects"])
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["set", "images", "male", "female"])
        for name, recs in (("s1", split.s1), ("s2", split.s2), ("s3", split.s3)):
            data.write_labels(_rebase(recs, root, out), out / f"{name}.csv")
            males = sum(r.is_male for r in recs)
            writer.writerow([name, len(recs), males, len(recs) - males])
    _write_rejects(rejects, out / "rejects.csv")
    print("S1/S2/S3 sizes: %d / %d / %d" % split.sizes())


def cmd_stats(cfg, out):
    src = cfg["data"]["train_manifest"] or _need(cfg["data"]["manifest"], "data.train_manifest")
    ds = _dataset(src, cfg)
    stats = data.compute_standardization_stats(ds.images[i:i + 500] for i in range(0, len(ds), 500))
    data.write_stats(out / "stats.csv", stats, split=src, seed=cfg["seed"])
    print(f"mean {stats.mean:.4f} std {stats.std:.4f}")


def cmd_encode(cfg, out):
    e = cfg["encoding"]
    schedule = enc.AlphaSchedule.parse(str(e["alpha"]))
    rows = enc.distribution_rows([int(a) for a in e["ages"]], e["kind"], schedule)
    with open(out / "encodings.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(enc.csv_header())
        writer.writerows([row[0]] + [repr(float(v)) for v in row[1:]] for row in rows)
    plots.plot_encodings(rows, out / "encodings.png")
    print(f"encoded {len(rows)} ages ({e['kind']}, {schedule.label()})")


def cmd_augment(cfg, out):
    src = _need(cfg["data"]["manifest"], "data.manifest")
    records, rejects, root = _load_records(src, cfg)
    cw, ch = cfg["augment"]["crop"]
    (out / "img").mkdir(exist_ok=True)
    new = []
    for rec in records:
        sample = data.load_image(data.resolve_path(rec, root), label=rec)
        stem = Path(rec.image_path).stem
        for k, crop in enumerate(data.twelve_crop(sample, cw, ch)):
            name = data.CROP_NAMES[k % 6] + ("_mirror" if k >= 6 else "")
            rel = f"img/{stem}_{name}.{'pgm' if crop.pixels.shape[0] == 1 else 'ppm'}"
            data.write_netpbm(out / rel, crop.pixels)
            new.append(data.LabelRecord(rec.subject_id, rel, rec.age, rec.gender, rec.race, rec.dob))
    data.write_labels(new, out / "manifest.csv")
    print(f"wrote {len(new)} augmented images from {len(records)} sources")


def cmd_train(cfg, out):
    head = cfg["model"]["head"]
    train_set = _dataset(_need(cfg["data"]["train_manifest"], "data.train_manifest"), cfg)
    val_set = _dataset(_need(cfg["data"]["val_manifest"], "data.val_manifest"), cfg)
    tc = _train_config(cfg)
    model = build_model(_arch(cfg), head, cfg["seed"], _backbone(cfg),
                        cfg["model"]["freeze_backbone"])
    log.info("model:\n%s", model.summary())
    result = train(model, train_set, val_set, tc)
    result.best.save(out / "best.ckpt")
    result.final.save(out / "final.ckpt")
    result.log.write_csv(out / "train_log.csv")
    plots.plot_train_log(result.log, out / "train_log.png")
    last = result.log.entries[-1]
    print(f"best epoch {result.log.best_epoch}; final val loss {last.val_loss:.5f}, "
          f"{result.log.metric_name} {last.val_metric:.4f}")


def cmd_eval(cfg, out):
    ckpt = _need(cfg["eval"]["checkpoint"], "eval.checkpoint")
    test = _dataset(_need(cfg["data"]["test_manifest"], "data.test_manifest"), cfg)
    model = load_checkpoint(ckpt)
    metrics = {"checkpoint": ckpt, "head": model.head, **evaluate(model, test)}
    write_metrics(metrics, out / "metrics.txt")
    for k, v in metrics.items():
        print(f"{k}: {v}")


def cmd_hier_eval(cfg, out):
    e = cfg["eval"]
    h = HierarchyModel(load_checkpoint(_need(e["gender_checkpoint"], "eval.gender_checkpoint")),
                       load_checkpoint(_need(e["male_checkpoint"], "eval.male_checkpoint")),
                       load_checkpoint(_need(e["female_checkpoint"], "eval.female_checkpoint")))
    single = load_checkpoint(e["single_checkpoint"]) if e["single_checkpoint"] else None
    test = _dataset(_need(cfg["data"]["test_manifest"], "data.test_manifest"), cfg)
    report = {"n": len(test)}
    for decoder in ("argmax", "expected_value"):
        r = hierarchy_report(h, single, test, decoder)
        report["routing_accuracy"] = r["routing_accuracy"]
        for key in ("hierarchy_mae", "hierarchy_mae_male", "hierarchy_mae_female",
                    "single_mae", "hierarchy_minus_single"):
            if key in r:
                report[f"{key}[{decoder}]"] = r[key]
    report["reference_hierarchy_mae"] = r["reference_hierarchy_mae"]
    report["reference_single_mae"] = r["reference_single_mae"]
    write_metrics(report, out / "hierarchy.txt")
    plots.plot_hierarchy(hierarchy_report(h, single, test, cfg["encoding"]["decoder"]),
                         out / "hierarchy.png")
    for k, v in report.items():
        print(f"{k}: {v}")


def cmd_sweep(cfg, out):
    head = cfg["model"]["head"]
    train_set = _dataset(_need(cfg["data"]["train_manifest"], "data.train_manifest"), cfg)
    val_set = _dataset(_need(cfg["data"]["val_manifest"], "data.val_manifest"), cfg)
    test_set = _dataset(_need(cfg["data"]["test_manifest"], "data.test_manifest"), cfg)
    axis, values = cfg["sweep"]["axis"], list(cfg["sweep"]["values"])
    rows = sweep(axis, values, _arch(cfg), _train_config(cfg), head, train_set, val_set,
                 test_set, _backbone(cfg), cfg["model"]["freeze_backbone"])
    write_sweep_csv(rows, out / "sweep.csv")
    write_sweep_table(rows, out / "sweep_table.csv", head)
    plots.plot_sweep(rows, axis, out / "sweep.png", head)
    failed = [r for r in rows if r.error]
    for r in rows:
        print(r.value, r.best_metric, r.final_metric, r.error)
    if failed:
        raise RuntimeError(f"{len(failed)} of {len(rows)} sweep runs failed")


HANDLERS = {
    "synth": cmd_synth, "clean": cmd_clean, "subset": cmd_subset, "stats": cmd_stats,
    "encode": cmd_encode, "augment": cmd_augment, "train": cmd_train, "eval": cmd_eval,
    "hier-eval": cmd_hier_eval, "sweep": cmd_sweep,
}


def _thread_limit():
    n = os.environ.get("AGELAB_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(n))


def _quarantine_outputs(out, before, exc):
    """Move everything the failed command wrote under ``out/failed/``."""
    failed = out / "failed"
    failed.mkdir(exist_ok=True)
    for p in out.iterdir():
        if p.name != "failed" and p.name not in before:
            shutil.move(str(p), failed / p.name)
    (failed / "error.txt").write_text("".join(traceback.format_exception(exc)))


def build_parser():
    parser = argparse.ArgumentParser(prog="agelab", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--out", help="output directory (overrides out_dir)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. train.epochs=3")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
    except (ConfigError, OSError) as exc:
        print(f"agelab: configuration error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out:
        cfg["out_dir"] = args.out
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    before = {p.name for p in out.iterdir()}
    try:
        with _thread_limit():
            dump_config(cfg, out / "config.yaml")
            HANDLERS[args.command](cfg, out)
    except Exception as exc:
        _quarantine_outputs(out, before - {"config.yaml"}, exc)
        print(f"agelab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
