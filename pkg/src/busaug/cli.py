"""busaug command-line interface.

Exit codes: 0 success, 1 usage, 2 config, 3 data, 4 runtime. The run
directory root defaults to $BUSAUG_RUN_DIR (or ./runs); every command
accepts --out to place artifacts explicitly.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    build_phantom_config,
    build_settings,
    echo_config,
    parse_config,
    phantom_counts,
)
from .data import (
    ClassLabel,
    DataError,
    Manifest,
    ingest_busi,
    make_phantom_manifest,
    save_image,
    split_stratified,
)
from .evaluation import (
    PrecomputedFeatures,
    dump_features,
    evaluate_split,
    extract_features,
    fid,
    fid_stats,
    load_classifier,
    save_classifier,
    train_classifier,
    compute_metrics,
)
from .pipeline import (
    ExperimentArm,
    GenerationConfig,
    SharedArtifacts,
    hybrid_generate,
    augment_manifest,
    run_experiment,
)
from .report import export_grid, grid_cells_from_run, load_arm_reports, write_report
from .util import derive_seed

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _runs_root() -> Path:
    return Path(os.environ.get("BUSAUG_RUN_DIR", "runs"))


def _default_out() -> Path:
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    return _runs_root() / stamp


def _common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, default=None, help="experiment config file")
    sub.add_argument("--seed", type=int, default=None, help="override the root seed")
    sub.add_argument("--out", type=Path, default=None, help="run directory")


def _load_run(args) -> tuple[dict, Path]:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = args.out if args.out is not None else _default_out()
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    return cfg, out


def _data_manifest(cfg: dict, out: Path, explicit: Path | None) -> Manifest:
    """Load an explicit manifest, reuse the run's, or build one per config."""
    if explicit is not None:
        return Manifest.load(explicit)
    path = out / "data" / "manifest.jsonl"
    if path.exists():
        return Manifest.load(path)
    if cfg["data.source"] == "busi":
        root = cfg["data.busi_root"]
        if not root:
            raise ConfigError("config key 'data.busi_root' is required when data.source = busi")
        manifest = ingest_busi(root, cfg["data.image_size"])
    else:
        manifest = make_phantom_manifest(phantom_counts(cfg), build_phantom_config(cfg),
                                         out / "data")
    manifest = split_stratified(manifest, cfg["data.train_fraction"],
                                derive_seed(cfg["seed"], "split"))
    (out / "data").mkdir(parents=True, exist_ok=True)
    manifest.save(path)
    return manifest


def _print_counts(manifest: Manifest) -> None:
    for split in ("train", "val"):
        counts = manifest.class_counts(split)
        total = sum(counts.values())
        detail = ", ".join(f"{k.value}={v}" for k, v in counts.items())
        print(f"{split}: {total} ({detail})")


# -- commands ---------------------------------------------------------------


def cmd_make_phantoms(args) -> int:
    cfg, out = _load_run(args)
    manifest = make_phantom_manifest(phantom_counts(cfg), build_phantom_config(cfg), out / "data")
    manifest = split_stratified(manifest, cfg["data.train_fraction"],
                                derive_seed(cfg["seed"], "split"))
    manifest.save(out / "data" / "manifest.jsonl")
    print(f"phantom dataset at {out / 'data'}")
    _print_counts(manifest)
    return EXIT_OK


def cmd_ingest_busi(args) -> int:
    cfg, out = _load_run(args)
    manifest = ingest_busi(args.root, cfg["data.image_size"])
    manifest = split_stratified(manifest, cfg["data.train_fraction"],
                                derive_seed(cfg["seed"], "split"))
    (out / "data").mkdir(parents=True, exist_ok=True)
    manifest.save(out / "data" / "manifest.jsonl")
    print(f"manifest at {out / 'data' / 'manifest.jsonl'}")
    _print_counts(manifest)
    return EXIT_OK


def cmd_train_diffusion(args) -> int:
    cfg, out = _load_run(args)
    manifest = _data_manifest(cfg, out, args.data)
    shared = SharedArtifacts(manifest, build_settings(cfg), out)
    shared.base_checkpoint()
    shared.sampling_model()
    print(f"checkpoints at {out / 'checkpoints'}")
    return EXIT_OK


def cmd_train_ti(args) -> int:
    cfg, out = _load_run(args)
    manifest = _data_manifest(cfg, out, args.data)
    shared = SharedArtifacts(manifest, build_settings(cfg), out)
    emb = shared.token_embedding()
    print(f"token {emb.token} trained; saved under {out / 'checkpoints'}")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg, out = _load_run(args)
    manifest = _data_manifest(cfg, out, args.data)
    settings = build_settings(cfg)
    shared = SharedArtifacts(manifest, settings, out)
    if args.ti:
        shared.token_embedding()
    model = shared.sampling_model()
    config = GenerationConfig(
        use_ti=args.ti,
        use_img2img=args.img2img,
        strength=settings.strength,
        sampler_steps=settings.sampler_steps,
        guidance=settings.guidance,
        seed_base=derive_seed(settings.seed, "generate") % 2**32,
        ti_token=settings.ti_token,
        batch_size=settings.generation_batch,
    )
    label = ClassLabel.parse(args.label)
    images, records = hybrid_generate(model, shared.encoder(), label, args.count,
                                      config, shared.schedule)
    gen_dir = out / "generated"
    gen_dir.mkdir(parents=True, exist_ok=True)
    for image, rec in zip(images, records):
        path = gen_dir / f"gen_{label.value}_{rec['index']:04d}_s{rec['seed']}.png"
        save_image(image, path)
        rec["file"] = path.name
    (gen_dir / f"records_{label.value}.json").write_text(
        json.dumps(records, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"{len(images)} image(s) in {gen_dir}")
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg, out = _load_run(args)
    manifest = _data_manifest(cfg, out, args.data)
    settings = build_settings(cfg)
    shared = SharedArtifacts(manifest, settings, out)
    if args.ti:
        shared.token_embedding()
    model = shared.sampling_model()
    target = args.target
    if target is None:
        target = settings.target_per_class
    if target is None:
        target = max(manifest.class_counts("train").values())
    config = GenerationConfig(
        use_ti=args.ti,
        use_img2img=args.img2img,
        strength=settings.strength,
        sampler_steps=settings.sampler_steps,
        guidance=settings.guidance,
        seed_base=derive_seed(settings.seed, "generate") % 2**32,
        ti_token=settings.ti_token,
        batch_size=settings.generation_batch,
    )
    aug_dir = out / "augmented"
    augmented, run = augment_manifest(manifest, model, shared.encoder(), target, config,
                                      shared.schedule, aug_dir, arm_name="custom")
    augmented.save(aug_dir / "manifest.jsonl")
    run.save(aug_dir / "augmentation_run.json")
    print(f"augmented manifest at {aug_dir / 'manifest.jsonl'}")
    _print_counts(augmented)
    return EXIT_OK


def cmd_train_classifier(args) -> int:
    cfg, out = _load_run(args)
    manifest = _data_manifest(cfg, out, args.data)
    settings = build_settings(cfg)
    from dataclasses import replace

    config = replace(settings.classifier_train, seed=derive_seed(settings.seed, "classifier"))
    model = train_classifier(manifest, config, settings.classifier_arch())
    path = out / "classifier.ckpt"
    save_classifier(model, path)
    print(f"classifier at {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg, out = _load_run(args)
    manifest = _data_manifest(cfg, out, args.data)
    settings = build_settings(cfg)
    model = load_classifier(args.classifier)
    probs, labels = evaluate_split(model, manifest, "val")
    fid_value = None
    if args.fid_against is not None:
        other = Manifest.load(args.fid_against)
        if args.feature_file is not None:
            extractor = PrecomputedFeatures(args.feature_file)
        else:
            from .evaluation import RandomConvFeatures

            extractor = RandomConvFeatures(
                feature_dim=settings.feature_dim,
                input_size=settings.image_size,
                seed=derive_seed(settings.seed, "fid-extractor"),
            )
        real = np.stack([manifest.load_image(s) for s in manifest.subset("train")])
        synth = np.stack([other.load_image(s) for s in other.samples])
        if args.dump_features is not None:
            dump_features(args.dump_features, real, extractor)
            print(f"features at {args.dump_features}")
        fid_value = fid(fid_stats(extract_features(real, extractor)),
                        fid_stats(extract_features(synth, extractor)))
    report = compute_metrics(probs, labels, fid_value=fid_value,
                             metadata={"seed": cfg["seed"]})
    path = out / "eval_report.json"
    path.write_text(json.dumps(report.to_json_dict(), sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")
    print(f"accuracy={report.accuracy:.3f} f1={report.f1_macro:.3f} "
          f"auc={report.auc_roc_ovr_macro:.3f} ppv={report.ppv_macro:.3f} "
          f"recall={report.recall_macro:.3f}"
          + (f" fid={fid_value:.2f}" if fid_value is not None else ""))
    print(f"report at {path}")
    return EXIT_OK


def cmd_run_arm(args) -> int:
    cfg, out = _load_run(args)
    manifest = _data_manifest(cfg, out, args.data)
    arm = ExperimentArm.parse(args.arm)
    shared = SharedArtifacts(manifest, build_settings(cfg), out)
    report = run_experiment(arm, manifest, shared, out / "arms" / arm.value)
    print(f"[{arm.value}] accuracy={report.accuracy:.3f} f1={report.f1_macro:.3f} "
          f"auc={report.auc_roc_ovr_macro:.3f} ppv={report.ppv_macro:.3f} "
          f"fid={'-' if report.fid is None else format(report.fid, '.2f')}")
    print(f"artifacts under {out / 'arms' / arm.value}")
    return EXIT_OK


def cmd_run_all(args) -> int:
    cfg, out = _load_run(args)
    manifest = _data_manifest(cfg, out, args.data)
    shared = SharedArtifacts(manifest, build_settings(cfg), out)
    results = []
    from .pipeline import ARM_ORDER

    for arm in ARM_ORDER:
        report = run_experiment(arm, manifest, shared, out / "arms" / arm.value)
        results.append((arm, report))
        print(f"[{arm.value}] accuracy={report.accuracy:.3f} "
              f"fid={'-' if report.fid is None else format(report.fid, '.2f')}")
    md, js = write_report(results, out)
    grid_path = export_grid(grid_cells_from_run(out), out / "grid.png")
    print(Path(md).read_text(encoding="utf-8"))
    print(f"report: {md}, {js}; grid: {grid_path}")
    return EXIT_OK


def cmd_grid(args) -> int:
    run_dir = args.run
    out_path = args.out if args.out is not None else Path(run_dir) / "grid.png"
    export_grid(grid_cells_from_run(run_dir), out_path)
    print(f"grid at {out_path}")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = load_arm_reports(args.run)
    md, js = write_report(reports, args.run)
    print(Path(md).read_text(encoding="utf-8"))
    print(f"report: {md}, {js}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="busaug",
                     description="Hybrid diffusion augmentation for ultrasound-style images.")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("make-phantoms", help="generate the phantom dataset and manifest")
    _common_flags(p)
    p.set_defaults(func=cmd_make_phantoms)

    p = sub.add_parser("ingest-busi", help="build a manifest from a BUSI directory tree")
    _common_flags(p)
    p.add_argument("--root", type=Path, required=True, help="BUSI dataset root")
    p.set_defaults(func=cmd_ingest_busi)

    for name, func, extras in (
        ("train-diffusion", cmd_train_diffusion, ()),
        ("train-ti", cmd_train_ti, ()),
        ("train-classifier", cmd_train_classifier, ()),
    ):
        p = sub.add_parser(name)
        _common_flags(p)
        p.add_argument("--data", type=Path, default=None, help="manifest path")
        p.set_defaults(func=func)

    p = sub.add_parser("generate", help="sample synthetic images for one class")
    _common_flags(p)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--label", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--ti", action="store_true")
    p.add_argument("--img2img", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("augment", help="balance the train split with synthetic samples")
    _common_flags(p)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--target", type=int, default=None)
    p.add_argument("--ti", action="store_true")
    p.add_argument("--img2img", action="store_true")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("evaluate", help="classifier metrics on the val split (optional FID)")
    _common_flags(p)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--classifier", type=Path, required=True)
    p.add_argument("--fid-against", type=Path, default=None,
                   help="manifest of images to compare with the real train split")
    p.add_argument("--feature-file", type=Path, default=None,
                   help="precomputed feature file keyed by image identity")
    p.add_argument("--dump-features", type=Path, default=None,
                   help="write the real split's features to this file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run-arm", help="run one experiment arm")
    _common_flags(p)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--arm", required=True)
    p.set_defaults(func=cmd_run_arm)

    p = sub.add_parser("run-all", help="run all five arms, the report, and the grid")
    _common_flags(p)
    p.add_argument("--data", type=Path, default=None)
    p.set_defaults(func=cmd_run_all)

    p = sub.add_parser("grid", help="export the class-by-method image grid")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="re-render the five-arm table from a run directory")
    p.add_argument("--run", type=Path, required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if getattr(args, "command", None) is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args) or EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
