"""Command-line entry points: generate, train, eval, ablation, export-features.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import RunConfig, dump_config, load_config
from .data import (
    AvailabilityMask,
    DatasetManifest,
    DatasetParseError,
    RawSample,
    SchemaError,
    generate_synthetic,
    load_dataset,
    load_manifest,
    save_dataset,
    split,
    synthetic_schema,
)
from .metrics import MetricReport
from .model import tensorize
from .numerics import ConfigurationError
from .trainer import (
    FingerprintMismatch,
    TrainingDivergence,
    build_model,
    check_compatible,
    evaluate,
    fingerprint,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
    write_log,
)

log = logging.getLogger("cmml")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class DataSource:
    """Train/test samples plus the structural facts the model needs."""

    def __init__(self, train: list[RawSample], test: list[RawSample], manifest: DatasetManifest):
        self.train = train
        self.test = test
        self.manifest = manifest


def _load_file(path: str) -> tuple[list[RawSample], DatasetManifest]:
    manifest = load_manifest(path)
    if manifest is None:
        raise SchemaError(f"{path}: no manifest found next to the dataset")
    return load_dataset(path), manifest


def resolve_data(cfg: RunConfig) -> DataSource:
    if cfg.data.path is not None:
        samples, manifest = _load_file(cfg.data.path)
        if cfg.data.test_path is not None:
            test, test_manifest = _load_file(cfg.data.test_path)
            if test_manifest.fingerprint_fields() != manifest.fingerprint_fields():
                raise SchemaError("data.test_path has a different structure than data.path")
            return DataSource(samples, test, manifest)
        tr, te = split(samples, cfg.data.n_train)
        return DataSource(tr, te, manifest)
    spec = cfg.synthetic_spec()
    samples = generate_synthetic(spec)
    tr, te = split(samples, cfg.data.n_train)
    schema = synthetic_schema(spec.n_attributes)
    manifest = DatasetManifest(spec.M, spec.C, [spec.feature_dim] * (spec.M - 1), schema, len(samples))
    return DataSource(tr, te, manifest)


def _model_config(cfg: RunConfig, manifest: DatasetManifest):
    mc = cfg.model_config(manifest.schema, manifest.vector_lengths, manifest.C)
    mc.validate()
    return mc


def _train_variant(cfg: RunConfig, source: DataSource, switches: Sequence[str], out_dir: Path,
                   until_epoch: Optional[int] = None, resume: Optional[str] = None):
    mc = _model_config(cfg, source.manifest)
    tc = cfg.train_config()
    data = tensorize(source.train, mc)
    state = None
    if resume is not None:
        state = load_checkpoint(resume)
        if state.data_fingerprint != source.manifest.fingerprint_fields():
            raise FingerprintMismatch(f"{resume} was trained on differently structured data")
        if fingerprint(state.model.cfg) != fingerprint(mc):
            raise ConfigurationError(f"{resume} was trained with a different model configuration")
        if sorted(state.model.switches) != sorted(switches):
            raise ConfigurationError(f"{resume} was trained with switches {sorted(state.model.switches)}")
        model = state.model
        state.train_cfg = tc
    else:
        model = build_model(mc, switches, cfg.seed)
    state = train(tc, model, data, state=state, until_epoch=until_epoch,
                  on_epoch=lambda r: log.info("epoch %(epoch)d lr=%(lr).3g L_total=%(L_total).4f", r))
    state.data_fingerprint = source.manifest.fingerprint_fields()
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.pt"
    save_checkpoint(state, ckpt)
    write_log(state.log, out_dir / "train_log.jsonl")
    report = None
    if source.test:
        report = evaluate(model, source.test)
        report.to_csv(out_dir / "metrics.csv")
    sidecar = {
        "epoch": state.epoch,
        "switches": sorted(switches),
        "final": state.log[-1] if state.log else None,
        "avg_acc": report.avg_acc if report else None,
        "avg_auc": report.avg_auc if report else None,
    }
    (out_dir / "checkpoint.pt.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return state, report


# -- commands --------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.set)
    spec = cfg.synthetic_spec()
    samples = generate_synthetic(spec)
    save_dataset(samples, args.out, synthetic_schema(spec.n_attributes), spec.C, M=spec.M,
                 vector_lengths=[spec.feature_dim] * (spec.M - 1))
    dims = ", ".join([f"modality {m}: {spec.feature_dim}" for m in range(spec.M - 1)]
                     + [f"modality {spec.M - 1}: {spec.n_attributes} attributes"])
    print(f"wrote {len(samples)} samples to {args.out} ({dims})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    out_dir = Path(args.out_dir or cfg.output_dir)
    source = resolve_data(cfg)
    state, report = _train_variant(cfg, source, cfg.model.switches, out_dir, args.until_epoch, args.resume)
    (out_dir / "config.yaml").write_text(dump_config(cfg))
    last = state.log[-1] if state.log else {}
    print(f"trained to epoch {state.epoch}; checkpoint at {out_dir / 'checkpoint.pt'}")
    if last:
        print(f"final L_total={last['L_total']!r}")
    if report is not None:
        print(report.to_csv(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    samples, manifest = _load_file(args.data)
    check_compatible(state, manifest.fingerprint_fields())
    patterns = args.patterns.split(",") if args.patterns else None
    report = evaluate(state.model, samples, patterns)
    text = report.to_csv(args.out)
    if args.out is None:
        print(text, end="")
    return EXIT_OK


def cmd_ablation(args) -> int:
    cfg = load_config(args.config, args.set)
    out_dir = Path(args.out_dir or cfg.output_dir) / "ablation"
    switches = cfg.ablation.switches if args.switches is None else [s for s in args.switches.split(",") if s]
    source = resolve_data(cfg)
    if not source.test:
        raise ConfigurationError("ablation needs a test split (data.n_train leaves no test samples)")
    variants = [("full", [])] + [(s, [s]) for s in switches]
    reports: dict[str, MetricReport] = {}
    for name, sw in variants:
        log.info("training variant %s", name)
        _, report = _train_variant(cfg, source, sw, out_dir / name)
        report.to_csv(out_dir / f"{name}.csv")
        reports[name] = report
    rows = []
    full = reports["full"].by_pattern()
    for name, _ in variants:
        rep = reports[name]
        for p, acc, auc in rep.rows + [("AVG", rep.avg_acc, rep.avg_auc)]:
            ref_acc, ref_auc = full.get(p, (reports["full"].avg_acc, reports["full"].avg_auc))
            rows.append([name, p, acc, auc, acc - ref_acc, auc - ref_auc])
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "pattern", "ACC", "AUC", "dACC", "dAUC"])
        for r in rows:
            w.writerow(r[:2] + [repr(float(v)) for v in r[2:]])
    print(f"{'variant':<22}{'AVG ACC':>10}{'AVG AUC':>10}{'dAUC':>10}")
    for name, _ in variants:
        rep = reports[name]
        print(f"{name:<22}{rep.avg_acc:>10.4f}{rep.avg_auc:>10.4f}{rep.avg_auc - reports['full'].avg_auc:>+10.4f}")
    return EXIT_OK


def cmd_export_features(args) -> int:
    state = load_checkpoint(args.checkpoint)
    samples, manifest = _load_file(args.data)
    check_compatible(state, manifest.fingerprint_fields())
    model = state.model
    mask = AvailabilityMask.from_pattern(args.pattern, model.M)
    data = tensorize(samples, model.cfg)
    _, fused = predict(model, data, mask)
    labels = data.labels.numpy()
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{k}" for k in range(fused.shape[1])] + ["label"])
        for row, y in zip(fused, labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])
    print(f"wrote {len(labels)} fused feature rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmml", description="Missing-modality classification pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML run config (defaults are used when omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key, e.g. train.epochs=3 (repeatable)")

    p = sub.add_parser("generate", help="write a synthetic dataset and its manifest")
    with_config(p)
    p.add_argument("--out", required=True, help="dataset path (JSONL)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model, write checkpoint, log and test metrics")
    with_config(p)
    p.add_argument("--out-dir", help="overrides output_dir")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--until-epoch", type=int, help="stop after this epoch (schedule still spans train.epochs)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-pattern ACC/AUC of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--patterns", help="comma-separated pattern strings, e.g. 0,01,012 (default: all)")
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablation", help="train the full model and single-switch variants")
    with_config(p)
    p.add_argument("--out-dir", help="overrides output_dir")
    p.add_argument("--switches", help="comma-separated switches (default: ablation.switches)")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("export-features", help="write fused features and labels for one pattern")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pattern", required=True, help='available modalities, e.g. "01"')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_features)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FingerprintMismatch, DatasetParseError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
