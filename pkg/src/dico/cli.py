"""Command-line entry points: train, eval, infer, phantom, project.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime
failure. Every command that writes artifacts drops the fully-resolved
config next to them.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from dico.config import ConfigError, ExperimentConfig, dump_config, load_config
from dico.data import (
    CropStream,
    IngestionError,
    PhantomSpec,
    load_case,
    read_manifest,
    write_phantom_dataset,
)
from dico.inference import final_prediction, sliding_window_predict
from dico.metrics import MetricReport
from dico.nifti import read_nifti, write_nifti
from dico.trainer import Trainer, build_models, run_training
from dico.volume import mip_project


def _load_split(records, split, normalize=True):
    return [(rec, *load_case(rec, normalize)) for rec in records if rec.split == split]


def _build_trainer(cfg: ExperimentConfig) -> Trainer:
    models = build_models(
        cfg.trainer,
        cfg.model.m1,
        cfg.model.m2,
        cfg.view_geometry(),
        cfg.model.disc_base_channels,
        cfg.model.disc_layers,
    )
    return Trainer(cfg.trainer, models, cfg.losses, cfg.config_hash())


def _eval_net(trainer: Trainer, cfg: ExperimentConfig, average_models: bool = False):
    m1 = trainer.models["m1"]
    if average_models and "m2" in trainer.models:
        m2 = trainer.models["m2"]

        class _Avg(torch.nn.Module):
            def forward(self, x):
                return (m1(x) + m2(x)) / 2

        return _Avg()
    return m1


def _validate_dsc(trainer, cfg, val_cases):
    from dico.metrics import dsc

    net = trainer.models["m1"]
    scores = []
    for _, vol, mask in val_cases:
        probs = sliding_window_predict(net, vol, cfg.inference)
        pred = final_prediction(probs)
        scores.append(dsc(pred, mask))
    return float(np.mean(scores)) if scores else float("nan")


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    records = read_manifest(cfg.data.manifest)
    labeled = _load_split(records, "labeled-train", cfg.data.normalize)
    unlabeled = _load_split(records, "unlabeled-train", cfg.data.normalize)
    val = _load_split(records, "val", cfg.data.normalize)
    if not labeled:
        raise IngestionError(f"manifest {cfg.data.manifest} has no labeled-train cases")
    if not unlabeled:
        if cfg.trainer.variant != "supervised":
            raise IngestionError(f"manifest {cfg.data.manifest} has no unlabeled-train cases")
        unlabeled = labeled

    tcfg = cfg.trainer
    labeled_stream = CropStream([(v, m) for _, v, m in labeled], tcfg.crop, tcfg.crop_mode)
    unlabeled_stream = CropStream([(v, None) for _, v, _ in unlabeled], tcfg.crop, tcfg.crop_mode)

    trainer = _build_trainer(cfg)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "config.yaml")
    if args.resume:
        trainer.load_checkpoint(args.resume)

    validate = None
    if val and tcfg.val_interval:
        validate = lambda tr, t: {"dsc": _validate_dsc(tr, cfg, val)}
    final = run_training(trainer, labeled_stream, unlabeled_stream, out_dir, validate=validate)
    print(f"training finished at iteration {trainer.iteration}; final checkpoint: {final}")
    return 0


def _check_hash(cfg: ExperimentConfig, trainer: Trainer, ckpt_dir) -> None:
    import json

    with open(Path(ckpt_dir) / "manifest.json") as f:
        manifest = json.load(f)
    if manifest["config_hash"] != cfg.config_hash():
        raise ConfigError(
            [
                "checkpoint was produced by a different configuration: "
                f"checkpoint hash {manifest['config_hash']}, current hash {cfg.config_hash()}"
            ]
        )


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    trainer = _build_trainer(cfg)
    if not args.no_hash_check:
        _check_hash(cfg, trainer, args.checkpoint)
    trainer.load_checkpoint(args.checkpoint, expect_hash=not args.no_hash_check)

    records = [r for r in read_manifest(cfg.data.manifest) if r.split == args.split]
    if not records:
        raise IngestionError(f"split {args.split!r} is empty in {cfg.data.manifest}")
    net = _eval_net(trainer, cfg, args.average_models)
    report = MetricReport(nsd_tolerance=cfg.metrics.nsd_tolerance)
    for rec in records:
        vol, mask = load_case(rec, cfg.data.normalize)
        if mask is None:
            raise IngestionError(f"case {rec.case_id}: cannot evaluate without a label")
        probs = sliding_window_predict(net, vol, cfg.inference)
        pred = final_prediction(probs)
        report.add(rec.case_id, pred, mask)

    out_dir = Path(args.out or Path(cfg.output_dir) / f"eval_{args.split}")
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "config.yaml")
    report.write_csv(out_dir / "metrics.csv")
    _plot_metrics(report, out_dir / "metrics.png")
    print(
        f"{len(report.cases)} cases: mean dsc={report.mean_dsc:.4f} "
        f"nsd={report.mean_nsd if report.mean_nsd is None else round(report.mean_nsd, 4)} "
        f"asd={report.mean_asd if report.mean_asd is None else round(report.mean_asd, 4)}"
    )
    print(f"report written to {out_dir}")
    return 0


def _plot_metrics(report: MetricReport, path):
    ids = [c.case_id for c in report.cases]
    fig, axes = plt.subplots(1, 3, figsize=(max(6, 1.2 * len(ids)), 3.2), sharex=True)
    for ax, key, label in zip(axes, ("dsc", "nsd", "asd"), ("DSC", "NSD", "ASD (voxels)")):
        vals = [getattr(c, key) for c in report.cases]
        xs = np.arange(len(ids))
        ax.bar(xs, [v if v is not None else 0.0 for v in vals], color="#4878a8")
        ax.set_title(label)
        ax.set_xticks(xs)
        ax.set_xticklabels(ids, rotation=90, fontsize=6)
        mean = report._mean(key)
        if mean is not None:
            ax.axhline(mean, color="#b24745", lw=1, ls="--")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_infer(args) -> int:
    cfg = load_config(args.config, args.set)
    trainer = _build_trainer(cfg)
    if not args.no_hash_check:
        _check_hash(cfg, trainer, args.checkpoint)
    trainer.load_checkpoint(args.checkpoint, expect_hash=not args.no_hash_check)
    net = _eval_net(trainer, cfg, args.average_models)

    from dico.data import CaseRecord

    rec = CaseRecord("input", args.image, None, "unlabeled-train")
    vol, _ = load_case(rec, cfg.data.normalize)
    _, _, affine = read_nifti(args.image)
    probs = sliding_window_predict(net, vol, cfg.inference)
    pred = final_prediction(probs)[0, 0].numpy().astype(np.uint8)
    write_nifti(args.out, pred, vol.spacing, affine)
    print(f"prediction written to {args.out}")
    return 0


def cmd_phantom(args) -> int:
    spec = PhantomSpec(
        grid=tuple(args.grid),
        num_tubes=args.tubes,
        radius_range=tuple(args.radius),
        noise_sigma=args.noise,
        seed=args.seed,
    )
    records = write_phantom_dataset(
        args.out, args.cases, spec, labeled_fraction=args.labeled_fraction, n_val=args.val
    )
    counts = {}
    for r in records:
        counts[r.split] = counts.get(r.split, 0) + 1
    print(f"wrote {len(records)} phantom cases to {args.out}: {counts}")
    print(f"manifest: {Path(args.out) / 'manifest.txt'}")
    return 0


def cmd_project(args) -> int:
    image, _, _ = read_nifti(args.image)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    img2d = mip_project(torch.from_numpy(image.astype(np.float32))[None, None])[0, 0].numpy()
    _save_gray(img2d, out_dir / "image_mip.png")
    if args.mask:
        mask, _, _ = read_nifti(args.mask)
        if mask.shape != image.shape:
            raise IngestionError(f"mask grid {mask.shape} != image grid {image.shape}")
        mask2d = mip_project(torch.from_numpy(mask.astype(np.float32))[None, None])[0, 0].numpy()
        _save_gray(mask2d, out_dir / "mask_mip.png")
    print(f"projections written to {out_dir}")
    return 0


def _save_gray(img: np.ndarray, path):
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    plt.imsave(path, scaled, cmap="gray", vmin=0.0, vmax=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dico", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("-c", "--config", required=True, help="experiment config YAML")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")

    p = sub.add_parser("train", help="train a model")
    add_common(p)
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", help="manifest split to evaluate")
    p.add_argument("--out", help="report directory (default: <output_dir>/eval_<split>)")
    p.add_argument("--average-models", action="store_true",
                   help="average both sub-network probabilities instead of M1 only")
    p.add_argument("--no-hash-check", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict a mask for one volume")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--average-models", action="store_true")
    p.add_argument("--no-hash-check", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("phantom", help="generate a synthetic tubular dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=10)
    p.add_argument("--val", type=int, default=0, help="extra validation cases")
    p.add_argument("--grid", type=int, nargs=3, default=[32, 32, 32])
    p.add_argument("--tubes", type=int, default=3)
    p.add_argument("--radius", type=float, nargs=2, default=[1.5, 3.0])
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--labeled-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("project", help="write depth-axis MIP images for inspection")
    p.add_argument("--image", required=True)
    p.add_argument("--mask")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IngestionError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
