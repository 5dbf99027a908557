"""Command-line surface: every subcommand is a thin binding over the
library, reading and writing RFNV1 volumes, CSV/JSON reports, and figure
files."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datasets, grading, registration, reports, volumetry
from .losses import LossConfig
from .metrics import evaluate_probability_volume, aggregate_rows, evaluate_model, sweep_beta
from .network import ModelConfig, load_checkpoint, predict_volume, save_checkpoint
from .phantom import PhantomSpec
from .preprocess import FusionConfig, fuse, normalize, prepare_input, smooth_bscans
from .training import TrainConfig, train
from .volumes import FLUID, LabelVolume, load_volume, save_volume


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(payload, dict):
        raise ValueError("config file must hold a JSON object")
    return payload


def _build_configs(args) -> tuple[ModelConfig, TrainConfig, LossConfig]:
    sections = _load_config_file(getattr(args, "config", None))
    model_cfg = ModelConfig(**sections.get("model", {}))
    train_kwargs = dict(sections.get("train", {}))
    fusion = sections.get("fusion", {})
    if "beta" in fusion and "beta" not in train_kwargs:
        train_kwargs["beta"] = fusion["beta"]
    if getattr(args, "beta", None) is not None:
        train_kwargs["beta"] = args.beta
    if getattr(args, "seed", None) is not None:
        train_kwargs["seed"] = args.seed
    if getattr(args, "max_epochs", None) is not None:
        train_kwargs["max_epochs"] = args.max_epochs
    train_cfg = TrainConfig(**train_kwargs)
    loss_cfg = LossConfig(**sections.get("loss", {}))
    return model_cfg, train_cfg, loss_cfg


def _cmd_synth(args) -> int:
    spec = PhantomSpec.from_file(args.spec)
    labeled = datasets.synthesize_labeled(spec, volume_id=args.volume_id)
    out_dir = Path(args.out)
    datasets.save_labeled_volume(labeled, out_dir)
    print(f"wrote {labeled.volume_id} (oct, octa, labels) to {out_dir}")
    return 0


def _cmd_preprocess(args) -> int:
    oct_volume = load_volume(args.oct)
    if args.beta is not None:
        octa_path = args.octa or args.oct.replace("_oct.rfnv", "_octa.rfnv")
        octa_volume = load_volume(octa_path)
        out = prepare_input(oct_volume, octa_volume, FusionConfig(args.beta))
    else:
        out = normalize(smooth_bscans(oct_volume))
    save_volume(out, args.out)
    print(f"wrote {out.modality} volume to {args.out}")
    return 0


def _cmd_train(args) -> int:
    model_cfg, train_cfg, loss_cfg = _build_configs(args)
    volumes = datasets.load_dataset(args.data_dir)
    model, history = train(volumes, train_cfg, model_cfg, loss_cfg)
    save_checkpoint(model, args.out)
    history_path = args.history or str(Path(args.out).with_suffix(".history.csv"))
    history.to_csv(history_path)
    reports.render_loss_curves(history, str(Path(history_path).with_suffix(".png")))
    last = history.records[-1]
    print(
        f"trained {len(history)} epochs (final val loss {last.val_loss:.4f}); "
        f"checkpoint {args.out}, history {history_path}"
    )
    return 0


def _prediction_paths(out: str) -> tuple[Path, Path]:
    probs_path = Path(out)
    labels_path = probs_path.with_name(probs_path.stem + "_labels" + probs_path.suffix)
    return probs_path, labels_path


def _cmd_infer(args) -> int:
    model = load_checkpoint(args.model)
    oct_volume = load_volume(args.volume)
    octa_volume = None
    if args.beta is not None:
        octa_path = args.octa or args.volume.replace("_oct.rfnv", "_octa.rfnv")
        octa_volume = load_volume(octa_path)
    prepared = prepare_input(oct_volume, octa_volume, args.beta)
    probs = predict_volume(model, prepared)
    probs_path, labels_path = _prediction_paths(args.out)
    save_volume(probs, probs_path)
    save_volume(probs.argmax_labels(), labels_path)
    print(f"wrote probabilities to {probs_path} and labels to {labels_path}")
    return 0


def _cmd_eval(args) -> int:
    volumes = datasets.load_dataset(args.data_dir)
    if args.pred_dir:
        evaluations = []
        for vol in sorted(volumes, key=lambda v: v.volume_id):
            pred_path = Path(args.pred_dir) / f"{vol.volume_id}_pred.rfnv"
            probs = load_volume(pred_path)
            evaluations.append(evaluate_probability_volume(probs, vol.labels))
        row = aggregate_rows(args.label or "predictions", evaluations)
    else:
        if not args.model:
            raise ValueError("eval needs --model or --pred-dir")
        model = load_checkpoint(args.model)
        row = evaluate_model(model, volumes, args.beta, label=args.label)
    rows = [row]
    if args.out:
        reports.write_metric_csv(rows, args.out)
    print(reports.format_metric_table(rows), end="")
    return 0


def _cmd_sweep_beta(args) -> int:
    model_cfg, train_cfg, loss_cfg = _build_configs(args)
    volumes = datasets.load_dataset(args.data_dir)
    betas = [float(b) for b in args.betas.split(",") if b.strip()]
    rows = sweep_beta(volumes, betas, train_cfg, model_cfg, loss_cfg)
    reports.write_metric_csv(rows, args.out)
    table = reports.format_metric_table(rows)
    table_path = Path(args.out).with_suffix(".txt")
    table_path.write_text(table, encoding="utf-8")
    fig_path = args.fig or str(Path(args.out).with_suffix(".png"))
    reports.render_beta_sweep(rows, fig_path)
    print(table, end="")
    return 0


def _cmd_volume(args) -> int:
    labels = load_volume(args.labels)
    if not isinstance(labels, LabelVolume):
        raise ValueError(f"{args.labels} is not a label volume")
    report = volumetry.fluid_report(labels)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
    )
    mask, area = volumetry.enface_projection(labels)
    reports.save_grayscale_png(mask.astype(np.float64), out_dir / "enface_mask.png", vmax=1.0)
    reports.save_grayscale_png(report.thickness_map, out_dir / "thickness.png")
    reports.render_enface_figure(mask, area, labels.spacing_um, out_dir / "enface_figure.png")
    reports.render_thickness_figure(report, labels.spacing_um, out_dir / "thickness_figure.png")
    fluid_only = labels.with_codes(
        np.where(labels.codes == FLUID, FLUID, 0).astype(np.uint8), provenance=labels.provenance
    )
    save_volume(fluid_only, out_dir / "fluid_mask.rfnv")
    print(
        f"fluid volume {report.total_volume_mm3:.4f} mm^3 in {len(report.components)} "
        f"component(s); en-face area {report.enface_area_mm2:.4f} mm^2; report in {out_dir}"
    )
    return 0


def _load_labeled_prefix(prefix: str) -> datasets.LabeledVolume:
    path = Path(prefix)
    if path.is_dir():
        ids = datasets.list_volume_ids(path)
        if len(ids) != 1:
            raise ValueError(f"{path} holds {len(ids)} volumes; pass a file prefix instead")
        return datasets.load_labeled_volume(path, ids[0])
    return datasets.LabeledVolume(
        oct=load_volume(f"{prefix}_oct.rfnv"),
        octa=load_volume(f"{prefix}_octa.rfnv"),
        labels=load_volume(f"{prefix}_labels.rfnv"),
    )


def _cmd_register(args) -> int:
    baseline = _load_labeled_prefix(args.baseline)
    followup = _load_labeled_prefix(args.followup)
    result, registered = registration.register_pair(baseline, followup)
    base_surface = registration.estimate_bm_surface(baseline.labels)
    _, base_labels_flat = registration.flatten_axial(baseline.oct, baseline.labels, base_surface)
    changes = registration.change_map(base_labels_flat, registered.labels, result)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = result.to_dict()
    summary["delta_volume_mm3"] = changes.delta_volume_mm3
    (out_dir / "registration.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8"
    )
    for name, mask in (("gained", changes.gained), ("lost", changes.lost),
                       ("stable", changes.stable)):
        save_volume(
            LabelVolume(
                codes=np.where(mask, FLUID, 0).astype(np.uint8),
                spacing_um=baseline.labels.spacing_um,
                provenance="predicted",
                volume_id=f"{baseline.volume_id}-{name}",
            ),
            out_dir / f"{name}.rfnv",
        )
    print(
        f"lateral shift {result.lateral_shift} (peak {result.correlation_peak:.3f}); "
        f"fluid change {changes.delta_volume_mm3:+.4f} mm^3; outputs in {out_dir}"
    )
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    app = create_app(args.data_dir, static_dir=args.static)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="octfluid",
        description="Volumetric retinal fluid segmentation toolkit for OCT/OCTA scans",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom volume triple from a spec")
    p.add_argument("--spec", required=True, help="phantom spec JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--volume-id", default=None)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("preprocess", help="smooth, normalize and optionally fuse volumes")
    p.add_argument("--oct", required=True, help="OCT RFNV1 volume")
    p.add_argument("--octa", default=None, help="OCTA RFNV1 volume (default: sibling _octa file)")
    p.add_argument("--beta", type=float, default=None, help="fusion factor; omit for OCT-only")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_preprocess)

    p = sub.add_parser("train", help="train a segmentation model on a dataset directory")
    p.add_argument("--config", default=None, help="JSON with model/train/loss/fusion sections")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", default=None, help="history CSV path")
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("infer", help="segment a volume with a trained checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--volume", required=True, help="OCT RFNV1 volume")
    p.add_argument("--octa", default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--out", required=True, help="probability volume path (labels saved alongside)")
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("eval", help="evaluate a model or stored predictions against labels")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--pred-dir", default=None, help="directory of {id}_pred.rfnv probability volumes")
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--label", default=None)
    p.add_argument("--out", default=None, help="metrics CSV path")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("sweep-beta", help="train and evaluate across fusion factors")
    p.add_argument("--config", default=None)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--betas", required=True, help="comma-separated fusion factors")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--fig", default=None, help="sweep figure path (default: CSV path with .png)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.set_defaults(fn=_cmd_sweep_beta)

    p = sub.add_parser("volume", help="quantify fluid in a segmented label volume")
    p.add_argument("--labels", required=True, help="label RFNV1 volume")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(fn=_cmd_volume)

    p = sub.add_parser("register", help="register a follow-up scan onto a baseline")
    p.add_argument("--baseline", required=True, help="volume file prefix or single-volume directory")
    p.add_argument("--followup", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_register)

    p = sub.add_parser("serve", help="run the annotation HTTP service")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--static", default=None, help="static UI bundle to serve at /")
    p.set_defaults(fn=_cmd_serve)

    return parser


def cli_dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch())
