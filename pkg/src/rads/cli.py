"""Command-line interface.

Subcommands:
    synth      stage-1 synthetic data generation into an output directory
    label      label-augmented pseudo-labelling over a frame directory
    simulate   the full two-stage loop (in-process, or one TCP role)
    evaluate   metrics CSVs from a logged run directory
    report     metrics CSVs plus SVG figures from a logged run directory

Exit status: 0 on success, 1 on usage errors, 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import traceback
from pathlib import Path
from typing import List, Optional

from .scenario import ScenarioConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rads", description="self-training rare-animal detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", default="default",
                       help="scenario config JSON path, or 'default'")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")

    p_synth = sub.add_parser("synth", help="generate stage-1 synthetic training data")
    common(p_synth)

    p_label = sub.add_parser("label", help="pseudo-label a directory of frames")
    p_label.add_argument("frames", help="directory of PNM frames with JSON sidecars")
    common(p_label)
    p_label.add_argument("--threshold", type=float, default=None,
                         help="score threshold (default: config stage-1 threshold)")

    p_sim = sub.add_parser("simulate", help="run the full self-training loop")
    common(p_sim)
    p_sim.add_argument("--iterations", type=int, default=None)
    p_sim.add_argument("--transport", choices=["inproc", "tcp"], default="inproc")
    p_sim.add_argument("--role", choices=["edge", "cloud"], default=None,
                       help="tcp mode: which half of the loop to run")
    p_sim.add_argument("--host", default="127.0.0.1")
    p_sim.add_argument("--port", type=int, default=47311)

    p_eval = sub.add_parser("evaluate", help="emit metric CSVs for a logged run")
    p_eval.add_argument("run", help="run directory containing report.json")
    p_eval.add_argument("--out", default=None, help="output directory (default: run dir)")

    p_rep = sub.add_parser("report", help="emit CSVs and SVG figures for a logged run")
    p_rep.add_argument("run", help="run directory containing report.json")
    p_rep.add_argument("--out", default=None, help="output directory (default: run dir)")

    return parser


def _load_config(args) -> ScenarioConfig:
    config = ScenarioConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    return config


def _cmd_synth(args) -> int:
    from .edge import write_frame_dir
    from .pipeline import build_cloud, _labelled_instances
    from .synth import PlacementPolicy, generate_synthetic_set, write_sample_manifest
    from .world import make_web_images, render_background_frames
    from .images import write_pnm, image_extension
    from .labelaug import stable_seed

    config = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cloud = build_cloud(config)
    spec = config.stage1
    for modality, n_web, n_syn in (("rgb", spec.web_rgb_images, spec.synthetic_rgb),
                                   ("thermal", spec.web_thermal_images, spec.synthetic_thermal)):
        web = make_web_images(config, modality, n_web)
        instances, _ = _labelled_instances(cloud, web, config.cloud.stage1_threshold, config)
        if not instances:
            raise RuntimeError(f"no {modality} instances extracted")
        backgrounds = [
            f.image
            for f in render_background_frames(config, modality, spec.backgrounds_per_modality)
        ]
        samples = generate_synthetic_set(
            instances, backgrounds, n=n_syn,
            policy=PlacementPolicy(scale_range=spec.scale_range,
                                   instances_per_sample=spec.instances_per_sample,
                                   sigma=spec.blend_sigma),
            seed=stable_seed(config.seed, "synth", modality),
            label=config.target_class,
        )
        mod_dir = out / modality
        mod_dir.mkdir(exist_ok=True)
        for s in samples:
            write_pnm(s.image, mod_dir / f"{s.provenance['sample_id']}{image_extension(s.image.channels)}")
        write_sample_manifest(samples, mod_dir / "manifest.jsonl")
        print(f"wrote {len(samples)} {modality} samples to {mod_dir}")
    return 0


def _cmd_label(args) -> int:
    from .cloud import oracle_handle
    from .edge import read_frame_dir
    from .labelaug import builtin_hierarchy, label_augmented_nms, write_pseudo_labels
    from .pipeline import make_backend

    config = _load_config(args)
    frames = read_frame_dir(Path(args.frames))
    if not frames:
        raise RuntimeError(f"no frames found in {args.frames}")
    backend = make_backend(config)
    hierarchy = builtin_hierarchy()
    threshold = args.threshold if args.threshold is not None else config.cloud.stage1_threshold
    sets = [
        label_augmented_nms(
            oracle_handle(f),
            config.target_class,
            hierarchy,
            backend,
            score_threshold=threshold,
            iou_threshold=config.cloud.nms_iou,
            depth=config.cloud.expansion_depth,
            use_descriptors=config.cloud.use_descriptors,
        )
        for f in frames
    ]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "pseudo_labels.jsonl"
    write_pseudo_labels(sets, path)
    kept = sum(len(s.boxes) for s in sets)
    print(f"labelled {len(sets)} frames, kept {kept} boxes -> {path}")
    return 0


def _write_timings(timings: dict, path: Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stage", "seconds"])
    for key, value in timings.items():
        if isinstance(value, list):
            for i, v in enumerate(value, start=1):
                writer.writerow([f"{key}[{i}]", f"{v:.3f}"])
        else:
            writer.writerow([key, f"{value:.3f}"])
    path.write_text(buf.getvalue())


def _cmd_simulate(args) -> int:
    from .pipeline import run_cloud_process, run_edge_process, run_stage2
    from .report import emit_report

    config = _load_config(args)
    if args.iterations is not None:
        import dataclasses

        config = dataclasses.replace(config, iterations=args.iterations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.transport == "tcp":
        if args.role is None:
            raise SystemExit(_usage_error("tcp transport requires --role edge or --role cloud"))
        if args.role == "cloud":
            run_cloud_process(config, args.host, args.port, state_dir=out / "cloud-state")
            print(f"cloud role finished; state in {out / 'cloud-state'}")
            return 0
        report, timings = run_edge_process(config, args.host, args.port)
    else:
        report, timings = run_stage2(config, state_dir=out / "cloud-state")

    (out / "report.json").write_text(report.to_json())
    _write_timings(timings, out / "timings.csv")
    written = emit_report(report.to_dict(), out)
    print(f"report.json plus {len(written)} artifacts in {out}")
    return 0


def _usage_error(message: str) -> int:
    sys.stderr.write(f"rads: error: {message}\n")
    return 1


def _load_report(run_dir: str) -> dict:
    path = Path(run_dir) / "report.json"
    if not path.exists():
        raise FileNotFoundError(f"no report.json in {run_dir}")
    return json.loads(path.read_text())


def _cmd_evaluate(args) -> int:
    from .report import write_ablation_csv, write_events_csv, write_metrics_csv, write_roc_csv

    report = _load_report(args.run)
    out = Path(args.out) if args.out else Path(args.run)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_metrics_csv(report, out)]
    paths.extend(write_roc_csv(report, out))
    for writer in (write_events_csv, write_ablation_csv):
        p = writer(report, out)
        if p:
            paths.append(p)
    print(f"wrote {len(paths)} CSV files to {out}")
    return 0


def _cmd_report(args) -> int:
    from .report import emit_report

    report = _load_report(args.run)
    out = Path(args.out) if args.out else Path(args.run)
    written = emit_report(report, out)
    print(f"wrote {len(written)} artifacts to {out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "label": _cmd_label,
    "simulate": _cmd_simulate,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (KeyboardInterrupt, BrokenPipeError):
        return 2
    except Exception as exc:  # runtime failure -> exit 2
        sys.stderr.write(f"rads: {type(exc).__name__}: {exc}\n")
        if "--debug" in (argv or sys.argv):
            traceback.print_exc()
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
