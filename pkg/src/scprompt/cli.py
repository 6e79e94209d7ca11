"""Command line surface for the whole pipeline.

Subcommands: gen-data, train, eval, gradcheck, flow, ablate-experts.
Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical
failure. Every subcommand's last stdout line is a machine-readable
`key=value` summary starting with `status=`.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import report as report_mod
from .autodiff import grad_check
from .dataset import GenSpec, generate, load_set, save_set
from .errors import (ConfigError, DataFormatError, NonFiniteError,
                     ScpromptError)
from .model import EncoderConfig, ModelConfig, forward_batch, init_params
from .rng import RngStream
from .scpt import write_tensor
from .training import (TrainRunConfig, ablate_experts, evaluate,
                       load_checkpoint, prepare_split, train)
from .visual import ClipPartition, flow_prompt_map, flow_prompt_video

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    """Bad flags or arguments; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage problems; 2 is reserved for data
    # errors here, so route usage failures through our own exception
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _status(status: str, **fields) -> str:
    parts = [f"status={status}"]
    parts += [f"{k}={_fmt(v)}" for k, v in fields.items()]
    return " ".join(parts)


def _load_json(path, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise DataFormatError(f"{what} file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{what} file {p} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise DataFormatError(f"{what} file {p} must hold a JSON object")
    return data


# ------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    spec = GenSpec.from_dict(_load_json(args.spec, "generator spec"))
    ds = generate(spec)
    save_set(ds, args.out)
    print(_status("ok", clips=len(ds.clips), train=len(ds.split("train")),
                  val=len(ds.split("val")), classes=len(ds.spec.classes),
                  out=args.out))
    return EXIT_OK


def _echo_epoch(row):
    parts = [f"epoch {row['epoch']:>4}"]
    parts += [f"{key}={row[key]:.4f}" for key, value in row.items()
              if key != "epoch" and value is not None]
    print("  ".join(parts), flush=True)


def cmd_train(args) -> int:
    cfg = TrainRunConfig.from_dict(_load_json(args.config, "run config"))
    report = train(cfg, progress=_echo_epoch)
    final = report["final"]
    print(report_mod.format_table([final], list(final)))
    fields = {"epochs": cfg.epochs, "final_loss": final["loss"]}
    for key in ("top1", "top5", "label_acc", "mean_class_acc"):
        if key in final:
            fields[f"final_{key}"] = final[key]
    fields["wall_s"] = report["wall_time_s"]
    fields["out"] = cfg.out_dir
    print(_status("ok", **fields))
    return EXIT_OK


def cmd_eval(args) -> int:
    params, model_cfg = load_checkpoint(args.checkpoint)
    ds = load_set(args.data)
    spec = ds.spec
    if (len(spec.classes) != model_cfg.n_classes
            or spec.agents != model_cfg.agents
            or (spec.height, spec.width) != (model_cfg.height,
                                             model_cfg.width)):
        raise DataFormatError(
            f"checkpoint {args.checkpoint} (classes={model_cfg.n_classes}, "
            f"agents={model_cfg.agents}, {model_cfg.height}x"
            f"{model_cfg.width}) does not fit dataset {args.data} "
            f"(classes={len(spec.classes)}, agents={spec.agents}, "
            f"{spec.height}x{spec.width})")
    run_cfg = TrainRunConfig(
        data_dir=str(args.data), out_dir=".", prompt_mode=args.prompt,
        m_clips=model_cfg.m_clips, flow_block_size=args.flow_block_size,
        flow_radius=args.flow_radius)
    clips = ds.split(args.split)
    split = prepare_split(clips, run_cfg, spec.agents)
    metrics = evaluate(params, model_cfg, split, args.batch_size)
    print(_status("ok", split=args.split, n=len(clips), prompt=args.prompt,
                  **metrics))
    return EXIT_OK


_GRADCHECK_DEFAULTS = {
    "prompt_mode": "scp-concat",
    "experts": 4,
    "m_clips": 2,
    "frames": 4,
    "height": 8,
    "width": 8,
    "n_classes": 4,
    "agents": 1,
    "channels": 8,
    "patch_size": 4,
    "depth": 1,
    "heads": 2,
    "roi_size": 3,
    "ar_nonlinearity": "tanh",
    "init_std": 0.35,
    "param_seed": 300,
    "data_seed": 400,
    "batch": 2,
}

_AGENT_BOXES = ((0.1, 0.1, 0.6, 0.6),
                (0.35, 0.3, 0.9, 0.85),
                (0.05, 0.55, 0.45, 0.95))


def cmd_gradcheck(args) -> int:
    spec = dict(_GRADCHECK_DEFAULTS)
    if args.config is not None:
        overrides = _load_json(args.config, "gradcheck config")
        unknown = set(overrides) - set(spec)
        if unknown:
            raise ConfigError(
                f"unknown gradcheck keys {sorted(unknown)} in "
                f"{args.config}; known keys are {sorted(spec)}")
        spec.update(overrides)
    if spec["prompt_mode"] not in ("none", "scp-concat", "scp-add",
                                   "scp-mul"):
        raise ConfigError(
            f"gradcheck prompt_mode must be none or an scp mode; got "
            f"'{spec['prompt_mode']}' (pixel prompts carry no parameters)")
    if not 1 <= spec["agents"] <= len(_AGENT_BOXES):
        raise ConfigError(
            f"gradcheck agents must be 1..{len(_AGENT_BOXES)}; got "
            f"{spec['agents']}")
    cfg = ModelConfig(
        height=spec["height"], width=spec["width"],
        n_classes=spec["n_classes"], m_clips=spec["m_clips"],
        experts=spec["experts"], agents=spec["agents"],
        roi_size=spec["roi_size"],
        ar_nonlinearity=spec["ar_nonlinearity"],
        encoder=EncoderConfig(patch_size=spec["patch_size"],
                              channels=spec["channels"],
                              depth=spec["depth"], heads=spec["heads"],
                              prompt_mode=spec["prompt_mode"]))
    params = init_params(cfg, RngStream(spec["param_seed"]),
                         std=spec["init_std"], scheme="flat")
    rng = np.random.default_rng(spec["data_seed"])
    b, t = spec["batch"], spec["frames"]
    videos = rng.uniform(0.0, 1.0, (b, t, cfg.height, cfg.width, 3))
    if cfg.agents == 1:
        labels = rng.integers(0, cfg.n_classes, size=b)
        boxes = None
    else:
        labels = rng.integers(0, cfg.n_classes, size=(b, cfg.agents))
        boxes = np.zeros((b, t, cfg.agents, 4))
        for a in range(cfg.agents):
            boxes[:, :, a] = _AGENT_BOXES[a]
    out = forward_batch(params, cfg, videos, labels=labels, boxes=boxes)
    report = grad_check(out.graph, out.loss, epsilon=1e-5,
                        tolerance=args.tolerance)
    print(_status(
        "ok" if report.passed else "fail",
        max_rel_err=report.max_relative_error,
        worst=f"{report.worst_parameter}[{report.worst_parameter_index}]",
        n_params=report.n_parameters, tolerance=report.tolerance))
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_flow(args) -> int:
    ds = load_set(args.in_dir)
    clip = next((c for c in ds.clips if c.clip_id == args.clip), None)
    if clip is None:
        raise DataFormatError(
            f"clip id {args.clip} not found in {args.in_dir} "
            f"(ids run 0..{len(ds.clips) - 1})")
    t, h, w = clip.frames.shape[:3]
    partition = ClipPartition.of(t, args.m)
    fused, flows = flow_prompt_video(clip.frames, partition,
                                     args.block_size, args.radius)
    mags = np.stack([flow_prompt_map(f, h, w) for f in flows])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fused_path = out / f"fused_{clip.clip_id:04d}.scpt"
    mag_path = out / f"flow_magnitude_{clip.clip_id:04d}.scpt"
    write_tensor(fused_path, fused)
    write_tensor(mag_path, mags)
    print(_status("ok", clip=clip.clip_id, label=clip.label, m=partition.m,
                  block=args.block_size, radius=args.radius,
                  fused=fused_path, magnitude=mag_path))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = TrainRunConfig.from_dict(_load_json(args.config, "run config"))
    try:
        l_values = [int(v) for v in args.l.split(",") if v.strip() != ""]
    except ValueError:
        raise UsageError(f"--l must be comma-separated integers; got "
                         f"'{args.l}'")
    rows = ablate_experts(cfg, l_values)
    out = Path(cfg.out_dir)
    report_mod.write_ablation_csv(out / "ablation.csv", rows)
    report_mod.render_ablation_png(out / "ablation.png", rows)
    if rows:
        print(report_mod.format_table(rows, ["l", "accuracy", "error"]))
    failures = sum(1 for r in rows if r["error"])
    print(_status("ok", rows=len(rows), failures=failures, out=cfg.out_dir))
    return EXIT_OK


# ------------------------------------------------------------------ wiring


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="scprompt",
        description="Soft conditional prompt learning on synthetic "
                    "moving-sprite videos.")
    sub = parser.add_subparsers(dest="command", metavar="<command>",
                                required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset",
                       description="Render a moving-sprites dataset from a "
                                   "JSON generator spec.")
    p.add_argument("--spec", required=True,
                   help="JSON file of generator spec overrides ({} for "
                        "defaults)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one run from a config file",
                       description="Run training as described by a JSON "
                                   "run config; writes checkpoints, "
                                   "report.json, history.csv, curves.png.")
    p.add_argument("--config", required=True, help="JSON run config file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset",
                       description="Score a saved checkpoint on one split "
                                   "of a dataset directory.")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=("train", "val"), default="val",
                   help="split to score (default val)")
    p.add_argument("--prompt", choices=("none", "flow", "mask"),
                   default="none",
                   help="pixel-level prompt to apply before scoring; "
                        "learned prompts ride in the checkpoint itself")
    p.add_argument("--batch-size", type=int, default=16,
                   help="evaluation batch size")
    p.add_argument("--flow-block-size", type=int, default=4,
                   help="block size when --prompt flow")
    p.add_argument("--flow-radius", type=int, default=2,
                   help="search radius when --prompt flow")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="check analytic gradients against finite "
                            "differences",
                       description="Build a small end-to-end model and "
                                   "compare every parameter gradient to "
                                   "central finite differences. Without "
                                   "--config, checks a pinned tiny "
                                   "configuration.")
    p.add_argument("--config", default=None,
                   help="JSON overrides for the tiny model (keys: "
                        + ", ".join(sorted(_GRADCHECK_DEFAULTS)) + ")")
    p.add_argument("--tolerance", type=float, default=1e-5,
                   help="max relative error allowed (default 1e-5)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("flow", help="inspect flow prompting on one clip",
                       description="Estimate clip-to-clip flow for one "
                                   "stored clip and write the fused frames "
                                   "plus the flow-magnitude maps as SCPT "
                                   "tensors.")
    p.add_argument("--in", dest="in_dir", required=True,
                   help="dataset directory")
    p.add_argument("--clip", type=int, required=True, help="clip id")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--m", type=int, default=4,
                   help="clips per video (default 4)")
    p.add_argument("--block-size", type=int, default=4,
                   help="matching block size (default 4)")
    p.add_argument("--radius", type=int, default=2,
                   help="search radius in pixels (default 2)")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("ablate-experts",
                       help="train once per expert count and tabulate",
                       description="Re-run one scp config with varying "
                                   "expert counts; writes ablation.csv and "
                                   "ablation.png under the config's "
                                   "out_dir.")
    p.add_argument("--config", required=True, help="JSON run config file")
    p.add_argument("--l", default="4,8,16,32",
                   help="comma-separated expert counts "
                        "(default 4,8,16,32)")
    p.set_defaults(func=cmd_ablate)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(_status("error", code=EXIT_USAGE))
        return EXIT_USAGE
    except SystemExit as exc:          # --help and friends
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(_status("error", code=EXIT_USAGE))
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(_status("error", code=EXIT_NUMERIC))
        return EXIT_NUMERIC
    except (ScpromptError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(_status("error", code=EXIT_DATA))
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
