"""Command-line entry point: ``elcrack <subcommand> ...``.

Exit codes: 0 success, 1 config/data error, 2 partial sweep failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from elcrack.pooling import format_p, parse_p

log = logging.getLogger("elcrack")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def _overrides(args) -> dict:
    ov = _parse_set(getattr(args, "set", None))
    if getattr(args, "p", None):
        ov["p_values"] = args.p
    if getattr(args, "seed", None) is not None:
        ov["seed"] = args.seed
    if getattr(args, "repeats", None) is not None:
        ov["repeats"] = args.repeats
    if getattr(args, "jobs", None) is not None:
        ov["jobs"] = args.jobs
    if getattr(args, "out", None):
        ov["output_dir"] = str(args.out)
    if getattr(args, "weights", None):
        ov["pretrained_weights_path"] = str(args.weights)
    if getattr(args, "policy", None):
        ov["data.policy"] = args.policy
    if getattr(args, "split_by_module", False):
        ov["data.split_by_module"] = True
    return ov


def _config(args):
    from elcrack.experiments import load_sweep_config

    return load_sweep_config(args.config, _overrides(args))


def cmd_prepare_data(args) -> int:
    from elcrack.data import synthetic_dataset, write_dataset
    from elcrack.experiments import dataset_checksum, load_samples, make_split

    if args.synthetic:
        samples, masks = synthetic_dataset(n=args.synthetic, size=args.size, seed=args.seed or 0)
        index, labels = write_dataset(samples, args.out, masks)
        print(f"wrote {len(samples)} synthetic images to {args.out} (index {index.name}, labels {labels.name})")
        return EXIT_OK
    cfg = _config(args)
    samples = load_samples(cfg)
    split = make_split(cfg, samples)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {
        "n_samples": len(samples),
        "dataset_checksum": dataset_checksum(samples),
        "split_checksum": split.checksum(),
        "split_summary": split.summary(),
        "proxy_labels": any(s.label_source == "proxy" for s in samples),
    }
    (out / "split.json").write_text(
        json.dumps({k: [s.image_path for s in v] for k, v in split.parts().items()}, indent=1) + "\n"
    )
    (out / "data_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    from elcrack.experiments import load_samples, make_split
    from elcrack.model import build_model
    from elcrack.train import train

    cfg = _config(args)
    if len(cfg.p_values) != 1:
        raise ValueError("train takes exactly one --p value")
    p = cfg.p_values[0]
    samples = load_samples(cfg)
    split = make_split(cfg, samples)
    out = Path(cfg.output_dir)
    model = build_model(cfg.model_config(p, cfg.seed))
    result = train(model, split, cfg.train, history_path=out / "history.jsonl", checkpoint_path=out / "checkpoint.pt")
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    print(f"best epoch {result.best_epoch}; checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from elcrack.experiments import load_samples, make_split
    from elcrack.model import load_checkpoint
    from elcrack.train import evaluate

    cfg = _config(args)
    model = load_checkpoint(args.checkpoint)
    split = make_split(cfg, load_samples(cfg))
    report = evaluate(model, getattr(split, args.split))
    text = json.dumps({"p": format_p(model.config.pooling.p), "split": args.split, **report.to_dict()}, indent=2)
    print(text)
    if args.json:
        Path(args.json).write_text(text + "\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from elcrack.experiments import run_sweep

    cfg = _config(args)
    report = run_sweep(cfg)
    print((Path(cfg.output_dir) / "report.md").read_text())
    return EXIT_PARTIAL if report["incomplete"] else EXIT_OK


def cmd_segment(args) -> int:
    from elcrack.data import preprocess, read_image
    from elcrack.model import load_checkpoint
    from elcrack.segment import export_mask, segment_image

    model = load_checkpoint(args.checkpoint)
    p = model.config.pooling.p
    for path in args.images:
        pixels = read_image(Path(path), expected_size=model.config.input_size)
        result = segment_image(model, preprocess(pixels, model.config.input_size), polarity=args.polarity)
        png, _ = export_mask(result, path, p, args.out)
        print(f"{path}: {result.label} (gated={result.mask.gated}) -> {png}")
    return EXIT_OK


def _checkpoint_map(args) -> dict:
    from elcrack.experiments import run_dir

    checkpoints = {}
    for item in args.checkpoint or []:
        p, path = item.split("=", 1)
        checkpoints[parse_p(p)] = path
    if args.sweep_dir:
        for p in args.p or []:
            checkpoints.setdefault(p, str(run_dir(Path(args.sweep_dir), p, 0) / "checkpoint.pt"))
    return checkpoints


def cmd_panel(args) -> int:
    from elcrack.experiments import emit_panel

    result = emit_panel(_checkpoint_map(args), args.images, args.out, overlay=args.overlay, polarity=args.polarity)
    for path in result["written"]:
        print(path)
    for miss in result["skipped"]:
        print(f"skipped p={miss['p']}: missing checkpoint {miss['checkpoint']}", file=sys.stderr)
    return EXIT_OK


def _p_list(text):
    return [parse_p(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elcrack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", type=Path, help="YAML config file")
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--weights", type=Path, help="ImageNet ResNet-50 state dict")
        sp.add_argument("--policy", choices=("strict", "proxy"), help="label policy for unlabeled images")
        sp.add_argument("--split-by-module", action="store_true")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted)")

    sp = sub.add_parser("prepare-data", help="validate a dataset and write its split, or generate synthetic data")
    common(sp)
    sp.add_argument("--synthetic", type=int, metavar="N", help="write N synthetic line-vs-noise images to --out")
    sp.add_argument("--size", type=int, default=64)
    sp.set_defaults(func=cmd_prepare_data)

    sp = sub.add_parser("train", help="train one model")
    common(sp, out_required=True)
    sp.add_argument("--p", type=_p_list, required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="metrics of a checkpoint on a split")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--json", type=Path)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep", help="train and evaluate one model per p")
    common(sp, out_required=True)
    sp.add_argument("--p", type=_p_list, help="comma-separated exponents, e.g. 1,2,3,4,5,9,inf")
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--jobs", type=int, help="parallel worker processes (default 1)")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("segment", help="write crack masks for images")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--polarity", choices=("direct", "inverted"))
    sp.add_argument("images", nargs="+")
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("panel", help="heatmap panels per p (and segmentation overlays)")
    sp.add_argument("--checkpoint", action="append", metavar="P=PATH")
    sp.add_argument("--sweep-dir", type=Path)
    sp.add_argument("--p", type=_p_list)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--overlay", action="store_true")
    sp.add_argument("--polarity", choices=("direct", "inverted"))
    sp.add_argument("images", nargs="+")
    sp.set_defaults(func=cmd_panel)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
