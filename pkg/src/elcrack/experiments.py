"""Config-driven L_p sweep and heatmap panels.

A sweep trains one model per (p, repeat) on a single shared split and
writes::

    <out>/resolved_config.yaml   exact configuration used
    <out>/provenance.json        dataset/split checksums, seed, code version
    <out>/split.json             image paths per split
    <out>/report.json            one record per (p, repeat); no timestamps
    <out>/report.md              metric x p table
    <out>/run_meta.json          wall-clock information
    <out>/runs/p_<p>/rep_<r>/    checkpoint.pt, history.jsonl, metrics.json
"""

from __future__ import annotations

import copy
import json
import logging
import math
import platform
import subprocess
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

import elcrack
from elcrack import kernels
from elcrack.data import (
    DEFAULT_RATIOS,
    EL_IMAGE_SIZE,
    DatasetSplit,
    dataset_checksum,
    load_dataset,
    preprocess,
    read_image,
    stratified_split,
    synthetic_dataset,
    uses_proxy_labels,
)
from elcrack.model import CRACK, ModelConfig, build_model, load_checkpoint, save_checkpoint
from elcrack.pooling import PoolingSpec, format_p, parse_p
from elcrack.segment import (
    PolarityMode,
    apply_gate,
    default_polarity,
    extract_heatmap,
    threshold_mask,
    upsample_mask,
)
from elcrack.train import MetricsReport, TrainConfig, confusion_from_labels, predict, train

log = logging.getLogger(__name__)

TABLE_P_VALUES = (1.0, 2.0, 3.0, 4.0, 5.0, 9.0, math.inf)
METRIC_ROWS = (
    ("precision_crack", "Precision"),
    ("recall_crack", "Recall"),
    ("f1_crack", "f1 score"),
    ("accuracy", "Accuracy"),
)


OVERFIT_IMAGES = 40
OVERFIT_SIZE = 64


class ConfigError(ValueError):
    pass


def overfit_train_config(epochs: int = 50, seed: int = 0) -> TrainConfig:
    """Training setup for the synthetic line-vs-noise sanity task.

    The backbone there is randomly initialized, so BatchNorm statistics are
    frozen: running statistics of an untrained network lag far behind the
    batch statistics and make eval-mode predictions meaningless early on.
    """
    return TrainConfig(
        epochs=epochs,
        batch_size=8,
        learning_rate=1e-4,
        augment=False,
        balance=True,
        freeze_batchnorm=True,
        early_stop_patience=epochs,
        seed=seed,
    )


@dataclass
class DataConfig:
    root: str | None = None
    labels_file: str | None = None
    policy: str = "strict"
    index_file: str = "labels.csv"
    image_size: int = EL_IMAGE_SIZE
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    split_by_module: bool = False
    # generate a line-vs-noise set instead of reading files: {"n": 40, "size": 64, "seed": 0}
    synthetic: dict | None = None


@dataclass
class SweepConfig:
    p_values: list[float] = field(default_factory=lambda: list(TABLE_P_VALUES))
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/sweep"
    seed: int = 0
    repeats: int = 1
    jobs: int = 1
    pretrained_weights_path: str | None = None
    epsilon: float = 1e-12

    def __post_init__(self):
        if not self.p_values:
            raise ConfigError("p_values must not be empty")
        try:
            self.p_values = [PoolingSpec(p, self.epsilon).p for p in self.p_values]
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.data.synthetic is None and not self.data.root:
            raise ConfigError("data.root is required unless data.synthetic is set")

    def model_config(self, p: float, seed: int) -> ModelConfig:
        size = self.data.synthetic.get("size", 64) if self.data.synthetic else self.data.image_size
        return ModelConfig(
            input_size=size,
            pooling=PoolingSpec(p, self.epsilon),
            pretrained_weights_path=self.pretrained_weights_path,
            seed=seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["p_values"] = [format_p(p) for p in self.p_values]
        d["data"]["ratios"] = list(self.data.ratios)
        return d


def _set_path(d: dict, dotted: str, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def parse_p_list(text) -> list[float]:
    if isinstance(text, str):
        text = [t for t in text.split(",") if t.strip()]
    return [parse_p(t) for t in text]


def sweep_config_from_dict(raw: dict, overrides: dict | None = None) -> SweepConfig:
    """Build a :class:`SweepConfig` from a nested dict; ``overrides`` use dotted keys and win."""
    raw = copy.deepcopy(raw or {})
    for key, value in (overrides or {}).items():
        _set_path(raw, key, value)
    known = {f.name for f in fields(SweepConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        tr = TrainConfig(**raw.pop("train", {}))
        data = dict(raw.pop("data", {}))
        if "ratios" in data:
            data["ratios"] = tuple(float(r) for r in data["ratios"])
        dc = DataConfig(**data)
        if "p_values" in raw:
            raw["p_values"] = parse_p_list(raw["p_values"])
        return SweepConfig(train=tr, data=dc, **raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_sweep_config(path: str | Path | None, overrides: dict | None = None) -> SweepConfig:
    raw = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return sweep_config_from_dict(raw, overrides)


def code_version() -> str:
    version = elcrack.__version__
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            version += "+g" + rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return version


def load_samples(cfg: SweepConfig):
    """Samples for the configured data source."""
    d = cfg.data
    if d.synthetic is not None:
        samples, _ = synthetic_dataset(**d.synthetic)
        return samples
    return load_dataset(d.root, d.labels_file, policy=d.policy, index_file=d.index_file, image_size=d.image_size)


def make_split(cfg: SweepConfig, samples) -> DatasetSplit:
    return stratified_split(samples, cfg.data.ratios, seed=cfg.seed, by_module=cfg.data.split_by_module)


def run_dir(out: Path, p: float, repeat: int) -> Path:
    return out / "runs" / f"p_{format_p(p)}" / f"rep_{repeat}"


def _run_one(cfg: SweepConfig, split: DatasetSplit, p: float, repeat: int, out: Path) -> dict:
    seed = cfg.seed + repeat
    record = {"p": format_p(p), "repeat": repeat, "seed": seed, "status": "failed"}
    try:
        model = build_model(cfg.model_config(p, seed))
        tcfg = TrainConfig(**{**asdict(cfg.train), "seed": seed})
        rd = run_dir(out, p, repeat)
        rd.mkdir(parents=True, exist_ok=True)
        result = train(model, split, tcfg, history_path=rd / "history.jsonl")
        true, pred, test_loss, crack_means = predict(model, split.test, tcfg.eval_batch_size)
        metrics = MetricsReport.from_confusion(confusion_from_labels(true, pred))
        is_crack = true == CRACK
        save_checkpoint(
            model,
            rd / "checkpoint.pt",
            metadata={
                "train_config": asdict(tcfg),
                "best_epoch": result.best_epoch,
                "split_checksum": split.checksum(),
                "batchnorm": "frozen" if tcfg.freeze_batchnorm else "fine-tuned",
            },
        )
        record.update(
            status="ok",
            metrics=metrics.to_dict(),
            best_epoch=result.best_epoch,
            epochs_run=len(result.history),
            test_loss=test_loss,
            crack_map_mean_on_crack=float(crack_means[is_crack].mean()) if is_crack.any() else None,
            crack_map_mean_on_non_crack=float(crack_means[~is_crack].mean()) if (~is_crack).any() else None,
            split_checksum=split.checksum(),
        )
        (rd / "metrics.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
        log.info("p=%s repeat=%d: %s", format_p(p), repeat, metrics)
    except Exception as exc:  # a failed run must not stop the sweep
        log.error("run p=%s repeat=%d failed: %s", format_p(p), repeat, exc)
        record["error"] = f"{type(exc).__name__}: {exc}"
        record["traceback"] = traceback.format_exc(limit=5)
    return record


def _worker(payload):
    cfg_dict, split, p, repeat, out = payload
    cfg = sweep_config_from_dict(cfg_dict)
    return _run_one(cfg, split, p, repeat, Path(out))


def summarize(records, p_values) -> dict:
    """Per-p mean and std of each metric over successful repeats."""
    columns = {}
    for p in p_values:
        key = format_p(p)
        ok = [r for r in records if r["p"] == key and r["status"] == "ok"]
        col = {"n_ok": len(ok), "n_runs": sum(r["p"] == key for r in records)}
        for name, _ in METRIC_ROWS:
            vals = np.array([r["metrics"][name] for r in ok], dtype=np.float64)
            col[name] = {"mean": float(vals.mean()), "std": float(vals.std())} if len(vals) else None
        col["complete"] = col["n_ok"] == col["n_runs"]
        columns[key] = col
    return columns


def format_table(summary: dict, proxy: bool) -> str:
    keys = list(summary)
    header = "| Norm | " + " | ".join(f"L_{k}" for k in keys) + " |"
    lines = [header, "|" + "---|" * (len(keys) + 1)]
    for name, title in METRIC_ROWS:
        cells = []
        for k in keys:
            v = summary[k][name]
            if v is None:
                cells.append("n/a")
            elif summary[k]["n_ok"] > 1:
                cells.append(f"{v['mean']:.2f} ± {v['std']:.2f}")
            else:
                cells.append(f"{v['mean']:.2f}")
            if not summary[k]["complete"] and v is not None:
                cells[-1] += "*"
        lines.append(f"| {title} | " + " | ".join(cells) + " |")
    notes = []
    if any(not c["complete"] for c in summary.values()):
        notes.append("* incomplete column: at least one run failed (see report.json)")
    if proxy:
        notes.append(
            "PROXY LABELS: crack labels derived from defect probability >= 0.5; "
            "not comparable to results on manual crack annotations."
        )
    return "\n".join(lines + [""] + notes) + "\n"


def run_sweep(cfg: SweepConfig, out_dir: str | Path | None = None) -> dict:
    """Train/evaluate one model per (p, repeat) on a shared split and write the report."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    samples = load_samples(cfg)
    split = make_split(cfg, samples)
    proxy = uses_proxy_labels(samples)

    (out / "resolved_config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
    provenance = {
        "code_version": code_version(),
        "kernel_backend": kernels.BACKEND,
        "seed": cfg.seed,
        "dataset_checksum": dataset_checksum(samples),
        "split_checksum": split.checksum(),
        "split_summary": split.summary(),
        "n_samples": len(samples),
        "proxy_labels": proxy,
    }
    (out / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    (out / "split.json").write_text(
        json.dumps({k: [s.image_path for s in v] for k, v in split.parts().items()}, indent=1) + "\n"
    )

    jobs = [(p, r) for p in cfg.p_values for r in range(cfg.repeats)]
    if cfg.jobs > 1:
        payloads = [(cfg.to_dict(), split, p, r, str(out)) for p, r in jobs]
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            records = list(pool.map(_worker, payloads))
    else:
        records = [_run_one(cfg, split, p, r, out) for p, r in jobs]

    summary = summarize(records, cfg.p_values)
    report = {
        "columns": [format_p(p) for p in cfg.p_values],
        "records": [{k: v for k, v in r.items() if k != "traceback"} for r in records],
        "summary": summary,
        "incomplete": [k for k, c in summary.items() if not c["complete"]],
        "proxy_labels": proxy,
        "split_checksum": split.checksum(),
        "dataset_checksum": provenance["dataset_checksum"],
        "seed": cfg.seed,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    table = format_table(summary, proxy)
    (out / "report.md").write_text(table, encoding="utf-8")
    (out / "run_meta.json").write_text(
        json.dumps(
            {
                "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
                "duration_s": round(time.time() - started, 2),
                "python": platform.python_version(),
                "host": platform.node(),
            },
            indent=2,
        )
        + "\n"
    )
    log.info("sweep report:\n%s", table)
    return report


# -- panels ------------------------------------------------------------------------


def heatmap_to_uint8(heatmap: np.ndarray) -> np.ndarray:
    """Per-map min-max scaling to 0..255; a constant map renders as uniform mid-gray."""
    h = np.asarray(heatmap, dtype=np.float64)
    lo, hi = float(h.min()), float(h.max())
    if hi - lo <= 0:
        return np.full(h.shape, 128, dtype=np.uint8)
    return np.rint((h - lo) / (hi - lo) * 255.0).astype(np.uint8)


def _resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    from elcrack.segment import nearest_indices

    return img[np.ix_(nearest_indices(img.shape[0], size), nearest_indices(img.shape[1], size))]


def overlay_mask(pixels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    rgb = np.repeat(pixels[..., None], 3, axis=2).astype(np.float64)
    m = mask.astype(bool)
    rgb[m] = 0.5 * rgb[m] + 0.5 * np.array([255.0, 0.0, 0.0])
    return np.rint(rgb).astype(np.uint8)


def emit_panel(
    checkpoints: dict,
    image_paths,
    out_dir: str | Path,
    overlay: bool = False,
    polarity: dict | str | None = None,
) -> dict:
    """Write the original image and one crack heatmap per p for each image.

    ``checkpoints`` maps p to a checkpoint path; missing files are listed in
    the returned ``skipped`` entry.  With ``overlay`` a gated segmentation
    image is added per p (input / heatmap / segmentation).  ``polarity`` is
    one mode for all p or a ``{p: mode}`` mapping; p <= 4 needs one when
    ``overlay`` is set.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    models, skipped = {}, []
    for p, path in checkpoints.items():
        p = parse_p(p)
        if path is None or not Path(path).is_file():
            skipped.append({"p": format_p(p), "checkpoint": None if path is None else str(path)})
            log.warning("missing checkpoint for p=%s: %s", format_p(p), path)
            continue
        models[p] = load_checkpoint(path)
    written = []
    for image_path in image_paths:
        image_path = Path(image_path)
        stem = image_path.stem
        pixels = read_image(image_path, expected_size=None)
        original = out / f"{stem}_original.png"
        Image.fromarray(pixels).save(original)
        written.append(original)
        for p, model in models.items():
            size = model.config.input_size
            heatmap, label, probs = extract_heatmap(model, preprocess(pixels, size))
            tag = f"L{format_p(p)}"
            hm_file = out / f"{stem}_{tag}_heatmap.png"
            Image.fromarray(_resize_nearest(heatmap_to_uint8(heatmap), size)).save(hm_file)
            written.append(hm_file)
            if overlay:
                mode = polarity.get(format_p(p), polarity.get(p)) if isinstance(polarity, dict) else polarity
                mode = mode or default_polarity(p)
                if mode is None:
                    raise ValueError(f"p = {format_p(p)} <= 4: an explicit polarity is needed for the overlay")
                mask = upsample_mask(apply_gate(label, threshold_mask(heatmap, PolarityMode(mode))), size)
                seg_file = out / f"{stem}_{tag}_segmentation.png"
                Image.fromarray(overlay_mask(pixels, mask.grid)).save(seg_file)
                written.append(seg_file)
    return {"written": [str(w) for w in written], "skipped": skipped}
