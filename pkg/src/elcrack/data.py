"""EL cell dataset: loading, labels, preprocessing, splits and batch streams.

The public dataset ships an index file with rows ``path probability type``
(e.g. ``images/cell0001.png  1.0  mono``).  Crack labels come from a
separate ``path,crack_label`` file.  When that file does not cover an
image, the ``proxy`` policy derives a label from the defect probability
(``>= 0.5`` -> crack); those labels are an approximation and every output
produced from them is flagged.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from elcrack.model import CLASSES, CRACK, NON_CRACK

log = logging.getLogger(__name__)

EL_IMAGE_SIZE = 300
DEFECT_PROBABILITIES = (0.0, 1 / 3, 2 / 3, 1.0)
CELL_TYPES = ("mono", "poly")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
DEFAULT_RATIOS = (0.70, 0.15, 0.15)
LABEL_POLICIES = ("strict", "proxy")


@dataclass(eq=False)
class ImageSample:
    image_path: str
    pixels: np.ndarray
    cell_type: str
    defect_probability: float
    crack_label: str
    module_id: str | None = None
    label_source: str = "file"

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 2 or px.dtype != np.uint8 or px.shape[0] != px.shape[1]:
            raise ValueError(
                f"{self.image_path}: expected a square single-channel 8-bit image, "
                f"got shape {px.shape} dtype {px.dtype}"
            )
        if self.cell_type not in CELL_TYPES:
            raise ValueError(f"{self.image_path}: unknown cell type {self.cell_type!r}")
        self.defect_probability = _snap_probability(self.defect_probability, self.image_path)
        if self.crack_label not in CLASSES:
            raise ValueError(f"{self.image_path}: crack label must be one of {CLASSES}")
        self.pixels.setflags(write=False)

    @property
    def label_index(self) -> int:
        return CLASSES.index(self.crack_label)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def checksum(self) -> str:
        return hashlib.sha256(self.pixels.tobytes()).hexdigest()


def _snap_probability(value: float, where: str) -> float:
    for p in DEFECT_PROBABILITIES:
        if abs(float(value) - p) < 1e-6:
            return p
    raise ValueError(f"{where}: defect probability {value} is not one of 0, 1/3, 2/3, 1")


def _split_row(line: str) -> list[str]:
    if "," in line:
        return [t.strip() for t in line.split(",")]
    if ";" in line:
        return [t.strip() for t in line.split(";")]
    return line.split()


def read_index(path: str | Path) -> list[tuple[str, float, str]]:
    """Rows of the public index file: ``(image path, defect probability, cell type)``."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = _split_row(line)
            if len(parts) < 3:
                raise ValueError(f"{path}:{lineno}: expected 'path probability type', got {line!r}")
            try:
                prob = float(parts[1])
            except ValueError:
                if lineno == 1:  # header row
                    continue
                raise ValueError(f"{path}:{lineno}: bad probability {parts[1]!r}") from None
            rows.append((parts[0], prob, parts[2]))
    return rows


def read_labels(path: str | Path) -> dict[str, dict[str, str]]:
    """``path -> {"crack_label": ..., "module": ...}`` from a labels file with a header."""
    out = {}
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    if not text.strip():
        return out
    try:
        dialect = csv.Sniffer().sniff(text.splitlines()[0], delimiters=",;\t ")
    except csv.Error:
        dialect = csv.excel
    reader = csv.reader(text.splitlines(), dialect)
    header = [h.strip().lower() for h in next(reader)]
    try:
        path_col = header.index("path")
        label_col = header.index("crack_label")
    except ValueError:
        raise ValueError(f"{path}: header must contain 'path' and 'crack_label', got {header}") from None
    module_col = header.index("module") if "module" in header else None
    for row in reader:
        if not row:
            continue
        label = row[label_col].strip().lower().replace("_", "-")
        if label not in CLASSES:
            raise ValueError(f"{path}: bad crack label {row[label_col]!r} for {row[path_col]}")
        entry = {"crack_label": label}
        if module_col is not None and row[module_col].strip():
            entry["module"] = row[module_col].strip()
        out[row[path_col].strip()] = entry
    return out


def read_image(path: Path, expected_size: int | None = EL_IMAGE_SIZE) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I;16", "I"):
            im = im.convert("L")
        arr = np.asarray(im)
    if arr.dtype != np.uint8:
        raise ValueError(f"{path}: expected 8-bit grayscale, got dtype {arr.dtype}")
    if expected_size is not None and arr.shape != (expected_size, expected_size):
        raise ValueError(f"{path}: expected {expected_size}x{expected_size} pixels, got {arr.shape}")
    return np.ascontiguousarray(arr)


def load_dataset(
    root: str | Path,
    labels_file: str | Path | None,
    policy: str = "strict",
    index_file: str = "labels.csv",
    image_size: int | None = EL_IMAGE_SIZE,
) -> list[ImageSample]:
    """Load every indexed image with its weak labels.

    ``labels_file`` maps image path to crack/non-crack.  Images missing from
    it raise under ``policy="strict"`` and get a probability-derived proxy
    label under ``policy="proxy"``.
    """
    if policy not in LABEL_POLICIES:
        raise ValueError(f"policy must be one of {LABEL_POLICIES}, got {policy!r}")
    root = Path(root)
    index = read_index(root / index_file)
    labels = read_labels(labels_file) if labels_file else {}
    samples = []
    seen = set()
    for rel, prob, cell_type in index:
        if rel in seen:
            raise ValueError(f"{rel} is listed twice in {root / index_file}")
        seen.add(rel)
        path = root / rel
        if not path.is_file():
            raise FileNotFoundError(f"indexed image missing: {path}")
        entry = labels.get(rel)
        if entry is None:
            if policy == "strict":
                raise KeyError(f"image {rel!r} has no crack label in {labels_file} (policy=strict)")
            label = CLASSES[CRACK] if prob >= 0.5 else CLASSES[NON_CRACK]
            source = "proxy"
            module = None
        else:
            label = entry["crack_label"]
            source = "file"
            module = entry.get("module")
        samples.append(
            ImageSample(
                image_path=rel,
                pixels=read_image(path, image_size),
                cell_type=cell_type,
                defect_probability=prob,
                crack_label=label,
                module_id=module,
                label_source=source,
            )
        )
    counts = Counter((s.crack_label, s.cell_type) for s in samples)
    log.info("loaded %d samples from %s: %s", len(samples), root, dict(sorted(counts.items())))
    n_proxy = sum(s.label_source == "proxy" for s in samples)
    if n_proxy:
        log.warning("%d of %d crack labels are PROXY labels (defect probability >= 0.5)", n_proxy, len(samples))
    return samples


def dataset_checksum(samples) -> str:
    h = hashlib.sha256()
    for s in sorted(samples, key=lambda s: s.image_path):
        h.update(f"{s.image_path}\t{s.crack_label}\t{s.cell_type}\t{s.checksum()}\n".encode())
    return h.hexdigest()


def uses_proxy_labels(samples) -> bool:
    return any(s.label_source == "proxy" for s in samples)


def normalize(pixels: np.ndarray) -> torch.Tensor:
    x = torch.from_numpy(np.asarray(pixels, dtype=np.float32) / np.float32(255.0))
    x = x.unsqueeze(0).expand(3, *x.shape)
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return (x - mean) / std


def preprocess(sample: ImageSample | np.ndarray, size: int = EL_IMAGE_SIZE) -> torch.Tensor:
    """Grayscale -> ``[3, size, size]`` float tensor normalized with ImageNet statistics."""
    pixels = sample.pixels if isinstance(sample, ImageSample) else np.asarray(sample)
    if pixels.shape != (size, size):
        raise ValueError(f"expected a {size}x{size} image, got {pixels.shape}; images are never resized")
    return normalize(pixels)


# -- splits -------------------------------------------------------------------


@dataclass
class DatasetSplit:
    train: list[ImageSample]
    val: list[ImageSample]
    test: list[ImageSample]
    seed: int
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    by_module: bool = False

    def parts(self):
        return {"train": self.train, "val": self.val, "test": self.test}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, part in self.parts().items():
            h.update(name.encode())
            for s in part:
                h.update(s.image_path.encode() + b"\n")
        return h.hexdigest()

    def summary(self) -> dict:
        return {
            name: dict(sorted(Counter(s.crack_label for s in part).items())) | {"total": len(part)}
            for name, part in self.parts().items()
        }


def _largest_remainder(total: int, ratios) -> list[int]:
    ideal = [total * r for r in ratios]
    counts = [math.floor(v) for v in ideal]
    order = sorted(range(len(ratios)), key=lambda k: (counts[k] - ideal[k], k))
    for k in order[: total - sum(counts)]:
        counts[k] += 1
    return counts


def _allocate(strata_sizes: list[int], ratios) -> np.ndarray:
    """Integer table ``[stratum, split]`` with exact row sums and global split sizes."""
    n = sum(strata_sizes)
    targets = _largest_remainder(n, ratios)
    ideal = np.array([[s * r for r in ratios] for s in strata_sizes])
    table = np.floor(ideal).astype(int)
    row_left = np.array(strata_sizes) - table.sum(1)
    col_left = np.array(targets) - table.sum(0)
    frac = ideal - table
    for flat in np.argsort(-frac, axis=None, kind="stable"):
        s, k = divmod(int(flat), len(ratios))
        if row_left[s] > 0 and col_left[k] > 0:
            table[s, k] += 1
            row_left[s] -= 1
            col_left[k] -= 1
    for s in range(len(strata_sizes)):
        for k in range(len(ratios)):
            while row_left[s] > 0 and col_left[k] > 0:
                table[s, k] += 1
                row_left[s] -= 1
                col_left[k] -= 1
    return table


def _ensure_class_coverage(table: np.ndarray, strata: list[tuple], n_splits: int) -> None:
    """Move single units so that each class appears in each split, keeping split sizes."""
    classes = sorted({key[0] for key in strata})
    for cls in classes:
        rows = [i for i, key in enumerate(strata) if key[0] == cls]
        others = [i for i, key in enumerate(strata) if key[0] != cls]
        for k in range(n_splits):
            if table[rows, k].sum() > 0:
                continue
            donors = [(table[i, j], i, j) for i in rows for j in range(n_splits) if j != k and table[i, j] > 1]
            if not donors:
                donors = [
                    (table[i, j], i, j)
                    for i in rows
                    for j in range(n_splits)
                    if j != k and table[rows, j].sum() > 1 and table[i, j] > 0
                ]
            if not donors:
                continue
            _, i, j = max(donors)
            swap = [(table[o, k], o) for o in others if table[o, k] > 0]
            if not swap:
                continue
            _, o = max(swap)
            table[i, j] -= 1
            table[i, k] += 1
            table[o, k] -= 1
            table[o, j] += 1


def stratified_split(
    samples,
    ratios=DEFAULT_RATIOS,
    seed: int = 0,
    by_module: bool = False,
) -> DatasetSplit:
    """Deterministic train/val/test split stratified by (crack label, cell type).

    With ``by_module=True`` whole modules are kept in one split (needs
    ``module_id`` on every sample); stratification is then approximate.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    samples = sorted(samples, key=lambda s: s.image_path)
    by_class = Counter(s.crack_label for s in samples)
    for cls in CLASSES:
        if by_class[cls] < 3:
            raise ValueError(
                f"class {cls!r} has {by_class[cls]} samples; at least 3 are needed to stratify "
                f"into train/val/test (change the ratios or add data)"
            )
    rng = np.random.default_rng(seed)
    if by_module:
        parts = _module_split(samples, ratios, rng)
    else:
        groups = defaultdict(list)
        for s in samples:
            groups[(s.crack_label, s.cell_type)].append(s)
        strata = sorted(groups)
        table = _allocate([len(groups[k]) for k in strata], ratios)
        _ensure_class_coverage(table, strata, 3)
        parts = [[], [], []]
        for row, key in zip(table, strata):
            members = groups[key]
            perm = rng.permutation(len(members))
            start = 0
            for k, count in enumerate(row):
                parts[k].extend(members[i] for i in perm[start : start + count])
                start += count
        parts = [sorted(p, key=lambda s: s.image_path) for p in parts]
    for name, part in zip(("train", "val", "test"), parts):
        present = {s.crack_label for s in part}
        if present != set(CLASSES):
            raise ValueError(
                f"{name} split lacks class(es) {sorted(set(CLASSES) - present)}; "
                f"the dataset is too small for ratios {ratios}, change the ratios"
            )
    return DatasetSplit(parts[0], parts[1], parts[2], seed=seed, ratios=ratios, by_module=by_module)


def _module_split(samples, ratios, rng):
    modules = defaultdict(list)
    for s in samples:
        if s.module_id is None:
            raise ValueError(f"{s.image_path} has no module id; --split-by-module needs a 'module' column")
        modules[s.module_id].append(s)
    names = sorted(modules)
    names = [names[i] for i in rng.permutation(len(names))]
    targets = _largest_remainder(len(samples), ratios)
    parts = [[], [], []]
    for name in names:
        # next module goes to the split furthest below its target
        k = min(range(3), key=lambda j: (len(parts[j]) - targets[j]) / max(targets[j], 1))
        parts[k].extend(modules[name])
    return [sorted(p, key=lambda s: s.image_path) for p in parts]


# -- batch stream ---------------------------------------------------------------

# the 8 symmetries of the square: (number of 90 degree rotations, horizontal flip)
DIHEDRAL = tuple((r, f) for f in (False, True) for r in range(4))


def apply_symmetry(pixels: np.ndarray, transform: int) -> np.ndarray:
    rot, flip = DIHEDRAL[transform]
    out = np.rot90(pixels, rot)
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


@dataclass
class TrainingStream:
    """Seeded, optionally class-balanced and augmented mini-batch stream.

    ``epoch(e)`` yields ``(images [B, 3, S, S], labels [B])`` batches; the
    order depends only on ``seed`` and ``e``.  Iterating the object walks
    consecutive epochs starting at 0.
    """

    samples: list[ImageSample]
    batch_size: int
    balance: bool = True
    augment: bool = False
    seed: int = 0
    _epoch: int = field(default=0, init=False, repr=False)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.samples:
            raise ValueError("training split is empty")

    def epoch_plan(self, epoch: int) -> list[tuple[int, int]]:
        """``(sample index, symmetry index)`` pairs for one epoch, in delivery order."""
        rng = np.random.default_rng([self.seed, epoch])
        labels = np.array([s.label_index for s in self.samples])
        idx = np.arange(len(self.samples))
        if self.balance:
            by_class = [idx[labels == c] for c in (CRACK, NON_CRACK)]
            by_class = [c for c in by_class if len(c)]
            if len(by_class) == 2:
                major = max(len(c) for c in by_class)
                parts = []
                for members in by_class:
                    reps, extra = divmod(major, len(members))
                    parts.append(np.tile(members, reps))
                    if extra:
                        parts.append(rng.choice(members, size=extra, replace=False))
                idx = np.concatenate(parts)
        order = idx[rng.permutation(len(idx))]
        if self.augment:
            sym = rng.integers(0, len(DIHEDRAL), size=len(order))
        else:
            sym = np.zeros(len(order), dtype=int)
        return list(zip(order.tolist(), sym.tolist()))

    def epoch(self, epoch: int):
        plan = self.epoch_plan(epoch)
        for start in range(0, len(plan), self.batch_size):
            chunk = plan[start : start + self.batch_size]
            images = torch.stack([normalize(apply_symmetry(self.samples[i].pixels, t)) for i, t in chunk])
            labels = torch.tensor([self.samples[i].label_index for i, _ in chunk])
            yield images, labels

    def __iter__(self):
        while True:
            yield from self.epoch(self._epoch)
            self._epoch += 1


def make_training_stream(split, batch_size: int, balance: bool = True, augment: bool = False, seed: int = 0):
    samples = split.train if isinstance(split, DatasetSplit) else list(split)
    return TrainingStream(samples, batch_size, balance=balance, augment=augment, seed=seed)


def batches(samples, batch_size: int):
    """Fixed-order evaluation batches ``(images, labels)``."""
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        yield torch.stack([normalize(s.pixels) for s in chunk]), torch.tensor([s.label_index for s in chunk])


# -- synthetic line-vs-noise data -------------------------------------------------


def _draw_line(size: int, rng, thickness: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    margin = size // 8
    length = rng.integers(size // 2, size - 2 * margin)
    r0 = rng.integers(margin, size - margin - length + 1)
    c0 = rng.integers(margin, size - margin - length + 1)
    anti = rng.random() < 0.5
    t = np.arange(length)
    rows = r0 + t
    cols = (c0 + length - 1 - t) if anti else (c0 + t)
    for d in range(thickness):
        mask[rows, np.clip(cols + d, 0, size - 1)] = True
    return mask


def synthetic_dataset(n: int = 40, size: int = 64, seed: int = 0, crack_fraction: float = 0.5, prefix: str = "syn"):
    """Noise images, half of them with a bright diagonal line ('crack').

    Returns ``(samples, line_masks)`` where ``line_masks`` maps image path to
    the boolean mask of drawn line pixels (crack images only).
    """
    rng = np.random.default_rng(seed)
    n_crack = int(round(n * crack_fraction))
    samples, masks = [], {}
    thickness = max(2, size // 32)
    for i in range(n):
        img = rng.normal(110, 18, size=(size, size))
        is_crack = i < n_crack
        path = f"images/{prefix}{i:04d}.png"
        if is_crack:
            line = _draw_line(size, rng, thickness)
            img[line] = rng.normal(235, 8, size=int(line.sum()))
            masks[path] = line
        pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        samples.append(
            ImageSample(
                image_path=path,
                pixels=pixels,
                cell_type=CELL_TYPES[i % 2],
                defect_probability=1.0 if is_crack else 0.0,
                crack_label=CLASSES[CRACK] if is_crack else CLASSES[NON_CRACK],
                module_id=f"m{i % 5}",
            )
        )
    return samples, masks


def write_dataset(samples, root: str | Path, masks: dict | None = None) -> tuple[Path, Path]:
    """Write images plus index (``labels.csv``) and crack-label file (``crack_labels.csv``)."""
    root = Path(root)
    index_path = root / "labels.csv"
    labels_path = root / "crack_labels.csv"
    lines = []
    for s in samples:
        dest = root / s.image_path
        dest.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(s.pixels, mode="L").save(dest)
        lines.append(f"{s.image_path} {s.defect_probability:.16g} {s.cell_type}\n")
    index_path.write_text("".join(lines), encoding="utf-8")
    with open(labels_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "crack_label", "module"])
        for s in samples:
            w.writerow([s.image_path, s.crack_label, s.module_id or ""])
    for path, mask in (masks or {}).items():
        dest = root / "masks" / Path(path).name
        dest.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(dest)
    return index_path, labels_path
