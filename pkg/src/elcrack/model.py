"""Modified ResNet-50 with a 1x1 class head and normalized L_p pooling.

Layout (torchvision layer names):

* ``conv1``/``bn1``/``relu``/``maxpool`` -- stem, total stride 4
* ``layer1``                              -- stride 1
* ``layer2``                              -- stride 2 (output stride 8)
* ``layer3``                              -- stride 1, dilation 2
* ``layer4``                              -- stride 1, first block dilation 2,
                                             third block removed
* ``head``                                -- 1x1 conv, 2048 -> 2 maps
* ``pool``                                -- :class:`~elcrack.pooling.LpPool`

A 300x300 input yields 38x38 maps.  Channel 0 is 'crack', channel 1 is
'non-crack'.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torchvision.models import resnet50

from elcrack.pooling import LpPool, PoolingSpec, format_p, parse_p

log = logging.getLogger(__name__)

CLASSES = ("crack", "non-crack")
CRACK, NON_CRACK = 0, 1
OUTPUT_STRIDE = 8
CHECKPOINT_FORMAT = "elcrack-checkpoint/1"


@dataclass
class ModelConfig:
    num_classes: int = 2
    input_size: int = 300
    output_stride: int = OUTPUT_STRIDE
    pooling: PoolingSpec = field(default_factory=PoolingSpec)
    pretrained_weights_path: str | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.pooling, dict):
            self.pooling = PoolingSpec(**self.pooling)
        elif not isinstance(self.pooling, PoolingSpec):
            self.pooling = PoolingSpec(p=self.pooling)
        if self.num_classes != 2:
            raise ValueError(f"num_classes must be 2 (crack, non-crack), got {self.num_classes}")
        if self.output_stride != OUTPUT_STRIDE:
            raise ValueError(f"output_stride is fixed at {OUTPUT_STRIDE}, got {self.output_stride}")
        if self.input_size < OUTPUT_STRIDE:
            raise ValueError(f"input_size must be >= {OUTPUT_STRIDE}, got {self.input_size}")

    @property
    def map_size(self) -> int:
        # conv1 (k7 s2 p3), maxpool (k3 s2 p1), layer2 (k3 s2 p1) each map n -> ceil(n / 2)
        n = self.input_size
        for _ in range(3):
            n = math.ceil(n / 2)
        return n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pooling"] = {"p": format_p(self.pooling.p), "epsilon": self.pooling.epsilon}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        pooling = dict(d.pop("pooling", {}))
        if "p" in pooling:
            pooling["p"] = parse_p(pooling["p"])
        return cls(pooling=PoolingSpec(**pooling), **d)


class CrackNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        base = resnet50(weights=None, replace_stride_with_dilation=[False, True, True])
        del base.layer4[2]
        self.conv1 = base.conv1
        self.bn1 = base.bn1
        self.relu = base.relu
        self.maxpool = base.maxpool
        self.layer1 = base.layer1
        self.layer2 = base.layer2
        self.layer3 = base.layer3
        self.layer4 = base.layer4
        self.head = nn.Conv2d(2048, config.num_classes, kernel_size=1)
        self.pool = LpPool(config.pooling)

    def activation_maps(self, x: torch.Tensor) -> torch.Tensor:
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return self.head(x)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        maps = self.activation_maps(x)
        return maps, self.pool(maps)

    def backbone_state(self) -> dict:
        return {k: v for k, v in self.state_dict().items() if not k.startswith(("head.", "pool."))}


def init_head(model: CrackNet, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        # backbone features are post-ReLU (>= 0); non-negative weights make both maps
        # start positive so the sign ignored by |y| in the pooling is pinned
        model.head.weight.copy_(torch.randn(model.head.weight.shape, generator=gen).abs() * 0.01)
        model.head.bias.zero_()


def load_pretrained(model: CrackNet, path: str | Path) -> list[str]:
    """Copy ImageNet ResNet-50 weights into every surviving backbone layer.

    ``path`` is a torchvision-style state dict (optionally wrapped under a
    ``"state_dict"`` key).  Keys of the removed layers (``fc``,
    ``layer4.2``) are ignored.  Returns the loaded key names.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"pretrained weights file not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    state = {k.removeprefix("module."): v for k, v in state.items()}
    target = model.backbone_state()
    for name, tensor in target.items():
        if name not in state:
            raise ValueError(f"pretrained weights lack layer {name!r} (file {path})")
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise ValueError(
                f"shape mismatch at layer {name!r}: expected {tuple(tensor.shape)}, "
                f"file has {tuple(state[name].shape)}"
            )
    model.load_state_dict({k: state[k] for k in target}, strict=False)
    return list(target)


def build_model(config: ModelConfig) -> CrackNet:
    """Build the network; the 1x1 head is always freshly initialized from ``config.seed``."""
    torch.manual_seed(config.seed)
    model = CrackNet(config)
    if config.pretrained_weights_path:
        load_pretrained(model, config.pretrained_weights_path)
    else:
        log.warning("no pretrained weights given; backbone is randomly initialized")
    init_head(model, config.seed)
    return model


def forward(model: CrackNet, batch: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Run the network on a preprocessed ``[B, 3, S, S]`` batch.

    Returns ``(maps [B, 2, S', S'], scores [B, 2])``.
    """
    size = model.config.input_size
    if batch.dim() == 3:
        batch = batch.unsqueeze(0)
    if batch.dim() != 4 or batch.shape[1] != 3 or tuple(batch.shape[2:]) != (size, size):
        raise ValueError(f"expected input [B, 3, {size}, {size}], got {list(batch.shape)}")
    return model(batch)


def classify(scores) -> tuple[str, np.ndarray]:
    """Softmax over the two scores; ties go to 'non-crack'."""
    s = np.asarray(scores.detach().cpu() if torch.is_tensor(scores) else scores, dtype=np.float64)
    if s.shape != (2,) or not np.all(np.isfinite(s)):
        raise ValueError(f"expected two finite scores, got {s!r}")
    e = np.exp(s - s.max())
    probs = e / e.sum()
    label = CLASSES[CRACK] if s[CRACK] > s[NON_CRACK] else CLASSES[NON_CRACK]
    return label, probs


def predict_labels(scores: torch.Tensor) -> torch.Tensor:
    """Batched :func:`classify` label indices (0 = crack) with the same tie rule."""
    return torch.where(scores[:, CRACK] > scores[:, NON_CRACK], CRACK, NON_CRACK)


def state_checksum(state: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: CrackNet, path: str | Path, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config": model.config.to_dict(),
            "state_dict": model.state_dict(),
            "metadata": metadata or {},
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> CrackNet:
    """Rebuild a model from a checkpoint written by :func:`save_checkpoint`.

    Raises ``ValueError`` if ``expected`` is given and differs from the
    stored config in anything but the weights path and seed.
    """
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an elcrack checkpoint")
    config = ModelConfig.from_dict(blob["config"])
    if expected is not None:
        a, b = config.to_dict(), expected.to_dict()
        for key in ("pretrained_weights_path", "seed"):
            a.pop(key)
            b.pop(key)
        if a != b:
            diff = {k: (a[k], b.get(k)) for k in a if a[k] != b.get(k)}
            raise ValueError(f"checkpoint config mismatch (stored, expected): {diff}")
    model = CrackNet(config)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    model.checkpoint_metadata = blob.get("metadata", {})
    return model
