"""Multi-head density regressor and its matched-loss training loop.

A small strided conv backbone produces a k-channel feature grid at 1/8 of
the input resolution. Each of the ``n_heads`` heads is three
Conv-ReLU-Upsample(x2) blocks ending in a single-channel density map at full
resolution. Heads are stored as grouped convolutions: group ``i`` of every
head layer belongs to head ``i`` only, so heads share the input features but
nothing else.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage
from torch import nn
from torch.nn import functional as F

from .assignment import Assignment
from .matching import PredictionSet, head_utilization, match

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BCKP"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    n_heads: int = 5
    image_size: int = 64
    backbone_channels: tuple[int, int] = (16, 32)
    k: int = 64
    head_channels: int = 32
    # outputs are divided by this so per-pixel densities (~1e-2) sit at O(1) activations
    density_scale: float = 100.0

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if "backbone_channels" in data:
            data["backbone_channels"] = tuple(data["backbone_channels"])
        return cls(**data)


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 3e-4  # retuned for the small backbone; the ViT recipe used 3e-5
    halve_every: int = 35
    batch_size: int = 2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    freeze_backbone: bool = False
    augment: bool = True
    # Targets are blurred by a Gaussian of this width (px), shrinking linearly
    # to zero over ``warmup_epochs``. Without it the all-zero map is an L1
    # attractor before the features can localise objects.
    warmup_blur: float = 5.0
    warmup_epochs: int = 20
    model: ModelConfig = field(default_factory=ModelConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        model = ModelConfig.from_dict(data.pop("model", {}))
        data = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if "betas" in data:
            data["betas"] = tuple(data["betas"])
        return cls(model=model, **data)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.halve_every < 1:
            raise ValueError("epochs, batch_size and halve_every must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.model.n_heads < 1:
            raise ValueError("need at least one head")
        if self.warmup_blur < 0 or self.warmup_epochs < 0:
            raise ValueError("warmup settings must be nonnegative")

    def blur_at(self, epoch: int) -> float:
        """Target blur width for 1-based ``epoch``."""
        if self.warmup_epochs == 0:
            return 0.0
        return self.warmup_blur * max(0.0, 1.0 - (epoch - 1) / self.warmup_epochs)


class CountingNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        c1, c2 = cfg.backbone_channels
        self.backbone = nn.Sequential(
            nn.Conv2d(3, c1, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c2, cfg.k, 3, stride=2, padding=1), nn.ReLU(),
        )
        n, hc = cfg.n_heads, cfg.head_channels
        self.head1 = nn.Conv2d(cfg.k, n * hc, 3, padding=1)
        self.head2 = nn.Conv2d(n * hc, n * hc, 3, padding=1, groups=n)
        self.head3 = nn.Conv2d(n * hc, n, 3, padding=1, groups=n)
        with torch.no_grad():
            # keep the final ReLU alive at initialisation
            self.head3.bias.fill_(0.1)

    @property
    def n_heads(self) -> int:
        return self.config.n_heads

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def heads(self, feats: torch.Tensor) -> torch.Tensor:
        up = dict(scale_factor=2, mode="bilinear", align_corners=False)
        h = F.interpolate(F.relu(self.head1(feats)), **up)
        h = F.interpolate(F.relu(self.head2(h)), **up)
        h = F.interpolate(F.relu(self.head3(h)), **up)
        return h / self.config.density_scale

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) images -> (B, n_heads, H, W) nonnegative densities."""
        return self.heads(self.features(x))

    def head_parameters(self, head: int) -> dict[str, tuple[torch.Tensor, slice]]:
        """Head-specific slices of the grouped head weights, keyed by parameter name."""
        hc = self.config.head_channels
        block = slice(head * hc, (head + 1) * hc)
        one = slice(head, head + 1)
        return {
            "head1.weight": (self.head1.weight, block),
            "head1.bias": (self.head1.bias, block),
            "head2.weight": (self.head2.weight, block),
            "head2.bias": (self.head2.bias, block),
            "head3.weight": (self.head3.weight, one),
            "head3.bias": (self.head3.bias, one),
        }

    def permute_heads(self, order: Sequence[int]) -> None:
        """Reorder heads in place so new head ``i`` is old head ``order[i]``."""
        hc = self.config.head_channels
        idx = torch.tensor([o * hc + c for o in order for c in range(hc)])
        with torch.no_grad():
            for conv in (self.head1, self.head2):
                conv.weight.copy_(conv.weight[idx])
                conv.bias.copy_(conv.bias[idx])
            self.head3.weight.copy_(self.head3.weight[list(order)])
            self.head3.bias.copy_(self.head3.bias[list(order)])


def image_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """uint8 (H, W, 3) or float (H, W, 3) in [0, 1] -> (1, 3, H, W) centred tensor."""
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {arr.shape}")
    return torch.as_tensor(arr - 0.5, dtype=dtype).permute(2, 0, 1).unsqueeze(0).contiguous()


def _check_size(model: CountingNet, image) -> None:
    size = model.config.image_size
    if np.asarray(image).shape[:2] != (size, size):
        raise ValueError(f"image must be {size}x{size}, got {np.asarray(image).shape[:2]}")


def predict(model: CountingNet, image: np.ndarray) -> PredictionSet:
    _check_size(model, image)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(image_tensor(image, dtype))[0]
    return PredictionSet([m.double().numpy() for m in out])


def extract_features(model: CountingNet, image: np.ndarray) -> np.ndarray:
    """Backbone feature grid, shape (k, H/8, W/8)."""
    _check_size(model, image)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        return model.features(image_tensor(image, dtype))[0].double().numpy()


def matched_l1(pred: torch.Tensor, gts: Sequence[np.ndarray],
               assignment: Assignment | None = None) -> tuple[torch.Tensor, Assignment]:
    """Matched L1 loss for one image; ``pred`` is (n_heads, H, W).

    The assignment is computed on detached maps (or taken as given) and held
    constant, so gradients reach only the matched heads.
    """
    if assignment is None:
        assignment = match(gts, PredictionSet([p.detach().double().numpy() for p in pred]))
    loss = pred.new_zeros(())
    for i, j in assignment.pairs:
        gt = torch.as_tensor(gts[j], dtype=pred.dtype)
        loss = loss + (pred[i] - gt).abs().sum()
    return loss, assignment


def backward(model: CountingNet, image: np.ndarray, gts: Sequence[np.ndarray],
             assignment: Assignment | None = None):
    """Gradient of the matched loss w.r.t. every parameter.

    Returns ``(grads, loss, assignment)`` with ``grads`` mapping parameter
    names to numpy arrays.
    """
    dtype = next(model.parameters()).dtype
    model.zero_grad(set_to_none=False)
    pred = model(image_tensor(image, dtype))[0]
    loss, assignment = matched_l1(pred, gts, assignment)
    loss.backward()
    grads = {name: (p.grad.detach().numpy().copy() if p.grad is not None
                    else np.zeros(tuple(p.shape)))
             for name, p in model.named_parameters()}
    return grads, float(loss.detach()), assignment


def loss_value(model: CountingNet, image: np.ndarray, gts: Sequence[np.ndarray],
               assignment: Assignment | None = None) -> float:
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        pred = model(image_tensor(image, dtype))[0]
        loss, _ = matched_l1(pred, gts, assignment)
    return float(loss)


@dataclass
class TrainResult:
    model: CountingNet
    log: list[dict]
    match_log: list[Assignment]


def blur_targets(gts: Sequence[np.ndarray], width: float) -> list[np.ndarray]:
    """Gaussian-blur each map, rescaled to keep its integral."""
    if width <= 0:
        return list(gts)
    out = []
    for g in gts:
        b = ndimage.gaussian_filter(g, width, mode="constant")
        total = b.sum()
        out.append(b * (g.sum() / total) if total > 0 else b)
    return out


def _augment(rng: np.random.Generator, image: np.ndarray, gts: list[np.ndarray]):
    if rng.random() < 0.5:
        image = image[:, ::-1]
        gts = [g[:, ::-1] for g in gts]
    if rng.random() < 0.5:
        image = image[::-1]
        gts = [g[::-1] for g in gts]
    return np.ascontiguousarray(image), [np.ascontiguousarray(g) for g in gts]


def train(samples: Sequence, config: TrainConfig | None = None,
          log_path=None, model: CountingNet | None = None) -> TrainResult:
    """Train on ``samples`` (objects with ``.image`` and ``.densities``).

    Adam with a step schedule halving the learning rate every
    ``halve_every`` epochs. Samples with more labels than heads are skipped.
    """
    cfg = config or TrainConfig()
    cfg.validate()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = model or CountingNet(cfg.model)
    n_heads = model.n_heads

    usable = [s for s in samples if 1 <= len(s.densities) <= n_heads]
    if len(usable) < len(samples):
        log.warning("skipping %d samples with more labels than %d heads",
                    len(samples) - len(usable), n_heads)
    if not usable:
        raise ValueError("no trainable samples")

    if cfg.freeze_backbone:
        for p in model.backbone.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.halve_every, gamma=0.5)

    history: list[dict] = []
    match_log: list[Assignment] = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            blur = cfg.blur_at(epoch)
            targets_for = ({id(s): blur_targets(s.densities, blur) for s in usable}
                           if blur > 0 else None)
            order = rng.permutation(len(usable))
            total, n_seen = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                batch = [usable[int(k)] for k in order[start:start + cfg.batch_size]]
                images, targets = [], []
                for s in batch:
                    img = s.image
                    gts = targets_for[id(s)] if targets_for else list(s.densities)
                    if cfg.augment:
                        img, gts = _augment(rng, img, gts)
                    images.append(image_tensor(img))
                    targets.append(gts)
                preds = model(torch.cat(images))
                loss = preds.new_zeros(())
                for pred, gts in zip(preds, targets):
                    l, a = matched_l1(pred, gts)
                    loss = loss + l
                    match_log.append(a)
                loss = loss / len(batch)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {start}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(batch)
                n_seen += len(batch)
            record = {
                "epoch": epoch,
                "loss": total / n_seen,
                "lr": opt.param_groups[0]["lr"],
                "target_blur": blur,
                "head_utilization": head_utilization(match_log, n_heads),
            }
            sched.step()
            history.append(record)
            log.info("epoch %d loss %.4f lr %.2e util %.2f", epoch, record["loss"],
                     record["lr"], record["head_utilization"])
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    model.eval()
    return TrainResult(model, history, match_log)


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, model: CountingNet, extra: dict | None = None) -> None:
    """Versioned blob: magic, u32 version, u32 header length, JSON header, raw tensors.

    Tensors are stored little-endian float32 in ``state_dict`` order.
    """
    tensors, offset, blobs = [], 0, []
    for name, t in model.state_dict().items():
        data = t.detach().cpu().numpy().astype("<f4").tobytes()
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"model": asdict(model.config), "tensors": tensors,
                         "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> tuple[CountingNet, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen])
    body = raw[12 + hlen:]
    model = CountingNet(ModelConfig.from_dict(header["model"]))
    state = {}
    for t in header["tensors"]:
        arr = np.frombuffer(body, dtype="<f4", count=math.prod(t["shape"]) if t["shape"] else 1,
                            offset=t["offset"]).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    return model, header.get("extra", {})
