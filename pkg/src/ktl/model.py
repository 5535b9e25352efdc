"""Desk-scale detector/descriptor network, its losses and helpers.

The network has a shared convolutional backbone (one stride-2 layer, so the
output grid is half the raster size) and three heads: a single-channel
detector map, an L2-normalized dense descriptor map and, for the second
stage, a K-channel landmark heatmap head.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

__all__ = [
    "ModelDims",
    "LandmarkNet",
    "PairBatch",
    "RMSprop",
    "EmptyDetectedSet",
    "forward",
    "render_target",
    "render_targets",
    "detector_loss",
    "contrastive_loss",
    "stage2_loss",
    "gradient",
    "optimizer_step",
    "extract_keypoints",
    "sample_descriptor",
    "sample_descriptors_torch",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


class EmptyDetectedSet(ValueError):
    """Raised when no image in a Stage-2 batch has a detected landmark."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    in_h: int = 64
    in_w: int = 64
    out_h: int = 32
    out_w: int = 32
    desc_dim: int = 32
    n_landmarks: int = 30
    hidden: int = 32

    def __post_init__(self):
        if self.out_h * 2 != self.in_h or self.out_w * 2 != self.in_w:
            raise ValueError("output grid must be half the input raster size")


def _conv(cin, cout, k, stride=1, dilation=1):
    pad = dilation * (k // 2)
    return nn.Conv2d(cin, cout, k, stride=stride, padding=pad, dilation=dilation)


class LandmarkNet(nn.Module):
    def __init__(self, dims: ModelDims = ModelDims(), seed: int = 0, stage2: bool = False):
        super().__init__()
        self.dims = dims
        h = dims.hidden
        self.backbone = nn.ModuleList([
            _conv(1, h, 3), _conv(h, h, 3, stride=2), _conv(h, h, 3), _conv(h, h, 3, dilation=2),
        ])
        self.detector_head = _conv(h, 1, 3)
        self.descriptor_head = _conv(h, dims.desc_dim, 1)
        self.stage2_head = _conv(h, dims.n_landmarks, 3) if stage2 else None
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int, modules=None):
        """Seeded uniform fan-in init (numpy RNG so it is platform independent)."""
        rng = np.random.default_rng(seed)
        mods = modules if modules is not None else [*self.backbone, self.detector_head,
                                                     self.descriptor_head, self.stage2_head]
        with torch.no_grad():
            for m in mods:
                if m is None:
                    continue
                fan_in = m.weight[0].numel()
                bound = math.sqrt(3.0 / fan_in) * 1.4
                m.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, m.weight.shape)))
                m.bias.zero_()

    def add_stage2_head(self, seed: int):
        self.stage2_head = _conv(self.dims.hidden, self.dims.n_landmarks, 3).to(
            next(self.parameters()).dtype)
        self.reset_parameters(seed, [self.stage2_head])

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x[:, None]
        if tuple(x.shape[-2:]) != (self.dims.in_h, self.dims.in_w):
            raise ValueError(f"raster {tuple(x.shape[-2:])} does not match model input "
                             f"{(self.dims.in_h, self.dims.in_w)}")
        x = x * 2.0 - 1.0
        for conv in self.backbone:
            x = F.silu(conv(x))
        return x

    def forward(self, x: torch.Tensor):
        f = self.features(x)
        return self.detector_head(f)[:, 0], F.normalize(self.descriptor_head(f), dim=1, eps=1e-12)

    def stage2(self, x: torch.Tensor) -> torch.Tensor:
        if self.stage2_head is None:
            raise RuntimeError("model has no stage-2 head")
        return self.stage2_head(self.features(x))

    def param_groups(self) -> dict[str, list[str]]:
        names = [n for n, _ in self.named_parameters()]
        return {
            "backbone": [n for n in names if n.startswith("backbone.")],
            "detector": [n for n in names if n.startswith("detector_head.")],
            "descriptor": [n for n in names if n.startswith("descriptor_head.")],
            "stage2": [n for n in names if n.startswith("stage2_head.")],
        }


def _as_batch(raster, dtype) -> torch.Tensor:
    arr = torch.as_tensor(np.asarray(raster), dtype=dtype)
    return arr[None] if arr.dim() == 2 else arr


def forward(net: LandmarkNet, raster) -> tuple[np.ndarray, np.ndarray]:
    """Numpy convenience wrapper: ``(detector_map (Ho, Wo), features (Ho, Wo, d))``.

    Accepts a single raster or a stack; outputs follow the input's batching.
    """
    dtype = next(net.parameters()).dtype
    single = np.ndim(raster) == 2
    with torch.no_grad():
        det, feat = net(_as_batch(raster, dtype))
    det, feat = det.numpy(), feat.permute(0, 2, 3, 1).numpy()
    return (det[0], feat[0]) if single else (det, feat)


# ------------------------------------------------------------------ targets

def render_target(points, sigma: float = 1.0, grid: tuple[int, int] = (32, 32)) -> np.ndarray:
    """Max-combined isotropic Gaussians on a grid (cell centres at integers)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = grid
    out = np.zeros((h, w))
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return out
    ys, xs = np.arange(h, dtype=float), np.arange(w, dtype=float)
    for x, y in pts:
        gx = np.exp(-((xs - x) ** 2) / (2 * sigma**2))
        gy = np.exp(-((ys - y) ** 2) / (2 * sigma**2))
        np.maximum(out, gy[:, None] * gx[None, :], out=out)
    return out


def render_targets(points_per_channel, sigma: float, grid: tuple[int, int]) -> np.ndarray:
    """K-channel target; channel ``k`` renders ``points_per_channel[k]``."""
    return np.stack([render_target(p, sigma, grid) for p in points_per_channel])


# ------------------------------------------------------------------- losses

def detector_loss(predicted, target):
    """Mean squared error over all cells."""
    if tuple(predicted.shape) != tuple(target.shape):
        raise ValueError(f"shape mismatch {tuple(predicted.shape)} vs {tuple(target.shape)}")
    return ((predicted - target) ** 2).mean()


@dataclass
class PairBatch:
    """Descriptor pairs as ``(image index, x, y)`` rows on the output grid."""

    pos_a: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    pos_b: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    neg_a: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    neg_b: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    neg_same_image: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    # image ids (corpus sample ids) of each batch slot, for auditing
    slot_ids: tuple = ()

    @property
    def n_pos(self) -> int:
        return len(self.pos_a)

    @property
    def n_neg(self) -> int:
        return len(self.neg_a)


def sample_descriptors_torch(feature_maps: torch.Tensor, refs) -> torch.Tensor:
    """Bilinear samples of ``(B, d, H, W)`` maps at ``(img, x, y)`` refs, renormalized."""
    refs = np.asarray(refs, dtype=float).reshape(-1, 3)
    _, _, h, w = feature_maps.shape
    img = torch.as_tensor(refs[:, 0].astype(np.int64))
    x = np.clip(refs[:, 1], 0, w - 1)
    y = np.clip(refs[:, 2], 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2)
    dtype = feature_maps.dtype
    ax = torch.as_tensor(x - x0, dtype=dtype)[:, None]
    ay = torch.as_tensor(y - y0, dtype=dtype)[:, None]
    x0t, y0t = torch.as_tensor(x0), torch.as_tensor(y0)
    fm = feature_maps.permute(0, 2, 3, 1)
    v = ((1 - ax) * (1 - ay) * fm[img, y0t, x0t] + ax * (1 - ay) * fm[img, y0t, x0t + 1]
         + (1 - ax) * ay * fm[img, y0t + 1, x0t] + ax * ay * fm[img, y0t + 1, x0t + 1])
    return F.normalize(v, dim=1, eps=1e-12)


def contrastive_loss(batch: PairBatch, feature_maps: torch.Tensor, margin: float = 0.8):
    """Pull positives together, push same-image negatives past ``margin``.

    Distances are squared Euclidean between unit descriptors; the sum over
    all pairs is divided by the number of pairs.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    n = batch.n_pos + batch.n_neg
    if n == 0:
        raise ValueError("contrastive loss of an empty pair batch is undefined")
    total = feature_maps.new_zeros(())
    if batch.n_pos:
        a = sample_descriptors_torch(feature_maps, batch.pos_a)
        b = sample_descriptors_torch(feature_maps, batch.pos_b)
        total = total + ((a - b) ** 2).sum(dim=1).sum()
    if batch.n_neg:
        a = sample_descriptors_torch(feature_maps, batch.neg_a)
        b = sample_descriptors_torch(feature_maps, batch.neg_b)
        total = total + torch.clamp(margin - ((a - b) ** 2).sum(dim=1), min=0).sum()
    return total / n


def stage2_loss(predicted: torch.Tensor, targets: torch.Tensor, detected: torch.Tensor):
    """Mean over images of the mean per-channel MSE restricted to detected channels.

    ``predicted``/``targets`` are ``(B, K, H, W)`` (or ``(K, H, W)``) and
    ``detected`` a boolean ``(B, K)`` mask.  Images with no detected channel
    are skipped; if none remain :class:`EmptyDetectedSet` is raised.
    """
    if predicted.dim() == 3:
        predicted, targets = predicted[None], targets[None]
        detected = torch.as_tensor(detected)[None]
    if tuple(predicted.shape) != tuple(targets.shape):
        raise ValueError("prediction/target shape mismatch")
    mask = torch.as_tensor(detected, dtype=torch.bool)
    counts = mask.sum(dim=1)
    valid = counts > 0
    if not bool(valid.any()):
        raise EmptyDetectedSet("no detected landmarks in batch")
    per_channel = ((predicted - targets) ** 2).mean(dim=(2, 3))
    # where() rather than multiply so masked channels get exactly zero gradient
    masked = torch.where(mask, per_channel, torch.zeros_like(per_channel))
    per_image = masked.sum(dim=1)[valid] / counts[valid].to(predicted.dtype)
    return per_image.mean()


# ---------------------------------------------------------- grads / optimiser

def gradient(net: nn.Module, loss_fn, names=None) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss_fn(net)`` for the named parameters."""
    params = dict(net.named_parameters())
    names = list(params) if names is None else list(names)
    loss = loss_fn(net)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {float(loss)}")
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return {n: (torch.zeros_like(params[n]) if g is None else g) for n, g in zip(names, grads)}


class RMSprop:
    """RMSprop with decoupled weight decay; state is one running square average per tensor."""

    def __init__(self, lr=2e-4, alpha=0.99, eps=1e-8, weight_decay=1e-5):
        self.lr, self.alpha, self.eps, self.weight_decay = lr, alpha, eps, weight_decay
        self.state: dict[str, torch.Tensor] = {}

    def step(self, net: nn.Module, grads: dict[str, torch.Tensor]):
        params = dict(net.named_parameters())
        with torch.no_grad():
            sub = {n: params[n] for n in grads}
            optimizer_step(sub, grads, self.state, self.lr, self.alpha, self.eps, self.weight_decay)


def optimizer_step(params: dict, grads: dict, state: dict, lr: float, alpha: float = 0.99,
                   eps: float = 1e-8, weight_decay: float = 1e-5) -> None:
    """In-place RMSprop update of ``params`` (tensors or arrays) and ``state``.

    ``v <- alpha v + (1 - alpha) g^2``;
    ``p <- p (1 - lr wd) - lr g / (sqrt(v) + eps)``.
    """
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"{name}: gradient shape {tuple(g.shape)} != {tuple(p.shape)}")
        finite = torch.isfinite(g).all() if isinstance(g, torch.Tensor) else np.isfinite(g).all()
        if not finite:
            raise FloatingPointError(f"non-finite gradient for {name}")
    for name, g in grads.items():
        p = params[name]
        if name not in state:
            state[name] = g * 0
        v = state[name]
        v *= alpha
        v += (1 - alpha) * g * g
        p *= 1 - lr * weight_decay
        p -= lr * g / (v**0.5 + eps)


# -------------------------------------------------------------- keypoints

def extract_keypoints(detector_map: np.ndarray, threshold: float = 0.25, window: int = 2,
                      max_points: int | None = None) -> np.ndarray:
    """Strict local maxima of a heatmap.

    Returns an ``(n, 3)`` array of ``(x, y, confidence)`` rows, strongest
    first (ties by ``(y, x)``), truncated to ``max_points``.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    hm = np.asarray(detector_map, dtype=float)
    size = 2 * window + 1
    footprint = np.ones((size, size), dtype=bool)
    footprint[window, window] = False
    neigh = ndimage.maximum_filter(hm, footprint=footprint, mode="constant", cval=-np.inf)
    ys, xs = np.nonzero((hm > neigh) & (hm >= threshold))
    conf = hm[ys, xs]
    order = np.lexsort((xs, ys, -conf))
    if max_points is not None:
        order = order[:max_points]
    return np.stack([xs[order], ys[order], conf[order]], axis=1).astype(float).reshape(-1, 3)


def sample_descriptor(feature_map: np.ndarray, position) -> np.ndarray:
    """Bilinear interpolation of an ``(H, W, d)`` map at ``(x, y)``, renormalized."""
    h, w, _ = feature_map.shape
    x, y = float(position[0]), float(position[1])
    if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
        raise ValueError(f"position ({x}, {y}) outside the {h}x{w} feature map")
    x0, y0 = min(int(np.floor(x)), w - 2), min(int(np.floor(y)), h - 2)
    ax, ay = x - x0, y - y0
    fm = np.asarray(feature_map, dtype=float)
    v = ((1 - ax) * (1 - ay) * fm[y0, x0] + ax * (1 - ay) * fm[y0, x0 + 1]
         + (1 - ax) * ay * fm[y0 + 1, x0] + ax * ay * fm[y0 + 1, x0 + 1])
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


# -------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"KTL1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, net: LandmarkNet, optimizer: RMSprop | None = None, round_t: int = 0,
                    extra: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON header, then little-endian f32 tensors
    (parameters in declaration order, then optimizer state in the same order)."""
    params = list(net.named_parameters())
    opt_state = optimizer.state if optimizer is not None else {}
    header = {
        "dims": asdict(net.dims),
        "round": int(round_t),
        "stage2": net.stage2_head is not None,
        "params": [[n, list(p.shape)] for n, p in params],
        "optimizer": None if optimizer is None else {
            "lr": optimizer.lr, "alpha": optimizer.alpha, "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay,
            "state": [n for n, _ in params if n in opt_state],
        },
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    for _, p in params:
        chunks.append(p.detach().numpy().astype("<f4").tobytes())
    for n, _ in params:
        if n in opt_state:
            chunks.append(opt_state[n].detach().numpy().astype("<f4").tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[LandmarkNet, RMSprop | None, int, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen])
    net = LandmarkNet(ModelDims(**header["dims"]), stage2=header["stage2"]).float()
    offset = 12 + hlen
    params = dict(net.named_parameters())

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) if shape else 1
        end = offset + 4 * n
        if end > len(data):
            raise CheckpointError(f"{path}: truncated (round {header.get('round')})")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset = end
        return torch.from_numpy(arr.astype(np.float32))

    with torch.no_grad():
        for name, shape in header["params"]:
            params[name].copy_(take(shape))
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = RMSprop(o["lr"], o["alpha"], o["eps"], o["weight_decay"])
        for name in o["state"]:
            opt.state[name] = take(list(params[name].shape))
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes (round {header.get('round')})")
    return net, opt, header["round"], header["extra"]
