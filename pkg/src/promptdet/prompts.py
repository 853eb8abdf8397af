"""Dataset-attribute prompts at three stages of a voxel detector.

* mean-shifted batch normalization of point features (voxelization stage)
* binary range masks concatenated to BEV features (backbone stage)
* object-conditional residuals on RoI features with a dataset discriminator (head stage)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffnum as dn
from .synthdata import DatasetSpec

_SNAP = 1e-9


# ---------------------------------------------------------------- normalization

@dataclass(eq=False)
class MSBNLayer:
    """Batch norm whose centering blends the batch mean with each frame's own mean."""

    channels: int
    alpha: float = 0.5
    epsilon: float = 1e-5
    momentum: float = 0.1
    gamma: dn.Tensor = None
    beta: dn.Tensor = None
    running_mean: np.ndarray = None
    running_var: np.ndarray = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.gamma is None:
            self.gamma = dn.Tensor(np.ones(self.channels), requires_grad=True)
        if self.beta is None:
            self.beta = dn.Tensor(np.zeros(self.channels), requires_grad=True)
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels)
        if self.running_var is None:
            self.running_var = np.ones(self.channels)


def _update_running(layer, mu, var):
    m = layer.momentum
    layer.running_mean = (1 - m) * layer.running_mean + m * mu.astype(layer.running_mean.dtype)
    layer.running_var = (1 - m) * layer.running_var + m * var.astype(layer.running_var.dtype)


def batch_norm(P: dn.Tensor, layer: MSBNLayer, training: bool) -> dn.Tensor:
    """Conventional channel-wise batch normalization with biased variance."""
    if P.shape[1] != layer.channels:
        raise ValueError(f"batch_norm: {P.shape[1]} channels, layer has {layer.channels}")
    if training:
        mu = dn.mean(P, axis=0)
        centered = dn.sub(P, mu)
        var = dn.mean(dn.mul(centered, centered), axis=0)
        _update_running(layer, mu.value, var.value)
    else:
        centered = dn.sub(P, layer.running_mean.astype(P.dtype))
        var = dn.Tensor(layer.running_var.astype(P.dtype))
    inv = dn.power(dn.add(var, layer.epsilon), -0.5)
    return dn.add(dn.mul(dn.mul(centered, inv), layer.gamma), layer.beta)


def msbn_forward(P: dn.Tensor, frame_of_point, layer: MSBNLayer, training: bool,
                 num_frames: int | None = None) -> dn.Tensor:
    """Normalize point features [sum N_i, C] with a frame-shifted mean and shared variance.

    The centering term is ``alpha * mean_of_frame + (1 - alpha) * batch_mean``.
    At inference the batch mean and variance come from running statistics,
    while the frame mean is still taken from the incoming points.
    With ``num_frames`` given, every frame id in ``range(num_frames)`` must own a point.
    """
    if P.shape[1] != layer.channels:
        raise ValueError(f"msbn: {P.shape[1]} channels, layer has {layer.channels}")
    seg = np.asarray(frame_of_point, dtype=np.int64)
    if len(seg) != P.shape[0]:
        raise ValueError("msbn: one frame index per point row is required")
    if len(seg) == 0:
        raise ValueError("msbn: empty frame group (no points)")
    if num_frames is not None:
        counts = np.bincount(seg, minlength=num_frames)
        if len(counts) > num_frames or (counts[:num_frames] == 0).any():
            raise ValueError(f"msbn: empty frame group among {num_frames} frames: counts {counts.tolist()}")
    _, seg = np.unique(seg, return_inverse=True)
    n_frames = int(seg.max()) + 1 if len(seg) else 0
    a = layer.alpha
    if training:
        mu = dn.mean(P, axis=0)
        dev = dn.sub(P, mu)
        var = dn.mean(dn.mul(dev, dev), axis=0)
        _update_running(layer, mu.value, var.value)
    else:
        mu = dn.Tensor(layer.running_mean.astype(P.dtype))
        var = dn.Tensor(layer.running_var.astype(P.dtype))
    frame_mu = dn.take_rows(dn.segment_mean(P, seg, n_frames), seg)
    shift = dn.add(dn.mul(frame_mu, a), dn.mul(mu, 1.0 - a))
    inv = dn.power(dn.add(var, layer.epsilon), -0.5)
    normed = dn.mul(dn.sub(P, shift), inv)
    return dn.add(dn.mul(normed, layer.gamma), layer.beta)


# ---------------------------------------------------------------- range masks

@dataclass(frozen=True, eq=False)
class RangeMask:
    H: int
    W: int
    bits: np.ndarray
    dataset_id: int
    corners: tuple

    def resampled(self, H: int, W: int) -> "RangeMask":
        """Nearest-neighbour resampling: target cell m reads source row floor(m * H / H')."""
        if (H, W) == (self.H, self.W):
            return self
        rows = (np.arange(H) * self.H) // H
        cols = (np.arange(W) * self.W) // W
        bits = self.bits[np.ix_(rows, cols)]
        on_r = np.flatnonzero(bits.any(axis=1))
        on_c = np.flatnonzero(bits.any(axis=0))
        corners = (int(on_r[0]), int(on_c[0]), int(on_r[-1]), int(on_c[-1])) if len(on_r) else (0, 0, -1, -1)
        return RangeMask(H, W, bits, self.dataset_id, corners)

    def to_pgm(self) -> bytes:
        header = f"P5\n{self.W} {self.H}\n255\n".encode()
        return header + (self.bits.astype(np.uint8) * 255).tobytes()

    def to_dict(self) -> dict:
        return {"H": self.H, "W": self.W, "dataset_id": self.dataset_id,
                "corners": list(self.corners), "rows": ["".join(map(str, r)) for r in self.bits.tolist()]}


def _floor(v):
    r = round(v)
    return int(r) if abs(v - r) < _SNAP else math.floor(v)


def _ceil(v):
    r = round(v)
    return int(r) if abs(v - r) < _SNAP else math.ceil(v)


def map_range_to_bev(xy_range, global_xy, H: int, W: int) -> tuple:
    """Floor/ceil mapping of a metric x-y range onto BEV cell indices, clamped to the grid."""
    x1, y1, x2, y2 = (float(v) for v in global_xy)
    a1, b1, a2, b2 = (float(v) for v in xy_range)
    m1 = _floor((a1 - x1) * H / (x2 - x1))
    n1 = _floor((b1 - y1) * W / (y2 - y1))
    m2 = _ceil((a2 - x1) * H / (x2 - x1))
    n2 = _ceil((b2 - y1) * W / (y2 - y1))
    clamp = lambda v, hi: min(max(v, 0), hi)  # noqa: E731
    return (clamp(m1, H - 1), clamp(n1, W - 1), clamp(m2, H - 1), clamp(n2, W - 1))


def compute_range_mask(spec: DatasetSpec, global_range, H: int, W: int) -> RangeMask:
    """Binary BEV mask set on the inclusive rectangle of the spec's mapped range.

    ``global_range`` is (x1, y1, x2, y2); a 6-tuple is also accepted.
    """
    g = tuple(global_range)
    if len(g) == 6:
        g = (g[0], g[1], g[3], g[4])
    if H <= 0 or W <= 0:
        raise ValueError("mask dimensions must be positive")
    a1, b1, a2, b2 = spec.xy_range
    tol = 1e-9
    if a1 < g[0] - tol or b1 < g[1] - tol or a2 > g[2] + tol or b2 > g[3] + tol:
        raise ValueError(f"{spec.name}: range {spec.xy_range} lies outside the global plane {g}")
    m1, n1, m2, n2 = map_range_to_bev(spec.xy_range, g, H, W)
    bits = np.zeros((H, W), dtype=np.uint8)
    bits[m1:m2 + 1, n1:n2 + 1] = 1
    bits.setflags(write=False)
    return RangeMask(H, W, bits, spec.id, (m1, n1, m2, n2))


def apply_mask_concat(x: dn.Tensor, mask) -> dn.Tensor:
    """Append mask bits as one extra (constant) channel to [N, C, H', W'] features.

    ``mask`` is a single :class:`RangeMask` shared by the batch or one per sample.
    """
    n, _, h, w = x.shape
    masks = [mask] * n if isinstance(mask, RangeMask) else list(mask)
    if len(masks) != n:
        raise ValueError(f"{len(masks)} masks for a batch of {n}")
    chan = np.stack([m.resampled(h, w).bits for m in masks]).astype(x.dtype)[:, None]
    if x.shape[1] == 0:
        return dn.Tensor(chan)
    return dn.concat([x, dn.Tensor(chan)], axis=1)


# ---------------------------------------------------------------- residual head

@dataclass(eq=False)
class OCRLHead:
    """Residual MLP ``f`` (F -> F -> F) and discriminator ``D`` (F -> F/2 -> N)."""

    feature_dim: int
    num_datasets: int
    dis_loss_weight: float = 1.0
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, feature_dim: int, num_datasets: int, rng: np.random.Generator,
             dis_loss_weight: float = 1.0, dtype=np.float64, residual_scale: float = 0.1) -> "OCRLHead":
        F, Hd = feature_dim, max(feature_dim // 2, 1)

        def w(fan_in, fan_out, scale=1.0):
            return dn.Tensor((rng.standard_normal((fan_in, fan_out)) * scale * math.sqrt(2.0 / fan_in)).astype(dtype),
                             requires_grad=True)

        def b(n):
            return dn.Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

        params = {
            "f.w1": w(F, F), "f.b1": b(F),
            "f.w2": w(F, F, residual_scale), "f.b2": b(F),
            "d.w1": w(F, Hd), "d.b1": b(Hd),
            "d.w2": w(Hd, num_datasets), "d.b2": b(num_datasets),
        }
        return cls(F, num_datasets, dis_loss_weight, params)

    def residual(self, x: dn.Tensor) -> dn.Tensor:
        p = self.params
        h = dn.relu(dn.linear(x, p["f.w1"], p["f.b1"]))
        return dn.linear(h, p["f.w2"], p["f.b2"])

    def discriminate(self, r: dn.Tensor) -> dn.Tensor:
        p = self.params
        h = dn.relu(dn.linear(r, p["d.w1"], p["d.b1"]))
        return dn.linear(h, p["d.w2"], p["d.b2"])


def ocrl_apply(x: dn.Tensor, head: OCRLHead):
    """Return ``(x + r, r)`` with ``r = f(stop_gradient(x))``."""
    if x.value.ndim != 2 or x.shape[1] != head.feature_dim:
        raise ValueError(f"ocrl: features {tuple(x.shape)} do not match head dimension {head.feature_dim}")
    r = head.residual(dn.stop_gradient(x))
    return dn.add(x, r), r


def ocrl_discrimination_loss(r: dn.Tensor, dataset_ids, head: OCRLHead) -> dn.Tensor:
    ids = np.asarray(dataset_ids, dtype=np.int64)
    if len(ids) and (ids.min() < 0 or ids.max() >= head.num_datasets):
        bad = ids[(ids < 0) | (ids >= head.num_datasets)][0]
        raise ValueError(f"dataset id {int(bad)} out of range [0, {head.num_datasets})")
    return dn.softmax_cross_entropy(head.discriminate(r), ids)
