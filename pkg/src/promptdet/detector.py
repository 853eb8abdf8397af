"""A small two-stage voxel detector with optional dataset prompts.

Pipeline: per-point linear layer + (mean-shifted) batch norm + ReLU, max
pooled per voxel; voxels scattered to a BEV plane; three 3x3 conv blocks
(range-mask channel appended before each when enabled); a 1x1 anchor head;
bilinear RoI pooling of the top proposals followed by an MLP refinement,
with object-conditional residuals when enabled.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Mapping, Sequence

import numpy as np

from . import diffnum as dn
from . import geometry as geo
from .prompts import (MSBNLayer, OCRLHead, RangeMask, apply_mask_concat, batch_norm,
                      compute_range_mask, msbn_forward, ocrl_apply, ocrl_discrimination_loss)
from .synthdata import GLOBAL_RANGE, Box3D, DatasetSpec, Frame, boxes_to_array

log = logging.getLogger(__name__)


@dataclass
class DetectorConfig:
    msbn_enabled: bool = False
    mask_enabled: bool = False
    ocrl_enabled: bool = False
    alpha: float = 0.5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    global_range: tuple = GLOBAL_RANGE
    voxel_size: tuple = (0.8, 0.8, 6.0)
    max_points_per_voxel: int = 16
    point_channels: int = 32
    bev_channels: tuple = (32, 64, 64)
    num_classes: int = 3
    # (l, w, h, cz) per class
    anchors: tuple = ((4.4, 1.8, 1.65, -0.9), (0.8, 0.7, 1.75, -0.9), (1.8, 0.7, 1.7, -0.9))
    pos_iou: float = 0.5
    neg_iou: float = 0.35
    pre_nms_proposals: int = 256
    num_proposals: int = 32
    proposal_nms_iou: float = 0.5
    roi_grid: int = 4
    roi_hidden: int = 128
    roi_fg_iou: float = 0.55
    gt_proposals: bool = True
    obj_weight: float = 1.0
    reg_weight: float = 2.0
    cls_weight: float = 1.0
    roi_score_weight: float = 1.0
    roi_reg_weight: float = 1.0
    dis_loss_weight: float = 1.0
    lr: float = 0.003
    weight_decay: float = 0.0
    epochs: int = 4
    batch_size: int = 2
    sampling: str = "round_robin"
    score_thresh: float = 0.1
    nms_iou: float = 0.5
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.global_range = tuple(float(v) for v in self.global_range)
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        self.bev_channels = tuple(int(v) for v in self.bev_channels)
        self.anchors = tuple(tuple(float(v) for v in a) for a in self.anchors)
        if len(self.anchors) != self.num_classes:
            raise ValueError(f"{len(self.anchors)} anchors for {self.num_classes} classes")
        for a in self.anchors:
            if min(a[:3]) <= 0:
                raise ValueError(f"anchor sizes must be positive, got {a}")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.sampling != "round_robin":
            raise ValueError(f"unknown sampling policy {self.sampling!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["global_range"] = list(self.global_range)
        d["voxel_size"] = list(self.voxel_size)
        d["bev_channels"] = list(self.bev_channels)
        d["anchors"] = [list(a) for a in self.anchors]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DetectorConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown detector config keys: {sorted(extra)}")
        return cls(**dict(d))

    def with_prompts(self, msbn=False, mask=False, ocrl=False) -> "DetectorConfig":
        return replace(self, msbn_enabled=msbn, mask_enabled=mask, ocrl_enabled=ocrl)


@dataclass
class DetectionResult:
    boxes: tuple
    scores: np.ndarray
    class_ids: np.ndarray
    dataset_id: int = -1
    frame_index: int = -1

    def __len__(self):
        return len(self.boxes)

    @classmethod
    def empty(cls, dataset_id=-1, frame_index=-1):
        return cls((), np.zeros(0), np.zeros(0, dtype=np.int64), dataset_id, frame_index)


# ---------------------------------------------------------------- model

def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Detector:
    """Parameters plus the stateful pieces (norm statistics, prompt heads)."""

    def __init__(self, cfg: DetectorConfig, dataset_ids: Sequence[int]):
        self.cfg = cfg
        self.dataset_ids = [int(d) for d in dataset_ids]
        self.dataset_index = {d: i for i, d in enumerate(self.dataset_ids)}
        dt = cfg.np_dtype
        streams = np.random.SeedSequence(cfg.seed).spawn(5)
        r_enc, r_bb, r_head, r_mask, r_ocrl = (np.random.default_rng(s) for s in streams)
        C = cfg.point_channels
        p = {}
        p["enc.w"] = _he(r_enc, (4, C), 4, dt)
        p["enc.b"] = np.zeros(C, dt)
        cin = C
        for i, cout in enumerate(cfg.bev_channels):
            p[f"bb{i}.w"] = _he(r_bb, (cout, cin, 3, 3), 9 * cin, dt)
            p[f"bb{i}.b"] = np.zeros(cout, dt)
            if cfg.mask_enabled:
                p[f"bb{i}.wm"] = _he(r_mask, (cout, 1, 3, 3), 9 * (cin + 1), dt)
            cin = cout
        K = cfg.num_classes
        p["head.w"] = (r_head.standard_normal((8 * K, cin, 1, 1)) * 0.01).astype(dt)
        hb = np.zeros(8 * K, dt)
        hb[:K] = -math.log(99.0)  # objectness prior of 0.01
        p["head.b"] = hb
        F = cfg.roi_grid ** 2 * cin
        p["roi.w1"] = _he(r_head, (F, cfg.roi_hidden), F, dt)
        p["roi.b1"] = np.zeros(cfg.roi_hidden, dt)
        p["roi.w2"] = (r_head.standard_normal((cfg.roi_hidden, 7)) * 0.01).astype(dt)
        p["roi.b2"] = np.zeros(7, dt)
        self.params = {k: dn.Tensor(v, requires_grad=True, name=k) for k, v in p.items()}
        self.norm = MSBNLayer(C, alpha=cfg.alpha if cfg.msbn_enabled else 0.0, epsilon=cfg.bn_eps,
                              momentum=cfg.bn_momentum, gamma=dn.Tensor(np.ones(C, dt), requires_grad=True),
                              beta=dn.Tensor(np.zeros(C, dt), requires_grad=True))
        self.params["norm.gamma"] = self.norm.gamma
        self.params["norm.beta"] = self.norm.beta
        self.ocrl = None
        if cfg.ocrl_enabled:
            self.ocrl = OCRLHead.init(F, max(len(self.dataset_ids), 1), r_ocrl, cfg.dis_loss_weight, dtype=dt)
            for k, v in self.ocrl.params.items():
                self.params[f"ocrl.{k}"] = v
        self.feature_dim = F
        self._mask_cache: dict = {}

    # -- geometry helpers
    @property
    def bev_shape(self):
        d = geo.grid_dims(self.cfg.global_range, self.cfg.voxel_size)
        return d[0], d[1]

    @property
    def out_shape(self):
        H, W = self.bev_shape
        return (H - 1) // 2 + 1, (W - 1) // 2 + 1

    @property
    def out_cell(self):
        x1, y1, _, x2, y2, _ = self.cfg.global_range
        Ho, Wo = self.out_shape
        H, W = self.bev_shape
        # stride-2 cells are twice the voxel pitch
        return 2 * self.cfg.voxel_size[0], 2 * self.cfg.voxel_size[1]

    def anchors(self) -> np.ndarray:
        """[Ho, Wo, K, 6] anchor boxes centered on output cells."""
        cache = getattr(self, "_anchors", None)
        if cache is not None:
            return cache
        x1, y1 = self.cfg.global_range[0], self.cfg.global_range[1]
        Ho, Wo = self.out_shape
        cx, cy = self.out_cell
        xs = x1 + (np.arange(Ho) + 0.5) * cx
        ys = y1 + (np.arange(Wo) + 0.5) * cy
        K = self.cfg.num_classes
        a = np.zeros((Ho, Wo, K, 6))
        a[..., 0] = xs[:, None, None]
        a[..., 1] = ys[None, :, None]
        for k, (l, w, h, cz) in enumerate(self.cfg.anchors):
            a[:, :, k, 2] = cz
            a[:, :, k, 3:6] = (l, w, h)
        self._anchors = a
        return a

    def mask_for(self, spec: DatasetSpec) -> RangeMask:
        key = (spec.id, spec.xy_range)
        m = self._mask_cache.get(key)
        if m is None:
            H, W = self.bev_shape
            m = self._mask_cache[key] = compute_range_mask(spec, self.cfg.global_range, H, W)
        return m

    def parameters(self) -> dict:
        return self.params

    def state_dict(self) -> dict:
        out = {k: v.value for k, v in self.params.items()}
        out["norm.running_mean"] = self.norm.running_mean
        out["norm.running_var"] = self.norm.running_var
        return out

    def load_state_dict(self, state: Mapping) -> None:
        dt = self.cfg.np_dtype
        for k, v in self.params.items():
            v.value = np.asarray(state[k], dtype=dt).reshape(v.shape).copy()
        self.norm.running_mean = np.asarray(state["norm.running_mean"], dtype=np.float64).copy()
        self.norm.running_var = np.asarray(state["norm.running_var"], dtype=np.float64).copy()


# ---------------------------------------------------------------- forward pieces

@dataclass(eq=False)
class _Batch:
    frames: list
    grids: list
    masks: list
    dataset_index: np.ndarray


def encode_voxels_batch(model: Detector, frames, grids, training: bool) -> list:
    """Per-frame voxel features [G_i, C]; normalization statistics span the whole batch."""
    cfg = model.cfg
    dt = cfg.np_dtype
    rows, frame_of_point, seg_offset = [], [], []
    seg_all, src_all = [], []
    n_pts = 0
    n_vox = 0
    for i, (f, g) in enumerate(zip(frames, grids)):
        rows.append(f.points[g.point_rows])
        frame_of_point.append(np.full(len(g.point_rows), i))
        src_all.append(np.arange(len(g.point_rows)) + n_pts)
        seg_all.append(g.point_voxel + n_vox)
        seg_offset.append(n_vox)
        n_pts += len(g.point_rows)
        n_vox += g.num_voxels
    if n_pts == 0:
        return [dn.Tensor(np.zeros((0, cfg.point_channels), dt)) for _ in frames]
    P = dn.Tensor(np.concatenate(rows).astype(dt))
    fop = np.concatenate(frame_of_point)
    h = dn.linear(P, model.params["enc.w"], model.params["enc.b"])
    if cfg.msbn_enabled:
        h = msbn_forward(h, fop, model.norm, training)
    else:
        h = batch_norm(h, model.norm, training)
    h = dn.relu(h)
    pooled = dn.segment_max(h, np.concatenate(src_all), np.concatenate(seg_all), n_vox)
    out = []
    for i, g in enumerate(grids):
        idx = np.arange(g.num_voxels) + seg_offset[i]
        out.append(dn.take_rows(pooled, idx))
    return out


def encode_voxels(frame: Frame, grid: geo.VoxelGrid, model: Detector, training: bool = False) -> dn.Tensor:
    return encode_voxels_batch(model, [frame], [grid], training)[0]


def backbone_forward(bev: dn.Tensor, masks, model: Detector) -> dn.Tensor:
    """Three conv blocks (stride 1, 2, 1) on [N, C, H, W]; returns [N, C', H', W']."""
    cfg = model.cfg
    x = bev
    for i, stride in enumerate((1, 2, 1)):
        w = model.params[f"bb{i}.w"]
        if cfg.mask_enabled:
            x = apply_mask_concat(x, masks)
            w = dn.concat([w, model.params[f"bb{i}.wm"]], axis=1)
        x = dn.relu(dn.conv2d(x, w, model.params[f"bb{i}.b"], stride=stride, pad=1))
    return x


def dense_head_forward(features: dn.Tensor, model: Detector) -> dn.Tensor:
    """[N*Ho*Wo, 8K] rows: K objectness logits, 6K deltas, K class logits per cell."""
    out = dn.conv2d(features, model.params["head.w"], model.params["head.b"])
    n, c, h, w = out.shape
    return dn.reshape(dn.transpose(out, (0, 2, 3, 1)), (n * h * w, c))


def roi_pool(features: dn.Tensor, boxes: np.ndarray, batch_index: np.ndarray, model: Detector) -> dn.Tensor:
    """Bilinear crop-pool of each box footprint to a g x g grid, flattened to [R, g*g*C]."""
    g = model.cfg.roi_grid
    C = features.shape[1]
    R = len(boxes)
    if R == 0:
        return dn.Tensor(np.zeros((0, g * g * C), features.dtype))
    x1, y1 = model.cfg.global_range[0], model.cfg.global_range[1]
    cx, cy = model.out_cell
    t = (np.arange(g) + 0.5) / g - 0.5
    px = boxes[:, None, None, 0] + t[None, :, None] * boxes[:, None, None, 3]
    py = boxes[:, None, None, 1] + t[None, None, :] * boxes[:, None, None, 4]
    px, py = np.broadcast_arrays(px, py)
    u = (px - x1) / cx - 0.5
    v = (py - y1) / cy - 0.5
    bi = np.repeat(np.asarray(batch_index), g * g)
    samples = dn.bilinear_sample(features, bi, u.reshape(-1), v.reshape(-1))
    return dn.reshape(samples, (R, g * g * C))


def roi_head_forward(roi_feats: dn.Tensor, model: Detector):
    """Returns (predictions [R, 7], x, r). Column 0 is the score logit, 1..6 box deltas."""
    x = roi_feats
    r = None
    xh = x
    if model.cfg.ocrl_enabled and model.ocrl is not None:
        xh, r = ocrl_apply(x, model.ocrl)
    p = model.params
    h = dn.relu(dn.linear(xh, p["roi.w1"], p["roi.b1"]))
    return dn.linear(h, p["roi.w2"], p["roi.b2"]), x, r


# ---------------------------------------------------------------- targets

@dataclass
class DenseTargets:
    labels: np.ndarray       # [Ho*Wo*K] 1 pos, 0 neg, -1 ignore
    reg: np.ndarray          # [Ho*Wo*K, 6]
    cell_class: np.ndarray   # [Ho*Wo] class of the positive at this cell, -1 if none
    num_pos: int


def assign_targets(model: Detector, boxes: Sequence[Box3D]) -> DenseTargets:
    """Anchor labels: IoU > pos_iou is positive, and so is the anchor of the cell holding each
    GT center (small objects can fall between anchors); IoU < neg_iou is negative."""
    cfg = model.cfg
    anchors = model.anchors()
    Ho, Wo, K, _ = anchors.shape
    flat = anchors.reshape(-1, K, 6)
    labels = np.zeros((Ho * Wo, K), dtype=np.int64)
    reg = np.zeros((Ho * Wo, K, 6))
    best_iou = np.zeros((Ho * Wo, K))
    gt = boxes_to_array(boxes)
    cx, cy = model.out_cell
    x1, y1 = cfg.global_range[0], cfg.global_range[1]
    for k in range(K):
        g = gt[gt[:, 6] == k] if len(gt) else gt
        if len(g) == 0:
            continue
        iou = geo.iou_matrix(flat[:, k], g, "bev")
        arg = iou.argmax(axis=1)
        mx = iou[np.arange(len(iou)), arg]
        pos = mx > cfg.pos_iou
        ix = np.clip(np.floor((g[:, 0] - x1) / cx).astype(np.int64), 0, Ho - 1)
        iy = np.clip(np.floor((g[:, 1] - y1) / cy).astype(np.int64), 0, Wo - 1)
        home = ix * Wo + iy
        for j in range(len(g)):
            a = home[j]
            if not pos[a]:
                pos[a] = True
                arg[a] = j
        ign = (~pos) & (mx >= cfg.neg_iou)
        labels[:, k] = np.where(pos, 1, np.where(ign, -1, 0))
        best_iou[:, k] = np.where(pos, iou[np.arange(len(iou)), arg], 0)
        if pos.any():
            reg[pos, k] = geo.encode_array(g[arg[pos], :6], flat[pos, k])
    cell_class = np.where((labels == 1).any(axis=1), np.argmax(np.where(labels == 1, best_iou + 1, 0), axis=1), -1)
    return DenseTargets(labels.reshape(-1), reg.reshape(-1, 6), cell_class, int((labels == 1).sum()))


def roi_targets(rois: np.ndarray, roi_cls: np.ndarray, boxes: Sequence[Box3D], cfg: DetectorConfig):
    """Soft 3D-IoU score targets, fg flags and regression targets for RoIs of one frame."""
    gt = boxes_to_array(boxes)
    R = len(rois)
    score_t = np.zeros(R)
    fg = np.zeros(R, dtype=bool)
    reg_t = np.zeros((R, 6))
    if R == 0 or len(gt) == 0:
        return score_t, fg, reg_t
    same = roi_cls[:, None] == gt[None, :, 6]
    iou3 = np.where(same, geo.iou_matrix(rois, gt, "3d"), 0.0)
    ioub = np.where(same, geo.iou_matrix(rois, gt, "bev"), 0.0)
    arg = ioub.argmax(axis=1)
    best_b = ioub[np.arange(R), arg]
    best_3 = iou3[np.arange(R), arg]
    score_t = np.clip((best_3 - 0.25) / 0.5, 0.0, 1.0)
    fg = best_b >= cfg.roi_fg_iou
    if fg.any():
        reg_t[fg] = geo.encode_array(gt[arg[fg], :6], rois[fg, :6])
    return score_t, fg, reg_t


# ---------------------------------------------------------------- proposals & NMS

def nms_bev(boxes, scores, iou_thresh: float) -> np.ndarray:
    """Greedy NMS: visit by descending score (lower index first on ties), suppress IoU > thresh."""
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    iou = geo.iou_matrix(boxes[order], boxes[order], "bev")
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        alive[i + 1:] &= ~(iou[i, i + 1:] > iou_thresh)
    return np.asarray(keep, dtype=np.int64)


def _top_k(scores, k):
    if len(scores) <= k:
        return np.lexsort((np.arange(len(scores)), -scores))
    part = np.argpartition(-scores, k)[:k + 1]
    # resolve the boundary deterministically
    thresh = np.sort(scores[part])[::-1][k - 1]
    cand = np.flatnonzero(scores >= thresh)
    order = cand[np.lexsort((cand, -scores[cand]))]
    return order[:k]


def generate_proposals(model: Detector, dense_rows: np.ndarray, n_frames: int):
    """Per frame: top pre-NMS anchors by objectness, decoded and NMS-filtered to ``num_proposals``."""
    cfg = model.cfg
    anchors = model.anchors()
    Ho, Wo, K, _ = anchors.shape
    flat_anchor = anchors.reshape(-1, 6)
    rows = dense_rows.reshape(n_frames, Ho * Wo, 8 * K)
    out = []
    for i in range(n_frames):
        obj = rows[i, :, :K].reshape(-1).astype(np.float64)
        deltas = rows[i, :, K:7 * K].reshape(-1, 6).astype(np.float64)
        top = _top_k(obj, cfg.pre_nms_proposals)
        boxes = geo.decode_array(deltas[top], flat_anchor[top])
        keep = nms_bev(boxes, obj[top], cfg.proposal_nms_iou)[:cfg.num_proposals]
        cls = top[keep] % K
        out.append((boxes[keep], cls, obj[top[keep]]))
    return out


def _jitter_gt(boxes, rng):
    gt = boxes_to_array(boxes)
    if len(gt) == 0:
        return np.zeros((0, 6)), np.zeros(0, dtype=np.int64)
    j = gt[:, :6].copy()
    j[:, :3] += rng.uniform(-0.15, 0.15, (len(gt), 3)) * gt[:, 3:6]
    j[:, 3:6] *= np.exp(rng.uniform(-0.1, 0.1, (len(gt), 3)))
    return j, gt[:, 6].astype(np.int64)


# ---------------------------------------------------------------- full pass

@dataclass
class ForwardOutput:
    dense: dn.Tensor
    roi_pred: dn.Tensor
    roi_x: dn.Tensor
    roi_r: dn.Tensor | None
    rois: np.ndarray
    roi_cls: np.ndarray
    roi_frame: np.ndarray
    features: dn.Tensor


def forward(model: Detector, frames, grids, masks, training: bool, proposals=None, rng=None) -> ForwardOutput:
    cfg = model.cfg
    dt = cfg.np_dtype
    feats = encode_voxels_batch(model, frames, grids, training)
    bevs = [geo.bev_scatter(g, f).features for g, f in zip(grids, feats)]
    bev = bevs[0] if len(bevs) == 1 else dn.concat(bevs, axis=0)
    fmap = backbone_forward(bev, masks, model)
    dense = dense_head_forward(fmap, model)
    if proposals is None:
        proposals = generate_proposals(model, dense.value, len(frames))
        if training and cfg.gt_proposals:
            rng = rng if rng is not None else np.random.default_rng(0)
            extra = []
            for (b, c, s), f in zip(proposals, frames):
                jb, jc = _jitter_gt(f.boxes, rng)
                extra.append((np.concatenate([b, jb]), np.concatenate([c, jc]), s))
            proposals = extra
    rois = np.concatenate([p[0] for p in proposals]) if proposals else np.zeros((0, 6))
    roi_cls = np.concatenate([p[1] for p in proposals]).astype(np.int64) if proposals else np.zeros(0, np.int64)
    roi_frame = np.concatenate([np.full(len(p[0]), i) for i, p in enumerate(proposals)]).astype(np.int64)
    x = roi_pool(fmap, rois.reshape(-1, 6), roi_frame, model)
    if len(rois):
        pred, x, r = roi_head_forward(x, model)
    else:
        pred, r = dn.Tensor(np.zeros((0, 7), dt)), None
    return ForwardOutput(dense, pred, x, r, rois.reshape(-1, 6), roi_cls, roi_frame, fmap)


@dataclass
class LossParts:
    total: dn.Tensor
    det: dn.Tensor
    dis: dn.Tensor | None

    def values(self) -> dict:
        return {"L_det": float(self.det.value), "L_dis": float(self.dis.value) if self.dis is not None else 0.0,
                "total": float(self.total.value)}


def compute_detection_loss(model: Detector, out: ForwardOutput, frames, targets: Sequence[DenseTargets]) -> dn.Tensor:
    """Objectness BCE + smooth-L1 on positive deltas + class CE, over positives; plus RoI terms."""
    cfg = model.cfg
    K = cfg.num_classes
    n = len(frames)
    cells = out.dense.shape[0] // n
    width = out.dense.shape[1]
    dense_flat = dn.reshape(out.dense, (-1,))
    labels = np.concatenate([t.labels for t in targets])
    num_pos = max(int(sum(t.num_pos for t in targets)), 1)
    # objectness entries: row (frame*cells + cell) * width + k
    anchor_ids = np.arange(n * cells * K)
    cell_of = anchor_ids // K
    k_of = anchor_ids % K
    obj_idx = cell_of * width + k_of
    obj = dn.take_rows(dense_flat, obj_idx)
    weights = (labels >= 0).astype(np.float64)
    loss = dn.mul(dn.sigmoid_bce(obj, (labels == 1).astype(np.float64), weights), cfg.obj_weight / num_pos)

    pos = np.flatnonzero(labels == 1)
    if len(pos):
        reg_idx = (cell_of[pos] * width + K + 6 * k_of[pos])[:, None] + np.arange(6)[None, :]
        reg_pred = dn.reshape(dn.take_rows(dense_flat, reg_idx.reshape(-1)), (len(pos), 6))
        reg_t = np.concatenate([t.reg for t in targets])[pos]
        loss = dn.add(loss, dn.mul(dn.smooth_l1(reg_pred, reg_t), cfg.reg_weight / num_pos))
        cell_cls = np.concatenate([t.cell_class for t in targets])
        pc = np.flatnonzero(cell_cls >= 0)
        cls_idx = (pc * width + 7 * K)[:, None] + np.arange(K)[None, :]
        logits = dn.reshape(dn.take_rows(dense_flat, cls_idx.reshape(-1)), (len(pc), K))
        ce = dn.softmax_cross_entropy(logits, cell_cls[pc], reduction="sum")
        loss = dn.add(loss, dn.mul(ce, cfg.cls_weight / num_pos))

    R = len(out.rois)
    if R:
        score_t = np.zeros(R)
        fg = np.zeros(R, dtype=bool)
        reg_t = np.zeros((R, 6))
        for i, f in enumerate(frames):
            sel = out.roi_frame == i
            s, g, r = roi_targets(out.rois[sel], out.roi_cls[sel], f.boxes, cfg)
            score_t[sel], fg[sel], reg_t[sel] = s, g, r
        pred = out.roi_pred
        score = dn.take_rows(dn.reshape(pred, (-1,)), np.arange(R) * 7)
        # BCE against soft targets, offset by the target entropy so its minimum is 0
        t = np.clip(score_t, 1e-12, 1 - 1e-12)
        ent = float(-(t * np.log(t) + (1 - t) * np.log1p(-t))[(score_t > 0) & (score_t < 1)].sum())
        kl = dn.add(dn.sigmoid_bce(score, score_t), -ent)
        loss = dn.add(loss, dn.mul(kl, cfg.roi_score_weight / R))
        fgi = np.flatnonzero(fg)
        if len(fgi):
            ridx = (fgi * 7 + 1)[:, None] + np.arange(6)[None, :]
            rp = dn.reshape(dn.take_rows(dn.reshape(pred, (-1,)), ridx.reshape(-1)), (len(fgi), 6))
            loss = dn.add(loss, dn.mul(dn.smooth_l1(rp, reg_t[fgi]), cfg.roi_reg_weight / len(fgi)))
    return loss


def total_loss(model: Detector, out: ForwardOutput, frames, targets) -> LossParts:
    det = compute_detection_loss(model, out, frames, targets)
    if model.cfg.ocrl_enabled and out.roi_r is not None and len(out.rois):
        ids = np.array([model.dataset_index[frames[i].dataset_id] for i in out.roi_frame])
        dis = ocrl_discrimination_loss(out.roi_r, ids, model.ocrl)
        return LossParts(dn.add(det, dn.mul(dis, model.cfg.dis_loss_weight)), det, dis)
    return LossParts(det, det, None)


# ---------------------------------------------------------------- training

class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class TrainResult:
    model: Detector
    step_log: list
    epoch_log: list


class FrameCache:
    """Voxel grids and dense targets per frame; frames are immutable so this is safe."""

    def __init__(self, model: Detector):
        self.model = model
        self._grids: dict = {}
        self._targets: dict = {}
        self._keep: list = []

    def grid(self, frame: Frame) -> geo.VoxelGrid:
        key = id(frame)
        g = self._grids.get(key)
        if g is None:
            cfg = self.model.cfg
            g = self._grids[key] = geo.voxelize(frame, cfg.global_range, cfg.voxel_size, cfg.max_points_per_voxel)
            self._keep.append(frame)
        return g

    def targets(self, frame: Frame) -> DenseTargets:
        key = id(frame)
        t = self._targets.get(key)
        if t is None:
            t = self._targets[key] = assign_targets(self.model, frame.boxes)
            self._keep.append(frame)
        return t


def round_robin_batches(frames_by_dataset: Mapping[int, Sequence[Frame]], batch_size: int, steps: int,
                        rng: np.random.Generator):
    """Yield ``steps`` batches that cycle through datasets frame by frame.

    Each dataset walks its own shuffled order, reshuffling when exhausted.
    """
    ids = sorted(k for k, v in frames_by_dataset.items() if len(v))
    orders = {d: [] for d in ids}
    turn = 0
    for _ in range(steps):
        batch = []
        for _ in range(batch_size):
            d = ids[turn % len(ids)]
            turn += 1
            if not orders[d]:
                orders[d] = list(rng.permutation(len(frames_by_dataset[d])))
            batch.append(frames_by_dataset[d][orders[d].pop(0)])
        yield batch


def train(datasets: Sequence[DatasetSpec], frames_by_dataset: Mapping[int, Sequence[Frame]], cfg: DetectorConfig,
          log_path=None, checkpoint_path=None, model: Detector | None = None, total_steps: int | None = None) -> TrainResult:
    """Joint training over the union of datasets with Adam and a one-cycle schedule."""
    if not datasets:
        raise ValueError("train needs at least one dataset")
    specs = {s.id: s for s in datasets}
    model = model or Detector(cfg, [s.id for s in datasets])
    cache = FrameCache(model)
    n_total = sum(len(frames_by_dataset.get(s.id, ())) for s in datasets)
    if n_total == 0:
        raise ValueError("no training frames")
    steps_per_epoch = math.ceil(n_total / cfg.batch_size)
    total = total_steps if total_steps is not None else cfg.epochs * steps_per_epoch
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    jitter_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    state = dn.OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = model.params
    step_log, epoch_log = [], []
    epoch_ids: set = set()
    epoch_losses = []
    batches = round_robin_batches({s.id: frames_by_dataset.get(s.id, ()) for s in datasets}, cfg.batch_size, total, rng)
    for step, frames in enumerate(batches):
        lr = dn.onecycle_lr(step, total, cfg.lr)
        grids = [cache.grid(f) for f in frames]
        targets = [cache.targets(f) for f in frames]
        masks = [model.mask_for(specs[f.dataset_id]) for f in frames]
        out = forward(model, frames, grids, masks, training=True, rng=jitter_rng)
        parts = total_loss(model, out, frames, targets)
        vals = parts.values()
        if not np.isfinite(vals["total"]):
            raise TrainingDiverged(step, vals["total"])
        for p in params.values():
            p.grad = None
        dn.backward(parts.total)
        dn.adam_step(params, {k: p.grad for k, p in params.items()}, state, lr)
        row = {"step": step, "lr": lr, **vals}
        step_log.append(row)
        epoch_losses.append(vals["total"])
        epoch_ids.update(f.dataset_id for f in frames)
        if (step + 1) % steps_per_epoch == 0 or step + 1 == total:
            epoch_log.append({"epoch": len(epoch_log), "mean_total": float(np.mean(epoch_losses)),
                              "dataset_ids": sorted(epoch_ids)})
            log.info("epoch %d loss %.4f", len(epoch_log) - 1, epoch_log[-1]["mean_total"])
            epoch_ids, epoch_losses = set(), []
    if log_path is not None:
        write_train_log(log_path, step_log)
    if checkpoint_path is not None:
        dn.save_checkpoint(checkpoint_path, model.state_dict(), {"config": cfg.to_dict(), "dataset_ids": model.dataset_ids})
    return TrainResult(model, step_log, epoch_log)


def write_train_log(path, step_log) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "L_det", "L_dis", "total"])
        for r in step_log:
            w.writerow([r["step"], repr(r["lr"]), repr(r["L_det"]), repr(r["L_dis"]), repr(r["total"])])


def load_model(path) -> Detector:
    state, meta = dn.load_checkpoint(path)
    cfg = DetectorConfig.from_dict(meta["config"])
    model = Detector(cfg, meta["dataset_ids"])
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------- inference

def predict(frame: Frame, model: Detector, spec_for_prompts: DatasetSpec, frame_index: int = -1,
            cache: FrameCache | None = None) -> DetectionResult:
    """Detect boxes in one frame; ``spec_for_prompts`` supplies the range-mask prompt."""
    cfg = model.cfg
    grid = cache.grid(frame) if cache is not None else geo.voxelize(frame, cfg.global_range, cfg.voxel_size,
                                                                  cfg.max_points_per_voxel)
    if grid.num_voxels == 0:
        return DetectionResult.empty(frame.dataset_id, frame_index)
    mask = model.mask_for(spec_for_prompts)
    out = forward(model, [frame], [grid], [mask], training=False)
    if len(out.rois) == 0:
        return DetectionResult.empty(frame.dataset_id, frame_index)
    pred = out.roi_pred.value.astype(np.float64)
    scores = 1.0 / (1.0 + np.exp(-pred[:, 0]))
    boxes = geo.decode_array(pred[:, 1:7], out.rois)
    keep = scores >= cfg.score_thresh
    inside = np.all((boxes[:, :3] >= np.asarray(cfg.global_range[:3])) & (boxes[:, :3] < np.asarray(cfg.global_range[3:])), axis=1)
    keep &= inside
    boxes, scores, cls = boxes[keep], scores[keep], out.roi_cls[keep]
    kept = []
    for k in np.unique(cls):
        sel = np.flatnonzero(cls == k)
        kept.extend(sel[nms_bev(boxes[sel], scores[sel], cfg.nms_iou)])
    kept = np.asarray(kept, dtype=np.int64)
    order = kept[np.lexsort((kept, -scores[kept]))] if len(kept) else kept
    result_boxes = tuple(Box3D(tuple(b[:3]), tuple(b[3:6]), int(c)) for b, c in zip(boxes[order], cls[order]))
    return DetectionResult(result_boxes, scores[order], cls[order].astype(np.int64), frame.dataset_id, frame_index)


def predict_frames(model: Detector, frames: Sequence[Frame], spec_for_prompts: DatasetSpec) -> list:
    return [predict(f, model, spec_for_prompts, i) for i, f in enumerate(frames)]
