"""Three-stage grain-boundary detector built on pixel-difference convolutions.

Each stage is an entry convolution followed by four residual PDC blocks.  A
refinement head (CPCM multi-dilation module, then large-kernel attention)
turns the stage features into a single-channel side map; the three side maps
are fused by a 1x1 convolution.  Every side map and the fused map are trained
with a Dice loss (deep supervision).
"""
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .kernels import chessboard_distance
from .params import ParamStore, adam_step, he_normal, make_rng


class PdcKind(str, Enum):
    vanilla = "vanilla"
    cpdc = "cpdc"
    apdc = "apdc"
    rpdc = "rpdc"


KERNEL_SIZE = {PdcKind.vanilla: 3, PdcKind.cpdc: 3, PdcKind.apdc: 3, PdcKind.rpdc: 5}

# 3x3 ring in clockwise order (row index grows downward), flattened indices
_RING3 = (0, 1, 2, 5, 8, 7, 6, 3)


def _ring_pairs(kind):
    """(tap, paired tap) index pairs: the op computes sum w[tap] * (x[tap] - x[pair])."""
    kind = PdcKind(kind)
    if kind is PdcKind.cpdc:
        return [(i, 4) for i in range(9) if i != 4]
    if kind is PdcKind.apdc:
        return [(_RING3[k], _RING3[(k + 1) % 8]) for k in range(8)]
    if kind is PdcKind.rpdc:
        pairs = []
        for r in range(5):
            for c in range(5):
                if max(abs(r - 2), abs(c - 2)) == 2:
                    ri = 2 + int(np.clip(r - 2, -1, 1))
                    ci = 2 + int(np.clip(c - 2, -1, 1))
                    pairs.append((r * 5 + c, ri * 5 + ci))
        return pairs
    return []


def pdc_transform_matrix(kind):
    """Matrix ``M`` with ``vanilla_flat = M @ pdc_flat`` for one k*k kernel."""
    kind = PdcKind(kind)
    k = KERNEL_SIZE[kind]
    if kind is PdcKind.vanilla:
        return np.eye(k * k)
    m = np.zeros((k * k, k * k))
    for tap, pair in _ring_pairs(kind):
        m[tap, tap] += 1.0
        m[pair, tap] -= 1.0
    return m


_MATS = {kind: pdc_transform_matrix(kind) for kind in PdcKind}


def pdc_to_vanilla(kind, weight):
    """Vanilla kernel equivalent to a pixel-difference kernel.

    ``weight`` has shape (out, in, k, k) with k = 3 (5 for rpdc).  Accepts a
    numpy array or a Tensor; for a Tensor the transform is recorded so that
    gradients reach the pixel-difference weights.
    """
    kind = PdcKind(kind)
    k = KERNEL_SIZE[kind]
    if weight.shape[-2:] != (k, k):
        raise ValueError(f"{kind.value} expects {k}x{k} kernels, got {weight.shape[-2:]}")
    if kind is PdcKind.vanilla:
        return weight
    m = _MATS[kind]
    if isinstance(weight, T.Tensor):
        flat = T.reshape(weight, (-1, k * k))
        return T.reshape(T.matmul(flat, m.T), weight.shape)
    w = np.asarray(weight, dtype=np.float64)
    return (w.reshape(-1, k * k) @ m.T).reshape(w.shape)


def pdc_conv(x, weight, kind, groups=1):
    """Pixel-difference convolution, stride 1, edge-replicated borders.

    Replicated borders keep the pixel differences at the image edge equal to
    those just inside it, so a constant image maps to exactly zero.
    """
    k = KERNEL_SIZE[PdcKind(kind)]
    xp = T.pad_replicate(x, k // 2)
    return T.conv2d(xp, pdc_to_vanilla(kind, weight), None, groups=groups)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULT_SCHEDULE = (PdcKind.cpdc, PdcKind.apdc, PdcKind.rpdc, PdcKind.vanilla)


@dataclass
class EdgeNetConfig:
    stages: int = 3
    blocks_per_stage: int = 4
    stage_channels: tuple = (16, 32, 64)
    pdc_schedule: tuple = ()
    in_channels: int = 1
    cpcm_dilations: tuple = (1, 2, 4, 8)
    cpcm_reduction: int = 4
    lka_dw_kernel: int = 5
    lka_dilated_kernel: int = 7
    lka_dilation: int = 3
    depthwise_pdc: bool = True
    lr: float = 1e-3
    batch_size: int = 4

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if not self.pdc_schedule:
            self.pdc_schedule = DEFAULT_SCHEDULE * self.stages
        self.pdc_schedule = tuple(PdcKind(k) for k in self.pdc_schedule)
        self.validate()

    def validate(self):
        if self.stages < 1 or self.blocks_per_stage < 1:
            raise ValueError("stages and blocks_per_stage must be >= 1")
        if len(self.stage_channels) != self.stages:
            raise ValueError("stage_channels needs one width per stage")
        if len(self.pdc_schedule) != self.stages * self.blocks_per_stage:
            raise ValueError("pdc_schedule length must equal stages * blocks_per_stage")
        if len(self.cpcm_dilations) != 4:
            raise ValueError("cpcm needs four branch dilations")
        for c in self.stage_channels:
            if c < 4 * (c // self.cpcm_reduction) or c // self.cpcm_reduction < 1 or self.cpcm_reduction < 4:
                raise ValueError("cpcm needs input channels >= 4 x output channels")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _conv_params(store, rng, name, out_ch, in_ch, k, bias=True, zero=False):
    shape = (out_ch, in_ch, k, k)
    store.add(name + ".w", np.zeros(shape) if zero else he_normal(rng, shape, in_ch * k * k))
    if bias:
        store.add(name + ".b", np.zeros(out_ch))


def init_edge_net(config=None, seed=0):
    cfg = config or EdgeNetConfig()
    rng = make_rng(seed, 101)
    store = ParamStore()
    prev = cfg.in_channels
    for s, ch in enumerate(cfg.stage_channels):
        _conv_params(store, rng, f"s{s}.entry", ch, prev, 3)
        for b in range(cfg.blocks_per_stage):
            kind = cfg.pdc_schedule[s * cfg.blocks_per_stage + b]
            k = KERNEL_SIZE[kind]
            in_g = 1 if cfg.depthwise_pdc else ch
            _conv_params(store, rng, f"s{s}.b{b}.pdc", ch, in_g, k, bias=False)
            _conv_params(store, rng, f"s{s}.b{b}.mix", ch, ch, 1)
            store[f"s{s}.b{b}.mix.w"].data *= 0.5
        red = ch // cfg.cpcm_reduction
        _conv_params(store, rng, f"s{s}.cpcm.reduce", red, ch, 1)
        for d in range(4):
            _conv_params(store, rng, f"s{s}.cpcm.br{d}", red, red, 3)
            store[f"s{s}.cpcm.br{d}.w"].data *= 0.5
        _conv_params(store, rng, f"s{s}.lka.dw", red, 1, cfg.lka_dw_kernel)
        _conv_params(store, rng, f"s{s}.lka.dwd", red, 1, cfg.lka_dilated_kernel)
        _conv_params(store, rng, f"s{s}.lka.pw", red, red, 1)
        store[f"s{s}.lka.pw.b"].data[:] = 1.0
        _conv_params(store, rng, f"s{s}.side", 1, red, 1)
        prev = ch
    store.add("fuse.w", np.full((1, cfg.stages, 1, 1), 1.0 / cfg.stages))
    store.add("fuse.b", np.zeros(1))
    return store


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def pdc_block(x, pdc_w, mix_w, mix_b, kind, depthwise=True):
    """Residual block ``x + conv1x1(relu(pdc(x)))``."""
    ch = x.shape[1]
    if mix_w.shape[:2] != (ch, ch):
        raise ValueError(f"pdc_block: 1x1 weight {mix_w.shape} does not preserve {ch} channels")
    y = pdc_conv(x, pdc_w, kind, groups=ch if depthwise else 1)
    return x + T.conv2d(T.relu(y), mix_w, mix_b)


def cpcm(x, reduce_w, reduce_b, branches, dilations=(1, 2, 4, 8)):
    """1x1 channel reduction, then four dilated 3x3 branches summed.

    ``branches`` is a list of four (weight, bias) pairs.
    """
    out_ch = reduce_w.shape[0]
    if x.shape[1] < 4 * out_ch:
        raise ValueError(f"cpcm: {x.shape[1]} input channels < 4 x {out_ch} output channels")
    u = T.relu(T.conv2d(x, reduce_w, reduce_b))
    acc = None
    for (w, b), d in zip(branches, dilations):
        y = T.conv2d(u, w, b, padding=d, dilation=d)
        acc = y if acc is None else acc + y
    return acc


def lka(x, dw_w, dw_b, dwd_w, dwd_b, pw_w, pw_b, dilation=3):
    """Large-kernel attention: ``x * conv1x1(dwconv_dilated(dwconv(x)))``."""
    ch = x.shape[1]
    k1 = dw_w.shape[-1]
    k2 = dwd_w.shape[-1]
    a = T.conv2d(x, dw_w, dw_b, padding=k1 // 2, groups=ch)
    a = T.conv2d(a, dwd_w, dwd_b, padding=dilation * (k2 // 2), dilation=dilation, groups=ch)
    a = T.conv2d(a, pw_w, pw_b)
    return x * a


def side_logit(x, w, b, out_h, out_w):
    return T.bilinear_resize(T.conv2d(x, w, b), out_h, out_w)


def side_output(x, w, b, out_h, out_w):
    """Single-channel edge probability at the original resolution."""
    return T.sigmoid(side_logit(x, w, b, out_h, out_w))


def fuse(side_maps, w, b):
    """``sigmoid(conv1x1(concat(maps)))``; maps are single-channel, equal size."""
    sizes = {m.shape[-2:] for m in side_maps}
    if len(sizes) != 1:
        raise ValueError(f"fuse: side maps differ in size {sizes}")
    if len(side_maps) != w.shape[1]:
        raise ValueError(f"fuse: expected {w.shape[1]} maps, got {len(side_maps)}")
    return T.sigmoid(T.conv2d(T.concat(side_maps, axis=1), w, b))


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------


def edge_net_logits(store, x, cfg):
    """Side logits per stage and the fused logit, all at input resolution."""
    p = store.params
    h, w = x.shape[-2:]
    feats = x
    sides = []
    for s in range(cfg.stages):
        stride = 1 if s == 0 else 2
        feats = T.conv2d(feats, p[f"s{s}.entry.w"], p[f"s{s}.entry.b"], stride=stride, padding=1)
        for blk in range(cfg.blocks_per_stage):
            kind = cfg.pdc_schedule[s * cfg.blocks_per_stage + blk]
            feats = pdc_block(feats, p[f"s{s}.b{blk}.pdc.w"], p[f"s{s}.b{blk}.mix.w"],
                              p[f"s{s}.b{blk}.mix.b"], kind, cfg.depthwise_pdc)
        branches = [(p[f"s{s}.cpcm.br{d}.w"], p[f"s{s}.cpcm.br{d}.b"]) for d in range(4)]
        r = cpcm(feats, p[f"s{s}.cpcm.reduce.w"], p[f"s{s}.cpcm.reduce.b"], branches, cfg.cpcm_dilations)
        r = lka(r, p[f"s{s}.lka.dw.w"], p[f"s{s}.lka.dw.b"], p[f"s{s}.lka.dwd.w"], p[f"s{s}.lka.dwd.b"],
                p[f"s{s}.lka.pw.w"], p[f"s{s}.lka.pw.b"], cfg.lka_dilation)
        # the refined map only feeds the side branch; raw stage features go on
        sides.append(side_logit(r, p[f"s{s}.side.w"], p[f"s{s}.side.b"], h, w))
    fused = T.conv2d(T.concat(sides, axis=1), p["fuse.w"], p["fuse.b"])
    return sides, fused


def edge_net_forward(store, x, cfg):
    sides, fused = edge_net_logits(store, x, cfg)
    return [T.sigmoid(s) for s in sides], T.sigmoid(fused)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

DICE_EPS = 1e-6


def dice_coefficient(pred, target, eps=DICE_EPS):
    p = np.asarray(pred, dtype=np.float64)
    q = np.asarray(target, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"dice: size mismatch {p.shape} vs {q.shape}")
    return (2.0 * (p * q).sum() + eps) / ((p * p).sum() + (q * q).sum() + eps)


def dice_loss(pred, target, eps=DICE_EPS):
    """``1 - Dice`` averaged over the batch axis.

    ``pred`` is a Tensor (or array) of probabilities with a leading batch
    axis; ``target`` a same-shape binary array.
    """
    pred = T.as_tensor(pred)
    q = np.asarray(target, dtype=np.float64)
    if pred.shape != q.shape:
        raise ValueError(f"dice_loss: size mismatch {pred.shape} vs {q.shape}")
    p = pred.data
    n = p.shape[0] if p.ndim > 2 else 1
    pf = p.reshape(n, -1)
    qf = q.reshape(n, -1)
    num = 2.0 * (pf * qf).sum(axis=1) + eps
    den = (pf * pf).sum(axis=1) + (qf * qf).sum(axis=1) + eps
    loss = 1.0 - (num / den).mean()

    def vjp(g):
        dd = (2.0 * qf * den[:, None] - num[:, None] * 2.0 * pf) / (den[:, None] ** 2)
        return (-(g / n) * dd.reshape(p.shape),)

    return T._make(np.asarray(loss), (pred,), vjp)


def deep_supervision_loss(side_probs, fused_prob, target, supervise=None):
    """Fused Dice loss plus the Dice loss of every supervised side output.

    ``supervise`` (default: all) switches individual stage terms on or off.
    Returns the total and the individual terms, stages first, fused last.
    """
    sup = [True] * len(side_probs) if supervise is None else list(supervise)
    fused_term = dice_loss(fused_prob, target)
    terms = [dice_loss(s, target) for s in side_probs]
    total = fused_term
    for on, t in zip(sup, terms):
        if on:
            total = total + t
    return total, terms + [fused_term]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentSpec:
    crop: int = 64
    stride: int = 32
    rotations: tuple = (0, 90, 180, 270)
    flips: tuple = ("none", "h", "v")


def _transform(a, rot, flip):
    # rotation is clockwise: (r, c) -> (c, H - 1 - r) for 90 degrees
    out = np.rot90(a, -(rot // 90))
    if flip == "h":
        out = out[:, ::-1]
    elif flip == "v":
        out = out[::-1, :]
    return np.ascontiguousarray(out)


def _crop_origins(size, crop, stride):
    if crop > size:
        raise ValueError(f"crop {crop} larger than image side {size}")
    starts = list(range(0, size - crop + 1, stride))
    if starts[-1] != size - crop:
        starts.append(size - crop)
    return starts


def augment(images, masks, spec=None):
    """Deterministic rotation x flip x sliding-crop expansion.

    Returns ``(images, masks, factor)`` where ``factor`` is the expansion
    ratio; masks undergo the same transform as their image.
    """
    spec = spec or AugmentSpec()
    if len(images) != len(masks):
        raise ValueError("images and masks must pair up")
    out_i, out_m = [], []
    for img, msk in zip(images, masks):
        if img.shape != msk.shape:
            raise ValueError("image/mask size mismatch")
        for rot in spec.rotations:
            for flip in spec.flips:
                ti, tm = _transform(img, rot, flip), _transform(msk, rot, flip)
                for r in _crop_origins(ti.shape[0], spec.crop, spec.stride):
                    for c in _crop_origins(ti.shape[1], spec.crop, spec.stride):
                        out_i.append(ti[r:r + spec.crop, c:c + spec.crop].copy())
                        out_m.append(tm[r:r + spec.crop, c:c + spec.crop].copy())
    factor = len(out_i) / max(len(images), 1)
    return out_i, out_m, factor


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_edge_detector(images, masks, config=None, epochs=10, seed=0, store=None, log=None):
    """Adam training with deep supervision; returns ``(store, per-epoch loss)``.

    The returned curve has ``epochs + 1`` entries: entry 0 is the loss of the
    initial weights over the whole set, entry ``e`` the mean batch loss
    during epoch ``e``.
    """
    cfg = config or EdgeNetConfig()
    if len(images) == 0:
        raise ValueError("train_edge_detector: empty dataset")
    store = store or init_edge_net(cfg, seed)
    x_all = np.stack([np.asarray(i, dtype=np.float64) for i in images])[:, None]
    y_all = np.stack([np.asarray(m, dtype=np.float64) for m in masks])[:, None]
    rng = make_rng(seed, 102)
    curve = [_dataset_loss(store, x_all, y_all, cfg)]
    for epoch in range(epochs):
        total, count = 0.0, 0
        for idx in _batches(len(x_all), cfg.batch_size, rng):
            sides, fused = edge_net_forward(store, T.Tensor(x_all[idx]), cfg)
            loss, _ = deep_supervision_loss(sides, fused, y_all[idx])
            store.zero_grad()
            T.backward(loss)
            adam_step(store, lr=cfg.lr)
            total += loss.item() * len(idx)
            count += len(idx)
        curve.append(total / count)
        if log:
            log(f"edge epoch {epoch + 1}/{epochs} loss {curve[-1]:.4f}")
    return store, curve


def _dataset_loss(store, x_all, y_all, cfg):
    total = 0.0
    with T.no_grad():
        for i in range(0, len(x_all), cfg.batch_size):
            sides, fused = edge_net_forward(store, T.Tensor(x_all[i:i + cfg.batch_size]), cfg)
            loss, _ = deep_supervision_loss(sides, fused, y_all[i:i + cfg.batch_size])
            total += loss.item() * len(x_all[i:i + cfg.batch_size])
    return total / len(x_all)


def detect_edges(image, store, config=None):
    """Fused edge probability map and per-stage maps for one image."""
    cfg = config or EdgeNetConfig()
    img = np.asarray(getattr(image, "values", image), dtype=np.float64)
    template = init_edge_net(cfg, 0)
    if {k: t.shape for k, t in template.params.items()} != {k: t.shape for k, t in store.params.items()}:
        raise ValueError("detect_edges: weights do not match the network configuration")
    with T.no_grad():
        sides, fused = edge_net_forward(store, T.Tensor(img[None, None]), cfg)
    return fused.data[0, 0], [s.data[0, 0] for s in sides]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EdgeMetrics:
    precision: float
    recall: float
    f1: float
    match_tolerance_px: int = 2


def f1_score(precision, recall):
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def _near_fraction(a, b, tol):
    # fraction of on-pixels of a within Chebyshev distance tol of b (1 if a empty)
    n = int(a.sum())
    if n == 0:
        return 1.0
    d = chessboard_distance(b)
    return float((d[a] <= tol).sum()) / n


def edge_metrics(pred, gt, tol_px=2):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"edge_metrics: size mismatch {pred.shape} vs {gt.shape}")
    p = _near_fraction(pred, gt, tol_px)
    r = _near_fraction(gt, pred, tol_px)
    return EdgeMetrics(p, r, f1_score(p, r), tol_px)


@dataclass
class EdgeSummary:
    mean_precision: float
    mean_recall: float
    mean_f1: float
    f1_of_means: float
    per_image: list = field(default_factory=list)


def summarize_edge_metrics(items):
    """Per-image-averaged F1 (primary) and F1 of the averaged P/R."""
    mp = float(np.mean([m.precision for m in items]))
    mr = float(np.mean([m.recall for m in items]))
    mf = float(np.mean([m.f1 for m in items]))
    return EdgeSummary(mp, mr, mf, f1_score(mp, mr), list(items))
