"""UNet++ (nested dense skips) for second-phase segmentation.

Node x[i, j] sits at encoder level i and skip depth j.  Encoder nodes
(j = 0) take the max-pooled node above them; every other node takes the
concatenation of all same-level predecessors x[i, 0..j-1] plus the
bilinearly upsampled x[i+1, j-1].  The head is a 1x1 conv and a sigmoid on
x[0, depth].
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParamStore, adam_step, he_normal, make_rng


@dataclass
class UnetPPConfig:
    depth: int = 4
    base_channels: int = 16
    in_channels: int = 1
    lr: float = 2e-3
    batch_size: int = 4
    bn_momentum: float = 0.1
    deep_supervision: bool = False
    crop: int = 64

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.crop % (2 ** self.depth):
            raise ValueError("crop must be a multiple of 2**depth")

    def channels(self, level):
        return self.base_channels * 2 ** level

    @property
    def factor(self):
        return 2 ** self.depth


def nodes(cfg):
    """All (i, j) with i + j <= depth in evaluation order."""
    return [(i, j) for j in range(cfg.depth + 1) for i in range(cfg.depth + 1 - j)]


def node_inputs(cfg):
    """Wiring table: node -> list of ("input" | "pool" | "same" | "up", source)."""
    g = {}
    for i, j in nodes(cfg):
        if j == 0:
            g[(i, j)] = [("input", None)] if i == 0 else [("pool", (i - 1, 0))]
        else:
            g[(i, j)] = [("same", (i, k)) for k in range(j)] + [("up", (i + 1, j - 1))]
    return g


def node_in_channels(cfg, i, j):
    if j == 0:
        return cfg.in_channels if i == 0 else cfg.channels(i - 1)
    return j * cfg.channels(i) + cfg.channels(i + 1)


def _heads(cfg):
    return list(range(1, cfg.depth + 1)) if cfg.deep_supervision else [cfg.depth]


def init_unetpp(config=None, seed=0):
    cfg = config or UnetPPConfig()
    rng = make_rng(seed, 301)
    store = ParamStore()
    for i, j in nodes(cfg):
        cin, cout = node_in_channels(cfg, i, j), cfg.channels(i)
        for u, c_in in ((1, cin), (2, cout)):
            name = f"x{i}{j}.c{u}"
            store.add(name + ".w", he_normal(rng, (cout, c_in, 3, 3), c_in * 9))
            store.add(name + ".g", np.ones(cout))
            store.add(name + ".b", np.zeros(cout))
            store.add_buffer(name + ".rm", np.zeros(cout))
            store.add_buffer(name + ".rv", np.ones(cout))
    c0 = cfg.channels(0)
    for j in _heads(cfg):
        store.add(f"head{j}.w", he_normal(rng, (1, c0, 1, 1), c0))
        store.add(f"head{j}.b", np.zeros(1))
    return store


def conv_block(store, name, x, training, momentum=0.1):
    """Two (3x3 conv, batch norm, ReLU) units; spatial size is preserved."""
    for u in (1, 2):
        p = f"{name}.c{u}"
        x = T.conv2d(x, store[p + ".w"], None, padding=1)
        x = T.batch_norm2d(x, store[p + ".g"], store[p + ".b"], store.buffers[p + ".rm"],
                           store.buffers[p + ".rv"], training, momentum)
        x = T.relu(x)
    return x


def unetpp_logits(store, x, cfg, training=False):
    """Head logits ``{j: (N, 1, H, W)}`` for every supervised head."""
    h, w = x.shape[-2:]
    if h % cfg.factor or w % cfg.factor:
        raise ValueError(f"input size {h}x{w} must be a multiple of {cfg.factor}")
    feats = {}
    for (i, j), srcs in node_inputs(cfg).items():
        parts = []
        for kind, src in srcs:
            if kind == "input":
                parts.append(x)
            elif kind == "pool":
                parts.append(T.max_pool2x2(feats[src]))
            elif kind == "same":
                parts.append(feats[src])
            else:
                lo = feats[src]
                parts.append(T.bilinear_resize(lo, lo.shape[-2] * 2, lo.shape[-1] * 2))
        inp = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        feats[(i, j)] = conv_block(store, f"x{i}{j}", inp, training, cfg.bn_momentum)
    return {j: T.conv2d(feats[(0, j)], store[f"head{j}.w"], store[f"head{j}.b"]) for j in _heads(cfg)}


def unetpp_forward(store, x, cfg, training=False):
    """Foreground probability map (N, 1, H, W)."""
    logits = unetpp_logits(store, x, cfg, training)
    probs = [T.sigmoid(v) for v in logits.values()]
    if len(probs) == 1:
        return probs[0]
    out = probs[0]
    for p in probs[1:]:
        out = out + p
    return T.scale(out, 1.0 / len(probs))


# ---------------------------------------------------------------------------
# loss and metrics
# ---------------------------------------------------------------------------

BCE_CLAMP = 1e-7


def bce_loss(pred, target):
    """Binary cross-entropy, -mean(y log p + (1 - y) log(1 - p)), p clamped."""
    pred = T.as_tensor(pred)
    y = np.asarray(target, dtype=np.float64)
    if pred.shape != y.shape:
        raise ValueError(f"bce_loss: size mismatch {pred.shape} vs {y.shape}")
    p = T.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ll = T.log(p) * T.Tensor(y) + T.log(T.Tensor(np.ones_like(y)) - p) * T.Tensor(1.0 - y)
    return T.neg(T.mean(ll))


@dataclass
class SegMetrics:
    accuracy: float
    precision: float
    miou: float
    iou_fg: float
    iou_bg: float


def _iou(a, b):
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def seg_metrics(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"seg_metrics: size mismatch {pred.shape} vs {gt.shape}")
    tp = np.count_nonzero(pred & gt)
    fp = np.count_nonzero(pred & ~gt)
    acc = np.count_nonzero(pred == gt) / pred.size
    prec = 1.0 if tp + fp == 0 else tp / (tp + fp)
    fg, bg = _iou(pred, gt), _iou(~pred, ~gt)
    return SegMetrics(float(acc), float(prec), float((fg + bg) / 2), float(fg), float(bg))


def scratch_false_positive_rate(pred, scratch):
    """Fraction of scratch pixels labelled as second phase."""
    scratch = np.asarray(scratch, dtype=bool)
    n = np.count_nonzero(scratch)
    return 0.0 if n == 0 else np.count_nonzero(np.asarray(pred, dtype=bool) & scratch) / n


def threshold_segment(image, threshold=0.25):
    """Fixed intensity threshold baseline: dark pixels are second phase."""
    img = np.asarray(getattr(image, "values", image), dtype=np.float64)
    return img < threshold


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------


def _random_crops(rng, x_all, y_all, idx, crop):
    n, _, h, w = x_all.shape
    xs, ys = [], []
    for k in idx:
        r = int(rng.integers(0, h - crop + 1))
        c = int(rng.integers(0, w - crop + 1))
        xs.append(x_all[k, :, r:r + crop, c:c + crop])
        ys.append(y_all[k, :, r:r + crop, c:c + crop])
    return np.stack(xs), np.stack(ys)


def train_segmenter(images, masks, config=None, epochs=10, seed=0, store=None, log=None):
    """Adam + BCE on random crops; returns ``(store, per-epoch loss)``.

    Each epoch visits every image once in seed-shuffled batches, one random
    ``config.crop`` square per image.  Entry 0 of the curve is the loss of
    the initial weights on a fixed set of crops; entry ``e`` the mean batch
    loss of epoch ``e``.
    """
    cfg = config or UnetPPConfig()
    if len(images) == 0:
        raise ValueError("train_segmenter: empty dataset")
    if len(images) != len(masks):
        raise ValueError("train_segmenter: images and masks differ in count")
    store = store or init_unetpp(cfg, seed)
    x_all = np.stack([np.asarray(getattr(i, "values", i), dtype=np.float64) for i in images])[:, None]
    y_all = np.stack([np.asarray(m, dtype=np.float64) for m in masks])[:, None]
    crop = min(cfg.crop, x_all.shape[-2] // cfg.factor * cfg.factor, x_all.shape[-1] // cfg.factor * cfg.factor)
    if crop < cfg.factor:
        raise ValueError(f"images smaller than {cfg.factor} px cannot be segmented at depth {cfg.depth}")
    rng = make_rng(seed, 302)
    x0, y0 = _random_crops(make_rng(seed, 303), x_all, y_all, range(len(x_all)), crop)
    curve = [_eval_loss(store, x0, y0, cfg)]
    for epoch in range(epochs):
        total = 0.0
        order = rng.permutation(len(x_all))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb, yb = _random_crops(rng, x_all, y_all, idx, crop)
            loss = bce_loss(unetpp_forward(store, T.Tensor(xb), cfg, training=True), yb)
            store.zero_grad()
            T.backward(loss)
            adam_step(store, lr=cfg.lr)
            total += loss.item() * len(idx)
        curve.append(total / len(x_all))
        if log:
            log(f"phase epoch {epoch + 1}/{epochs} loss {curve[-1]:.4f}")
    return store, curve


def _eval_loss(store, x, y, cfg):
    total = 0.0
    with T.no_grad():
        for s in range(0, len(x), cfg.batch_size):
            p = unetpp_forward(store, T.Tensor(x[s:s + cfg.batch_size]), cfg)
            total += bce_loss(p, y[s:s + cfg.batch_size]).item() * len(x[s:s + cfg.batch_size])
    return total / len(x)


def predict_phase(image, store, config=None):
    """Foreground probabilities at input resolution (reflect-padded to fit)."""
    cfg = config or UnetPPConfig()
    img = np.asarray(getattr(image, "values", image), dtype=np.float64)
    h, w = img.shape
    f = cfg.factor
    ph, pw = (-h) % f, (-w) % f
    padded = np.pad(img, ((0, ph), (0, pw)), mode="reflect") if ph or pw else img
    with T.no_grad():
        p = unetpp_forward(store, T.Tensor(padded[None, None]), cfg)
    return p.data[0, 0, :h, :w]


def segment_phase(image, store, config=None, threshold=0.5):
    return predict_phase(image, store, config) >= threshold
