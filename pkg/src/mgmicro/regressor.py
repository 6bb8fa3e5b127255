"""Transformer-encoder regression of Vickers hardness from four features.

Each standardized feature becomes one token (value times a learned
direction plus a learned per-feature bias), a stack of post-norm encoder
blocks mixes the tokens, and a linear layer on the mean-pooled tokens gives
the prediction.  ``token_mode="single_token"`` instead maps the whole
feature vector to one token.
"""
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .features import FEATURE_NAMES
from .params import ParamStore, adam_step, make_rng

TOKEN_MODES = ("feature_tokens", "single_token")


@dataclass
class RegressorConfig:
    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 4
    token_mode: str = "feature_tokens"
    lr: float = 1e-3
    epochs: int = 500
    seed: int = 0
    ffn_mult: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1 or self.n_layers < 0:
            raise ValueError("d_model and n_heads must be >= 1, n_layers >= 0")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.token_mode not in TOKEN_MODES:
            raise ValueError(f"token_mode must be one of {TOKEN_MODES}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _dense(store, rng, name, n_out, n_in, gain=1.0):
    store.add(name + ".w", rng.standard_normal((n_out, n_in)) * gain / np.sqrt(n_in))
    store.add(name + ".b", np.zeros(n_out))


def init_regressor(config=None, seed=0, fold=0, n_features=4):
    cfg = config or RegressorConfig()
    rng = make_rng(seed, 401, fold)
    d = cfg.d_model
    store = ParamStore()
    if cfg.token_mode == "feature_tokens":
        # small value directions on unit-scale biases: the post-norm token then
        # moves near-linearly with the feature instead of saturating to its sign
        store.add("embed.dir", rng.standard_normal((n_features, d)) * 0.1)
        store.add("embed.bias", rng.standard_normal((n_features, d)))
    else:
        _dense(store, rng, "embed", d, n_features)
    for layer in range(cfg.n_layers):
        p = f"l{layer}"
        for nm in ("q", "k", "v", "o"):
            _dense(store, rng, f"{p}.attn.{nm}", d, d)
        store.add(f"{p}.ln1.g", np.ones(d))
        store.add(f"{p}.ln1.b", np.zeros(d))
        _dense(store, rng, f"{p}.ffn1", cfg.ffn_mult * d, d, gain=np.sqrt(2.0))
        _dense(store, rng, f"{p}.ffn2", d, cfg.ffn_mult * d)
        store.add(f"{p}.ln2.g", np.ones(d))
        store.add(f"{p}.ln2.b", np.zeros(d))
    _dense(store, rng, "dec", 1, d, gain=0.1)
    return store


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def embed(store, x, cfg):
    """(N, F) standardized features -> (N, tokens, d_model)."""
    x = T.as_tensor(x)
    if cfg.token_mode == "feature_tokens":
        n, f = x.shape
        tok = T.reshape(x, (n, f, 1)) * store["embed.dir"]
        return tok + store["embed.bias"]
    y = T.linear(x, store["embed.w"], store["embed.b"])
    return T.reshape(y, (x.shape[0], 1, cfg.d_model))


def _split_heads(x, n_heads):
    n, t, d = x.shape
    return T.transpose(T.reshape(x, (n, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x):
    n, h, t, m = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (n, t, h * m))


def multi_head_attention(store, prefix, x, n_heads, eps=1e-5):
    """Per-head scaled dot-product attention, output projection, residual, norm."""
    d = x.shape[-1]
    if d % n_heads:
        raise ValueError(f"d_model {d} not divisible by n_heads {n_heads}")
    q, k, v = (_split_heads(T.linear(x, store[f"{prefix}.attn.{nm}.w"], store[f"{prefix}.attn.{nm}.b"]), n_heads)
               for nm in ("q", "k", "v"))
    heads = _merge_heads(T.attention(q, k, v))
    out = T.linear(heads, store[f"{prefix}.attn.o.w"], store[f"{prefix}.attn.o.b"])
    return T.layer_norm(x + out, store[f"{prefix}.ln1.g"], store[f"{prefix}.ln1.b"], eps)


def feed_forward(store, prefix, x, eps=1e-5):
    h = T.relu(T.linear(x, store[f"{prefix}.ffn1.w"], store[f"{prefix}.ffn1.b"]))
    out = T.linear(h, store[f"{prefix}.ffn2.w"], store[f"{prefix}.ffn2.b"])
    return T.layer_norm(x + out, store[f"{prefix}.ln2.g"], store[f"{prefix}.ln2.b"], eps)


def transformer_encoder(store, x, cfg):
    for layer in range(cfg.n_layers):
        x = multi_head_attention(store, f"l{layer}", x, cfg.n_heads, cfg.ln_eps)
        x = feed_forward(store, f"l{layer}", x, cfg.ln_eps)
    return x


def decode(store, h):
    """Mean-pool the tokens, then one linear unit: (N, T, d) -> (N,)."""
    pooled = T.mean(h, axis=1)
    y = T.linear(pooled, store["dec.w"], store["dec.b"])
    return T.reshape(y, (y.shape[0],))


def regressor_forward(store, x, cfg):
    return decode(store, transformer_encoder(store, embed(store, x, cfg), cfg))


# ---------------------------------------------------------------------------
# loss and metrics
# ---------------------------------------------------------------------------


def mse_loss(pred, target):
    """Mean squared error; returns a Tensor (differentiable in ``pred``)."""
    pred = T.as_tensor(pred if isinstance(pred, T.Tensor) else np.asarray(pred, dtype=np.float64))
    y = np.asarray(target, dtype=np.float64)
    if pred.shape != y.shape:
        raise ValueError(f"mse_loss: length mismatch {pred.shape} vs {y.shape}")
    if y.size == 0:
        raise ValueError("mse_loss: empty input")
    return T.mean(T.square(pred - T.Tensor(y)))


@dataclass
class Metrics:
    mae: float
    mse: float
    rmse: float
    r2: float

    def to_dict(self):
        return asdict(self)


def regression_metrics(y, y_hat):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"regression_metrics: length mismatch {y.shape} vs {y_hat.shape}")
    if y.size < 2:
        raise ValueError("regression_metrics needs at least two samples")
    err = y - y_hat
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("r2 undefined: target is constant")
    mse = float(np.mean(err ** 2))
    return Metrics(float(np.mean(np.abs(err))), mse, float(np.sqrt(mse)),
                   1.0 - float(np.sum(err ** 2)) / ss_tot)


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------


@dataclass
class StandardizerStats:
    mean: list
    std: list
    y_mean: float = 0.0
    y_std: float = 1.0

    @classmethod
    def fit(cls, rows):
        x = np.array([r.vector() for r in rows])
        std = x.std(axis=0)
        bad = [FEATURE_NAMES[i] for i in np.flatnonzero(std <= 0)]
        if bad:
            raise ValueError(f"cannot standardize constant feature column(s): {', '.join(bad)}")
        y = np.array([r.hv for r in rows if r.hv is not None], dtype=np.float64)
        y_mean = float(y.mean()) if y.size else 0.0
        y_std = float(y.std()) if y.size and y.std() > 0 else 1.0
        return cls(x.mean(axis=0).tolist(), std.tolist(), y_mean, y_std)

    def transform(self, rows):
        x = np.array([r.vector() for r in rows])
        return (x - np.asarray(self.mean)) / np.asarray(self.std)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainedRegressor:
    store: ParamStore
    stats: StandardizerStats
    config: RegressorConfig
    curve: list = field(default_factory=list)


def _labeled(rows):
    missing = [r.id or str(i) for i, r in enumerate(rows) if r.hv is None]
    if missing:
        raise ValueError(f"rows without hv label: {', '.join(missing[:5])}")
    return np.array([r.hv for r in rows], dtype=np.float64)


def train_regressor(rows, config=None, fold=0, log=None):
    """Full-batch Adam on MSE in standardized target units.

    ``curve[e]`` is the training loss before update ``e + 1``; the last entry
    is the loss after the final update.
    """
    cfg = config or RegressorConfig()
    if len(rows) < 2:
        raise ValueError("train_regressor needs at least two labeled rows")
    y = _labeled(rows)
    stats = StandardizerStats.fit(rows)
    x = T.Tensor(stats.transform(rows))
    yz = (y - stats.y_mean) / stats.y_std
    store = init_regressor(cfg, cfg.seed, fold)
    curve = []
    for epoch in range(cfg.epochs):
        loss = mse_loss(regressor_forward(store, x, cfg), yz)
        curve.append(loss.item())
        store.zero_grad()
        T.backward(loss)
        adam_step(store, lr=cfg.lr)
        if log and (epoch + 1) % 500 == 0:
            log(f"hv epoch {epoch + 1}/{cfg.epochs} loss {curve[-1]:.5f}")
    with T.no_grad():
        curve.append(mse_loss(regressor_forward(store, x, cfg), yz).item())
    return TrainedRegressor(store, stats, cfg, curve)


def predict_matrix(x, model):
    """HV for an (n, 4) array of raw feature values."""
    if model.stats is None:
        raise ValueError("predict: standardizer stats are not fitted")
    st = model.stats
    z = (np.atleast_2d(np.asarray(x, dtype=np.float64)) - np.asarray(st.mean)) / np.asarray(st.std)
    with T.no_grad():
        y = regressor_forward(model.store, T.Tensor(z), model.config).data
    return y * st.y_std + st.y_mean


def predict(rows, model):
    """Hardness predictions in HV for one row or a list of rows."""
    single = not isinstance(rows, (list, tuple))
    batch = [rows] if single else list(rows)
    out = predict_matrix(np.array([r.vector() for r in batch]), model)
    return float(out[0]) if single else out.tolist()


# ---------------------------------------------------------------------------
# leave-one-out
# ---------------------------------------------------------------------------


@dataclass
class LoocvResult:
    ids: list
    actual: list
    predicted: list
    metrics: Metrics
    curves: list = field(default_factory=list)

    @property
    def abs_errors(self):
        return [abs(a - p) for a, p in zip(self.actual, self.predicted)]


def _fold(args):
    rows, k, cfg = args
    train = rows[:k] + rows[k + 1:]
    model = train_regressor(train, cfg, fold=k)
    return predict(rows[k], model), model.curve


def worker_count():
    try:
        return max(1, int(os.environ.get("MGF_THREADS", "1")))
    except ValueError:
        return 1


def loocv(rows, config=None, workers=None):
    """Hold each row out once; each fold trains from its own fold-indexed seed."""
    cfg = config or RegressorConfig()
    rows = list(rows)
    if len(rows) < 3:
        raise ValueError("loocv needs at least 3 labeled rows")
    y = _labeled(rows)
    jobs = [(rows, k, cfg) for k in range(len(rows))]
    n = workers or worker_count()
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as ex:
            out = list(ex.map(_fold, jobs))
    else:
        out = [_fold(j) for j in jobs]
    preds = [p for p, _ in out]
    return LoocvResult([r.id for r in rows], y.tolist(), preds,
                       regression_metrics(y, preds), [c for _, c in out])
