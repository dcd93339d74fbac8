"""Multi-resolution temporal convnet for multi-disease onset prediction, plus baselines.

Inputs are ``(N, R, W)`` arrays: R rows (labs, or labs stacked above their
observation masks) over a W-month backward window.  Every network ends in
per-disease two-class log-softmax heads, so outputs are ``(N, M, 2)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import ConfigurationError, DimensionError, InferenceError, ParseError, TrainingError
from .metrics import auc_or_none

log = logging.getLogger(__name__)

INPUT_MODES = ("raw", "imputed", "two_channel")


def segment_lengths(W: int, L: int, p: int) -> tuple[int, int, int]:
    """Per-row, per-filter output lengths of the three resolution levels."""
    return W // (p * p) - L + 1, W // p - L + 1, (W - L + 1) // p - L + 1


@dataclass
class PredictorConfig:
    n_labs: int
    n_diseases: int
    J: int = 8
    L: int = 3
    p: int = 3
    hidden: tuple[int, ...] = (100, 100)
    dropout: float = 0.5
    input_mode: str = "raw"
    window: int = 36
    head_bn: bool = True
    init_seed: int = 0
    sgd: dc.SgdConfig = field(default_factory=dc.SgdConfig)

    def __post_init__(self):
        if self.input_mode not in INPUT_MODES:
            raise ConfigurationError(f"unknown input mode {self.input_mode!r}")
        if min(self.n_labs, self.n_diseases, self.J, self.L, self.p) < 1:
            raise ConfigurationError("labs, diseases, J, L and p must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)
        if isinstance(self.sgd, dict):
            self.sgd = dc.SgdConfig(**self.sgd)

    @property
    def rows(self) -> int:
        return 2 * self.n_labs if self.input_mode == "two_channel" else self.n_labs

    @property
    def segments(self) -> tuple[int, int, int]:
        segs = segment_lengths(self.window, self.L, self.p)
        if min(segs) < 1:
            raise DimensionError(
                f"window {self.window} too short for filter length {self.L} and pool size {self.p}")
        return segs

    @property
    def feature_length(self) -> int:
        return self.rows * self.J * sum(self.segments)

    def echo(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def _he(rng, shape, fan_in):
    return rng.normal(scale=math.sqrt(2.0 / fan_in), size=shape)


class _Blocks:
    """Shared hidden blocks (dropout, dense, bn, relu) and per-disease heads."""

    def _init_blocks(self, n_in: int, cfg: PredictorConfig, rng):
        self.dense = []
        self.dense_bn = []
        for i, h in enumerate(cfg.hidden):
            self.dense.append((dc.Param(f"W{i + 1}", _he(rng, (n_in, h), n_in)), dc.Param(f"c{i + 1}", np.zeros(h))))
            self.dense_bn.append(dc.BatchNorm(h, f"bn_h{i + 1}"))
            n_in = h
        M = cfg.n_diseases
        self.head_w = dc.Param("head.W", rng.normal(scale=math.sqrt(1.0 / n_in), size=(M, n_in, 2)))
        self.head_b = dc.Param("head.b", np.zeros((M, 2)))
        self.head_bn = dc.BatchNorm(2 * M, "bn_head") if cfg.head_bn else None

    def _block_params(self):
        out = []
        for (w, b), bn in zip(self.dense, self.dense_bn):
            out += [w, b] + bn.params
        out += [self.head_w, self.head_b]
        if self.head_bn is not None:
            out += self.head_bn.params
        return out

    def _block_norms(self):
        return list(self.dense_bn) + ([self.head_bn] if self.head_bn is not None else [])

    def _blocks_forward(self, h, train, rng):
        p = self.cfg.dropout
        cache = []
        for (w, b), bn in zip(self.dense, self.dense_bn):
            hd, mask = dc.dropout(h, p, train, rng)
            z = bn.forward(dc.dense(hd, w.value, b.value))
            cache.append((hd, mask, z))
            h = dc.relu(z)
        hd, mask = dc.dropout(h, p, train, rng)
        logits = np.einsum("nh,mhk->nmk", hd, self.head_w.value) + self.head_b.value[None]
        N, M = logits.shape[:2]
        if self.head_bn is not None:
            logits = self.head_bn.forward(logits.reshape(N, 2 * M)).reshape(N, M, 2)
        out = dc.log_softmax2(logits)
        self._bcache = (cache, hd, mask, out)
        return out

    def _blocks_backward(self, g_out):
        cache, hd, mask, out = self._bcache
        g = dc.log_softmax2_backward(g_out, out)
        N, M = g.shape[:2]
        if self.head_bn is not None:
            g = self.head_bn.backward(g.reshape(N, 2 * M)).reshape(N, M, 2)
        self.head_w.accumulate(np.einsum("nh,nmk->mhk", hd, g))
        self.head_b.accumulate(g.sum(axis=0))
        g = dc.dropout_backward(np.einsum("nmk,mhk->nh", g, self.head_w.value), mask)
        for ((w, b), bn), (h_in, m_in, z) in zip(reversed(list(zip(self.dense, self.dense_bn))), reversed(cache)):
            g = bn.backward(dc.relu_backward(g, z))
            dx, dw, db = dc.dense_backward(g, h_in, w.value)
            w.accumulate(dw)
            b.accumulate(db)
            g = dc.dropout_backward(dx, m_in)
        return g


class Network(_Blocks):
    kind = "network"

    def __init__(self, cfg: PredictorConfig):
        self.cfg = cfg

    def params(self) -> list[dc.Param]:
        raise NotImplementedError

    def norms(self) -> list[dc.BatchNorm]:
        raise NotImplementedError

    def set_train(self, train: bool) -> None:
        for bn in self.norms():
            bn.train = train

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        want = (self.cfg.rows, self.cfg.window)
        if x.ndim != 3 or x.shape[1:] != want:
            raise DimensionError(f"input stage: expected (N, {want[0]}, {want[1]}), got {x.shape}")
        return x

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        """``(N, R, W)`` -> ``(N, M, 2)`` log-probabilities."""
        raise NotImplementedError

    def backward(self, g_out) -> None:
        raise NotImplementedError


class ConvNet(Network):
    """Three pooled views of each row, convolved with filters shared across rows."""

    kind = "convnet"

    def __init__(self, cfg: PredictorConfig):
        super().__init__(cfg)
        rng = np.random.default_rng(cfg.init_seed)
        J, L = cfg.J, cfg.L
        self.conv = {}
        for name, c_in in (("1", 1), ("2", 1), ("3", 1), ("5", J)):
            self.conv[name] = (dc.Param(f"K{name}", _he(rng, (J, c_in, L), c_in * L)),
                               dc.Param(f"b{name}", np.zeros(J)),
                               dc.BatchNorm(J, f"bn{name}"))
        _ = cfg.segments  # validates the window
        self._init_blocks(cfg.feature_length, cfg, rng)

    def params(self):
        out = []
        for k, b, bn in self.conv.values():
            out += [k, b] + bn.params
        return out + self._block_params()

    def norms(self):
        return [bn for _, _, bn in self.conv.values()] + self._block_norms()

    def _conv_bn_relu(self, name, x):
        k, b, bn = self.conv[name]
        z = bn.forward(dc.conv1d_channels(x, k.value, b.value))
        return dc.relu(z), (x, z)

    def _conv_bn_relu_backward(self, name, g, cache):
        k, b, bn = self.conv[name]
        x, z = cache
        g = bn.backward(dc.relu_backward(g, z))
        dx, dk, db = dc.conv1d_channels_backward(g, x, k.value)
        k.accumulate(dk)
        b.accumulate(db)
        return dx

    def features(self, x) -> np.ndarray:
        """Concatenated convolution features ``(N, R * J * S)`` (used by the shape law)."""
        x = self._check_input(x)
        N, R, W = x.shape
        p = self.cfg.p
        xr = x.reshape(N * R, 1, W)
        a1, i1 = dc.maxpool(xr, p * p)
        c1, k1 = self._conv_bn_relu("1", a1)
        a2, i2 = dc.maxpool(xr, p)
        c2, k2 = self._conv_bn_relu("2", a2)
        c3, k3 = self._conv_bn_relu("3", xr)
        c4, i4 = dc.maxpool(c3, p)
        c5, k5 = self._conv_bn_relu("5", c4)
        feats = np.concatenate([c1, c2, c5], axis=2)  # N*R, J, S
        self._fcache = (x.shape, (i1, k1), (i2, k2), (k3, c3.shape[2], i4), k5, (c1.shape[2], c2.shape[2]))
        return feats.reshape(N, R * self.cfg.J * feats.shape[2])

    def features_backward(self, g) -> np.ndarray:
        shape, (i1, k1), (i2, k2), (k3, len3, i4), k5, (l1, l2) = self._fcache
        N, R, W = shape
        J = self.cfg.J
        g = g.reshape(N * R, J, -1)
        g1, g2, g5 = g[:, :, :l1], g[:, :, l1:l1 + l2], g[:, :, l1 + l2:]
        dx = dc.maxpool_backward(self._conv_bn_relu_backward("1", g1, k1), i1, W)
        dx += dc.maxpool_backward(self._conv_bn_relu_backward("2", g2, k2), i2, W)
        g4 = self._conv_bn_relu_backward("5", g5, k5)
        g3 = dc.maxpool_backward(g4, i4, len3)
        dx += self._conv_bn_relu_backward("3", g3, k3)
        return dx.reshape(N, R, W)

    def forward(self, x, train=False, rng=None):
        self.set_train(train)
        return self._blocks_forward(self.features(x), train, rng)

    def backward(self, g_out):
        return self.features_backward(self._blocks_backward(g_out))


class Mlp(Network):
    """Flattened window through the same hidden blocks and heads."""

    kind = "mlp"

    def __init__(self, cfg: PredictorConfig):
        super().__init__(cfg)
        rng = np.random.default_rng(cfg.init_seed)
        self._init_blocks(cfg.rows * cfg.window, cfg, rng)

    def params(self):
        return self._block_params()

    def norms(self):
        return self._block_norms()

    def forward(self, x, train=False, rng=None):
        self.set_train(train)
        x = self._check_input(x)
        self._shape = x.shape
        return self._blocks_forward(x.reshape(x.shape[0], -1), train, rng)

    def backward(self, g_out):
        return self._blocks_backward(g_out).reshape(self._shape)


NETWORKS = {"convnet": ConvNet, "mlp": Mlp}


def build_network(kind: str, cfg: PredictorConfig) -> Network:
    try:
        return NETWORKS[kind](cfg)
    except KeyError:
        raise ConfigurationError(f"unknown network {kind!r}") from None


# ---------------------------------------------------------------- inputs


def build_inputs(values, mask, mode: str, imputed=None) -> np.ndarray:
    """Model input for one of the three modes.

    ``raw`` uses the observed values with zeros elsewhere; ``imputed`` uses the
    dense imputed grid; ``two_channel`` stacks the imputed rows above the mask rows.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mode == "raw":
        return values * mask
    if imputed is None:
        raise ConfigurationError(f"input mode {mode!r} needs an imputed grid")
    imputed = np.asarray(imputed, dtype=np.float64)
    if mode == "imputed":
        return imputed
    if mode == "two_channel":
        return np.concatenate([imputed, mask], axis=1)
    raise ConfigurationError(f"unknown input mode {mode!r}")


# ---------------------------------------------------------------- training


def pos_weights(labels, eligible) -> np.ndarray:
    """Per-disease eligible negatives over positives; NaN where a disease has no positives."""
    labels = np.asarray(labels).astype(bool)
    eligible = np.asarray(eligible).astype(bool)
    pos = (labels & eligible).sum(axis=0)
    neg = (~labels & eligible).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(pos > 0, neg / np.maximum(pos, 1), np.nan)


def multitask_loss(log_probs, labels, eligible, pw, active) -> tuple[float, np.ndarray]:
    """Sum over active diseases of the weighted NLL on eligible samples, and its gradient."""
    grad = np.zeros_like(log_probs)
    total = 0.0
    for m in np.flatnonzero(active):
        rows = np.flatnonzero(eligible[:, m])
        if rows.size == 0:
            continue
        lp = log_probs[rows, m]
        y = labels[rows, m]
        total += dc.weighted_nll(lp, y, pw[m])
        grad[rows, m] = dc.weighted_nll_backward(lp, y, pw[m])
    return total, grad


@dataclass
class PredictorLog:
    train_loss: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    best_epoch: int = -1
    skipped: list[int] = field(default_factory=list)


def predict_log_proba(net: Network, x, batch: int = 1024) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = [net.forward(x[i:i + batch], train=False) for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros((0, net.cfg.n_diseases, 2))


def predict_proba(net: Network, x, batch: int = 1024) -> np.ndarray:
    """Positive-class probability per sample and disease, ``(N, M)``."""
    for p in net.params():
        if not np.all(np.isfinite(p.value)):
            raise InferenceError(f"parameter {p.name} is not finite")
    probs = np.exp(predict_log_proba(net, x, batch)[:, :, 1])
    if not np.all(np.isfinite(probs)):
        raise InferenceError("non-finite probabilities")
    return probs


def mean_auc(scores, labels, eligible, diseases=None) -> tuple[float, list[float | None]]:
    """Per-disease AUC over eligible samples, and their mean over defined ones."""
    M = scores.shape[1]
    per = []
    for m in range(M):
        if diseases is not None and m not in diseases:
            per.append(None)
            continue
        e = np.asarray(eligible[:, m]).astype(bool)
        per.append(auc_or_none(scores[e, m], labels[e, m]))
    defined = [a for a in per if a is not None]
    return (float(np.mean(defined)) if defined else math.nan), per


def _snapshot(net: Network):
    return ([p.value.copy() for p in net.params()],
            [(bn.running_mean.copy(), bn.running_var.copy()) for bn in net.norms()])


def _restore(net: Network, snap) -> None:
    values, stats = snap
    for p, v in zip(net.params(), values):
        p.value = v.copy()
    for bn, (m, v) in zip(net.norms(), stats):
        bn.running_mean, bn.running_var = m.copy(), v.copy()


def train(net: Network, x_train, labels, eligible, x_val, val_labels, val_eligible) -> PredictorLog:
    """Minibatch SGD on the summed per-disease weighted NLL; keeps the best-validation-AUC epoch.

    Diseases without training positives are skipped and listed in the log.
    Samples eligible for no trained disease are dropped before batching.
    """
    sgd = net.cfg.sgd
    labels = np.asarray(labels).astype(np.int64)
    eligible = np.asarray(eligible).astype(bool)
    pw = pos_weights(labels, eligible)
    active = np.isfinite(pw) & (pw > 0)
    trace = PredictorLog(skipped=[int(m) for m in np.flatnonzero(~active)])
    if not active.any():
        raise TrainingError("no disease has eligible positives in the training split")
    if trace.skipped:
        log.warning("skipping diseases without training positives: %s", trace.skipped)
    keep = np.flatnonzero(eligible[:, active].any(axis=1))
    x_train = np.asarray(x_train, dtype=np.float64)[keep]
    labels, eligible = labels[keep], eligible[keep]

    rng = np.random.default_rng(sgd.seed)
    drop_rng = np.random.default_rng([sgd.seed, 1])
    params = net.params()
    best, best_auc = _snapshot(net), -math.inf
    for epoch in range(sgd.epochs):
        perm = rng.permutation(len(x_train))
        total, batches = 0.0, 0
        for b in range(0, len(perm), sgd.batch_size):
            idx = np.sort(perm[b:b + sgd.batch_size])
            if idx.size < 2:  # batch-norm statistics need two samples
                continue
            out = net.forward(x_train[idx], train=True, rng=drop_rng)
            loss, g = multitask_loss(out, labels[idx], eligible[idx], pw, active)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            for p in params:
                p.zero_grad()
            net.backward(g)
            dc.sgd_step(params, epoch, sgd)
            total += loss
            batches += 1
        scores = predict_proba(net, x_val)
        val, _ = mean_auc(scores, val_labels, val_eligible, set(np.flatnonzero(active).tolist()))
        trace.train_loss.append(total / max(batches, 1))
        trace.val_auc.append(val)
        log.info("%s epoch %d loss %.5f val auc %.4f", net.kind, epoch, trace.train_loss[-1], val)
        if val > best_auc or (math.isnan(best_auc) and not math.isnan(val)):
            best_auc, best = val, _snapshot(net)
            trace.best_epoch = epoch
    if trace.best_epoch >= 0:
        _restore(net, best)
    net.set_train(False)
    return trace


# ---------------------------------------------------------------- logistic regression on window maxima


def window_max_features(x, mask=None) -> np.ndarray:
    """Per-row maximum over the window; with a mask, over observed cells only (0 when none)."""
    x = np.asarray(x, dtype=np.float64)
    if mask is None:
        return x.max(axis=2)
    mask = np.asarray(mask).astype(bool)
    out = np.where(mask, x, -np.inf).max(axis=2)
    return np.where(mask.any(axis=2), out, 0.0)


@dataclass
class LogitMax:
    weights: np.ndarray  # (M, F), on standardized features
    bias: np.ndarray  # (M,)
    center: np.ndarray | None = None  # (F,) training mean; None means no standardization
    scale: np.ndarray | None = None

    def standardize(self, features) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64)
        if self.center is None:
            return f
        return (f - self.center) / self.scale

    def scores(self, features) -> np.ndarray:
        return dc.sigmoid(self.standardize(features) @ self.weights.T + self.bias)


def logit_max_baseline(features, labels, eligible, val_features, val_labels, val_eligible,
                       sgd: dc.SgdConfig | None = None) -> tuple[LogitMax, PredictorLog]:
    """Independent per-disease logistic regressions on window maxima.

    Trained by minibatch SGD on the same eligibility-masked, positive-weighted
    log loss as the networks; the epoch with the best validation mean AUC is kept.
    Features are standardized with training-split statistics first.
    """
    sgd = sgd or dc.SgdConfig(learning_rate=0.1)
    raw = np.asarray(features, dtype=np.float64)
    std = raw.std(axis=0)
    center, scale = raw.mean(axis=0), np.where(std > 0, std, 1.0)
    X = (raw - center) / scale
    labels = np.asarray(labels).astype(np.float64)
    eligible = np.asarray(eligible).astype(bool)
    pw = pos_weights(labels, eligible)
    active = np.isfinite(pw) & (pw > 0)
    M, F = labels.shape[1], X.shape[1]
    model = LogitMax(np.zeros((M, F)), np.zeros(M), center, scale)
    trace = PredictorLog(skipped=[int(m) for m in np.flatnonzero(~active)])
    if not active.any():
        raise TrainingError("no disease has eligible positives in the training split")
    rng = np.random.default_rng(sgd.seed)
    best, best_auc = (model.weights.copy(), model.bias.copy()), -math.inf
    sample_w = np.where(labels == 1, np.nan_to_num(pw)[None, :], 1.0) * eligible * active[None, :]
    for epoch in range(sgd.epochs):
        lr = sgd.rate_at(epoch)
        perm = rng.permutation(len(X))
        total = 0.0
        for b in range(0, len(perm), sgd.batch_size):
            idx = np.sort(perm[b:b + sgd.batch_size])
            p = dc.sigmoid(X[idx] @ model.weights.T + model.bias)
            w = sample_w[idx]
            n = np.maximum(eligible[idx].sum(axis=0), 1)
            y = labels[idx]
            total += float(np.sum(-w * (y * np.log(np.maximum(p, 1e-300)) + (1 - y) * np.log(np.maximum(1 - p, 1e-300))) / n))
            g = w * (p - y) / n  # (B, M)
            model.weights -= lr * (g.T @ X[idx])
            model.bias -= lr * g.sum(axis=0)
        val, _ = mean_auc(model.scores(val_features), val_labels, val_eligible, set(np.flatnonzero(active).tolist()))
        trace.train_loss.append(total)
        trace.val_auc.append(val)
        if val > best_auc:
            best_auc, best = val, (model.weights.copy(), model.bias.copy())
            trace.best_epoch = epoch
    model.weights, model.bias = best
    return model, trace


# ---------------------------------------------------------------- persistence


def _fmt(a: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(a).reshape(-1))


def save_network(net: Network, path: str | Path) -> None:
    """Manifest line then one ``name shape...`` header and one value line per array."""
    cfg = net.cfg.echo()
    sgd = cfg.pop("sgd")
    fields = [f"kind={net.kind}"] + [f"{k}={_echo(v)}" for k, v in cfg.items()] + \
             [f"sgd.{k}={_echo(v)}" for k, v in sgd.items()]
    lines = ["manifest " + " ".join(fields)]
    for p in net.params():
        lines += [" ".join([p.name, *map(str, p.shape)]), _fmt(p.value)]
    for i, bn in enumerate(net.norms()):
        for key, arr in bn.state_arrays().items():
            lines += [f"norm{i}.{key} {arr.size}", _fmt(arr)]
    Path(path).write_text("\n".join(lines) + "\n")


def _echo(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_manifest(line: str):
    if not line.startswith("manifest "):
        raise ParseError("line 1: missing manifest")
    fields = dict(item.split("=", 1) for item in line.split()[1:])
    kind = fields.pop("kind")
    sgd = {k[4:]: fields.pop(k) for k in list(fields) if k.startswith("sgd.")}
    ints = {"n_labs", "n_diseases", "J", "L", "p", "window", "init_seed"}
    cfg = {}
    for k, v in fields.items():
        if k in ints:
            cfg[k] = int(v)
        elif k == "hidden":
            cfg[k] = tuple(int(x) for x in v.split(",") if x)
        elif k == "dropout":
            cfg[k] = float(v)
        elif k == "head_bn":
            cfg[k] = v == "True"
        else:
            cfg[k] = v
    cfg["sgd"] = dc.SgdConfig(learning_rate=float(sgd["learning_rate"]), decay_per_epoch=float(sgd["decay_per_epoch"]),
                              batch_size=int(sgd["batch_size"]), epochs=int(sgd["epochs"]), seed=int(sgd["seed"]))
    return kind, PredictorConfig(**cfg)


def load_network(path: str | Path) -> Network:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty model file")
    kind, cfg = _parse_manifest(lines[0])
    net = build_network(kind, cfg)
    blocks = {}
    for i in range(1, len(lines) - 1, 2):
        head = lines[i].split()
        try:
            blocks[head[0]] = ([int(s) for s in head[1:]], np.array([float(v) for v in lines[i + 1].split()]))
        except ValueError as exc:
            raise ParseError(f"line {i + 1}: {exc}") from None
    for p in net.params():
        if p.name not in blocks:
            raise ParseError(f"missing parameter block {p.name}")
        shape, vals = blocks[p.name]
        if tuple(shape) != p.shape:
            raise ParseError(f"parameter {p.name}: shape {shape} does not match {list(p.shape)}")
        p.value = vals.reshape(p.shape)
    for i, bn in enumerate(net.norms()):
        for key in ("running_mean", "running_var"):
            name = f"norm{i}.{key}"
            if name not in blocks:
                raise ParseError(f"missing block {name}")
            setattr(bn, key, blocks[name][1].copy())
    net.set_train(False)
    return net


def parameter_count(net: Network) -> int:
    return sum(p.size for p in net.params())
