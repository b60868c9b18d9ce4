"""Lite base classifiers, weighted cross-entropy and the mini-batch Adam training loop.

Every model maps a batch ``x [B, N, k, F]`` (plus hour/weekday indices
``[B, k]``) to class probabilities ``[B, N, 3]``.  Feature wiring follows the
ensemble design: ``birnn`` and ``tcn`` see one cell's history only,
``stgcn_lite`` adds the geographic adjacency, ``pdformer_lite`` adds the
adjacency and the semantic (DTW) neighbors.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .evaluation import confusion_matrix, prf
from .features import N_CLASSES, SampleSet, normalized_adjacency, semantic_neighbors

log = logging.getLogger(__name__)

KINDS = ("birnn", "tcn", "stgcn_lite", "pdformer_lite")
DEFAULT_CLASS_WEIGHTS = (0.7, 1.2, 1.1)
PROB_FLOOR = 1e-12


class ModelError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    kind: str = "birnn"
    hidden: int = 32
    layers: int = 1
    kernel: int = 3
    dilations: tuple = (1, 2)
    heads: int = 2
    kappa: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        self.dilations = tuple(self.dilations)
        if self.hidden < 1 or self.layers < 1 or self.kernel < 1:
            raise ModelError("sizes must be positive")
        if any(b <= a for a, b in zip(self.dilations, self.dilations[1:])) or not self.dilations:
            raise ModelError("dilations must be non-empty and strictly increasing")

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel - 1) * sum(self.dilations)


@dataclass
class TrainConfig:
    batch_size: int = 16          # target slots per batch; every retained cell rides along
    lr: float = 1e-3
    epochs: int = 100
    class_weights: tuple = DEFAULT_CLASS_WEIGHTS
    seed: int = 0
    patience: int = 10
    val_fraction: float = 0.1

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if self.batch_size < 1:
            raise ModelError("batch_size must be >= 1")
        if len(self.class_weights) != N_CLASSES or min(self.class_weights) <= 0:
            raise ModelError("class weights must be three positive numbers")


@dataclass
class SpatialContext:
    """Graph inputs shared by the spatial models."""
    adjacency: np.ndarray
    a_hat: np.ndarray
    geo_mask: np.ndarray        # adjacency plus self loops
    sem_mask: np.ndarray        # kappa nearest by DTW plus self loops

    @classmethod
    def build(cls, adjacency, semantic=None, kappa=0):
        a = np.asarray(adjacency)
        n = a.shape[0]
        eye = np.eye(n, dtype=bool)
        sem = semantic_neighbors(np.asarray(semantic), kappa) if semantic is not None else np.zeros((n, n), bool)
        return cls(a, normalized_adjacency(a), (a > 0) | eye, sem | eye)

    @classmethod
    def empty(cls, n):
        return cls.build(np.zeros((n, n), dtype=np.int64))


def context_for(cfg: ModelConfig, adjacency, semantic):
    """Enforce per-model feature wiring."""
    n = np.asarray(adjacency).shape[0]
    if cfg.kind in ("birnn", "tcn"):
        return None
    if cfg.kind == "stgcn_lite":
        return SpatialContext.build(adjacency)
    if cfg.kappa >= n:
        raise ModelError(f"kappa={cfg.kappa} must be smaller than the cell count {n}")
    return SpatialContext.build(adjacency, semantic, cfg.kappa)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

def init_params(cfg: ModelConfig, n_features: int, seed_or_rng=0) -> dict:
    rng = np.random.default_rng(seed_or_rng) if not isinstance(seed_or_rng, np.random.Generator) else seed_or_rng
    d = cfg.hidden
    p = {
        "in_w": T.glorot(rng, (n_features, d)),
        "in_b": np.zeros(d),
        "hour_emb": T.glorot(rng, (24, d)),
        "day_emb": T.glorot(rng, (7, d)),
    }
    if cfg.kind == "birnn":
        for side in ("fw", "bw"):
            p[f"{side}_wx"] = T.glorot(rng, (d, 4 * d))
            p[f"{side}_wh"] = T.glorot(rng, (d, 4 * d))
            b = np.zeros(4 * d)
            b[d:2 * d] = 1.0  # forget-gate bias
            p[f"{side}_b"] = b
        p["out_w"] = T.glorot(rng, (2 * d, N_CLASSES))
    elif cfg.kind == "tcn":
        for i, _ in enumerate(cfg.dilations):
            p[f"tcn{i}_w"] = T.glorot(rng, (cfg.kernel, d, d), cfg.kernel * d, d)
            p[f"tcn{i}_b"] = np.zeros(d)
        p["out_w"] = T.glorot(rng, (d, N_CLASSES))
    elif cfg.kind == "stgcn_lite":
        for blk in range(cfg.layers):
            p[f"st{blk}_t1_w"] = T.glorot(rng, (cfg.kernel, d, d), cfg.kernel * d, d)
            p[f"st{blk}_t1_b"] = np.zeros(d)
            p[f"st{blk}_g_w"] = T.glorot(rng, (d, d))
            p[f"st{blk}_g_b"] = np.zeros(d)
            p[f"st{blk}_t2_w"] = T.glorot(rng, (cfg.kernel, d, d), cfg.kernel * d, d)
            p[f"st{blk}_t2_b"] = np.zeros(d)
        p["out_w"] = T.glorot(rng, (d, N_CLASSES))
    else:
        for name in ("pd_q", "pd_k", "pd_v", "pd_o"):
            p[name] = T.glorot(rng, (d, d))
        p["pd_ln_g"] = np.ones(d)
        p["pd_ln_b"] = np.zeros(d)
        dh = max(1, d // cfg.heads)
        for head in ("geo", "sem"):
            for name in ("q", "k", "v"):
                p[f"{head}_{name}"] = T.glorot(rng, (d, dh))
        p["mix_w"] = T.glorot(rng, (d + 2 * dh, d))
        p["mix_b"] = np.zeros(d)
        p["out_w"] = T.glorot(rng, (d, N_CLASSES))
    p["out_b"] = np.zeros(N_CLASSES)
    return p


# --------------------------------------------------------------------------
# forward passes
# --------------------------------------------------------------------------

def _embed(p, batch, dropout=0.0, rng=None):
    """[B, N, k, d]: projected inputs plus hour-of-day and day-of-week embeddings."""
    x = T.linear(T.as_tensor(batch["x"]), p["in_w"], p["in_b"])
    B, k = batch["hours"].shape
    d = p["in_w"].shape[1]
    time_emb = T.add(T.embedding(p["hour_emb"], batch["hours"]), T.embedding(p["day_emb"], batch["weekdays"]))
    x = T.add(x, T.reshape(time_emb, (B, 1, k, d)))
    if dropout > 0 and rng is not None:
        keep = (rng.random(x.shape) >= dropout) / (1.0 - dropout)
        x = T.mul(x, T.Tensor(keep))
    return x


def _head(p, h):
    return T.softmax(T.linear(h, p["out_w"], p["out_b"]), axis=-1)


def _lstm(p, side, seq, reverse=False):
    """seq: [M, k, d] -> final hidden state [M, d]."""
    return T.lstm(T.linear(seq, p[f"{side}_wx"], p[f"{side}_b"]), p[f"{side}_wh"], reverse)


def birnn_forward(cfg, p, batch, ctx=None, rng=None):
    x = _embed(p, batch, cfg.dropout, rng)
    B, N, k, d = x.shape
    seq = T.reshape(x, (B * N, k, d))
    h = T.concat([_lstm(p, "fw", seq), _lstm(p, "bw", seq, reverse=True)], axis=-1)
    return T.reshape(_head(p, h), (B, N, N_CLASSES))


def _tcn_stack(cfg, p, seq):
    for i, dil in enumerate(cfg.dilations):
        y = T.add(T.causal_conv1d(seq, p[f"tcn{i}_w"], dil), p[f"tcn{i}_b"])
        seq = T.add(seq, T.relu(y))
    return seq


def tcn_representation(cfg, p, batch):
    """Per-step TCN features [B*N, k, d] (exposed for causality checks)."""
    k = batch["hours"].shape[1]
    if k < cfg.receptive_field:
        raise ModelError(f"window k={k} is shorter than the TCN receptive field; need k >= {cfg.receptive_field}")
    x = _embed(p, batch)
    B, N, k, d = x.shape
    return _tcn_stack(cfg, p, T.reshape(x, (B * N, k, d)))


def tcn_forward(cfg, p, batch, ctx=None, rng=None):
    k = batch["hours"].shape[1]
    if k < cfg.receptive_field:
        raise ModelError(f"window k={k} is shorter than the TCN receptive field; need k >= {cfg.receptive_field}")
    x = _embed(p, batch, cfg.dropout, rng)
    B, N, k, d = x.shape
    seq = _tcn_stack(cfg, p, T.reshape(x, (B * N, k, d)))
    return T.reshape(_head(p, seq[:, -1, :]), (B, N, N_CLASSES))


def stgcn_lite_forward(cfg, p, batch, ctx, rng=None, temporal_only=False):
    """Temporal conv -> graph conv with the normalized adjacency -> temporal conv, per block.

    ``temporal_only`` skips the neighbor mixing (graph conv becomes a per-cell
    linear map); with an all-zero adjacency the two paths coincide.
    """
    x = _embed(p, batch, cfg.dropout, rng)
    B, N, k, d = x.shape
    if not temporal_only and ctx.a_hat.shape != (N, N):
        raise ModelError(f"adjacency is {ctx.a_hat.shape}, batch has {N} cells")
    a_hat = T.Tensor(ctx.a_hat) if not temporal_only else None
    seq = T.reshape(x, (B * N, k, d))
    for blk in range(cfg.layers):
        seq = T.add(seq, T.relu(T.add(T.causal_conv1d(seq, p[f"st{blk}_t1_w"]), p[f"st{blk}_t1_b"])))
        g = T.linear(seq, p[f"st{blk}_g_w"])
        if a_hat is not None:
            g = T.reshape(T.matmul(a_hat, T.reshape(g, (B, N, k * d))), (B * N, k, d))
        seq = T.add(seq, T.relu(T.add(g, p[f"st{blk}_g_b"])))
        seq = T.add(seq, T.relu(T.add(T.causal_conv1d(seq, p[f"st{blk}_t2_w"]), p[f"st{blk}_t2_b"])))
    return T.reshape(_head(p, seq[:, -1, :]), (B, N, N_CLASSES))


def pdformer_lite_forward(cfg, p, batch, ctx, rng=None, temporal_only=False, return_attention=False):
    """Temporal self-attention per cell, then two masked spatial heads:
    geographic (adjacency neighbors) and semantic (kappa nearest by DTW).

    Both masks include the cell itself.  ``temporal_only`` replaces each head
    by its value projection of the cell's own state.
    """
    x = _embed(p, batch, cfg.dropout, rng)
    B, N, k, d = x.shape
    seq = T.reshape(x, (B * N, k, d))
    att, _ = T.attention(T.linear(seq, p["pd_q"]), T.linear(seq, p["pd_k"]), T.linear(seq, p["pd_v"]))
    seq = T.layer_norm(T.add(seq, T.linear(att, p["pd_o"])), p["pd_ln_g"], p["pd_ln_b"])
    z = T.reshape(seq[:, -1, :], (B, N, d))

    weights = {}
    heads = []
    for head, mask in (("geo", None if temporal_only else ctx.geo_mask),
                       ("sem", None if temporal_only else ctx.sem_mask)):
        if temporal_only:
            heads.append(T.linear(z, p[f"{head}_v"]))
            continue
        if mask.shape != (N, N):
            raise ModelError(f"spatial mask is {mask.shape}, batch has {N} cells")
        out, w = T.attention(T.linear(z, p[f"{head}_q"]), T.linear(z, p[f"{head}_k"]),
                             T.linear(z, p[f"{head}_v"]), mask=mask)
        heads.append(out)
        weights[head] = w.value
    mixed = T.relu(T.linear(T.concat([z] + heads, axis=-1), p["mix_w"], p["mix_b"]))
    probs = _head(p, mixed)
    return (probs, weights) if return_attention else probs


FORWARD = {
    "birnn": birnn_forward,
    "tcn": tcn_forward,
    "stgcn_lite": stgcn_lite_forward,
    "pdformer_lite": pdformer_lite_forward,
}


def forward(cfg: ModelConfig, params, batch, ctx=None, rng=None):
    tensors = {k: v if isinstance(v, T.Tensor) else T.Tensor(v) for k, v in params.items()}
    return FORWARD[cfg.kind](cfg, tensors, batch, ctx, rng)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

@dataclass
class LossStats:
    clamped: int = 0


def weighted_cross_entropy(probs, targets, weights=DEFAULT_CLASS_WEIGHTS, stats: LossStats | None = None):
    """Mean over samples of ``-w[y] * log(p[y])``; ``p[y]`` is clamped at 1e-12."""
    probs = T.as_tensor(probs)
    targets = np.asarray(targets, dtype=np.int64)
    flat = T.reshape(probs, (-1, N_CLASSES))
    y = targets.reshape(-1)
    picked = flat[np.arange(y.size), y]
    n_clamped = int(np.count_nonzero(picked.value < PROB_FLOOR))
    if n_clamped:
        log.warning("clamped %d target probabilities at %g", n_clamped, PROB_FLOOR)
        if stats is not None:
            stats.clamped += n_clamped
    w = np.asarray(weights, dtype=np.float64)[y]
    nll = T.mul(T.log(picked, floor=PROB_FLOOR), T.Tensor(-w))
    return T.mean(nll)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def predict_proba(cfg: ModelConfig, params, samples: SampleSet, ctx=None, batch_size=64) -> np.ndarray:
    """Probabilities [n_targets, N, 3] in ``samples.targets`` order."""
    out = []
    for lo in range(0, len(samples.targets), batch_size):
        b = samples.batch(samples.targets[lo:lo + batch_size])
        out.append(forward(cfg, params, b, ctx).value)
    return np.concatenate(out, axis=0) if out else np.zeros((0, samples.n_cells, N_CLASSES))


def _evaluate(cfg, params, samples, ctx, weights):
    probs = predict_proba(cfg, params, samples, ctx)
    y = samples.labels[:, samples.targets].T
    loss = float(weighted_cross_entropy(probs, y, weights).value)
    pred = np.argmax(probs, axis=-1)
    return loss, prf(confusion_matrix(pred.ravel(), y.ravel())).macro_f1


@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)
    best_epoch: int = 0
    steps: int = 0


def train_model(mcfg: ModelConfig, tcfg: TrainConfig, train: SampleSet, val: SampleSet | None = None,
                ctx: SpatialContext | None = None) -> TrainResult:
    """Mini-batch Adam on the weighted loss; keeps the epoch with the best validation macro F1.

    Deterministic for a fixed ``tcfg.seed``.
    """
    if len(train.targets) == 0:
        raise TrainingError("empty training set")
    rng = np.random.default_rng(tcfg.seed)
    params = init_params(mcfg, train.n_features, rng)
    state = T.AdamState(lr=tcfg.lr)
    history = []
    best = (-np.inf, np.inf)
    best_params, best_epoch, stale = params, 0, 0
    stats = LossStats()

    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(train.targets)
        losses = []
        for lo in range(0, len(order), tcfg.batch_size):
            batch = train.batch(order[lo:lo + tcfg.batch_size])
            leaves = {k: T.leaf(v) for k, v in params.items()}
            probs = FORWARD[mcfg.kind](mcfg, leaves, batch, ctx, rng)
            loss = weighted_cross_entropy(probs, batch["y"], tcfg.class_weights, stats)
            lv = float(loss.value)
            if not np.isfinite(lv):
                raise TrainingError(
                    f"{mcfg.kind}: loss became {lv} at epoch {epoch}, step {state.step}; "
                    f"recent losses {losses[-5:]}")
            T.backprop(loss)
            grads = {k: t.grad for k, t in leaves.items() if t.grad is not None}
            params, state = T.adam_step(params, grads, state)
            losses.append(lv)

        train_loss = float(np.mean(losses))
        if val is not None and len(val.targets):
            val_loss, val_f1 = _evaluate(mcfg, params, val, ctx, tcfg.class_weights)
        else:
            val_loss, val_f1 = train_loss, 0.0
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_macro_f1": val_f1})
        if (val_f1, -val_loss) > (best[0], -best[1]):
            best, best_params, best_epoch, stale = (val_f1, val_loss), params, epoch, 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                break
    if stats.clamped:
        log.warning("%s: %d probabilities clamped during training", mcfg.kind, stats.clamped)
    return TrainResult(best_params, history, best_epoch, state.step)


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
