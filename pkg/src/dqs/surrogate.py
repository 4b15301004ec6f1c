"""Graph-transformer QFI predictor built on :mod:`dqs.autodiff`.

Per layer and head ``k`` (head width ``s/C``)::

    alpha_ij = softmax_j((W3 h_i) . (W4 h_j) / sqrt(s)),  j in N(i) = {j: A_ij = 1} + {i}
    m_i      = sum_j alpha_ij W2 h_j
    beta_i   = sigmoid(w5 . [W1 h_i, m_i, W1 h_i - m_i])
    hhat_i   = beta_i W1 h_i + (1 - beta_i) m_i

heads are concatenated and passed through ``W7 GELU(BN(W6 hhat + b6)) + b7``.
The graph latent is the elementwise max over nodes and the prediction is
``w . z + b`` in label units divided by ``N**2``.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .dataset import LabeledSetup
from .graph import SetupGraph, encode_setup, feature_dims

log = logging.getLogger(__name__)

MAGIC = b"DQS1"


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    latent: int = 64
    layers: int = 5
    heads: int = 4
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if self.latent % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide latent ({self.latent})")

    @property
    def head_dim(self) -> int:
        return self.latent // self.heads


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 200
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    label_scale: float | None = None
    val_fraction: float = 0.2
    decoupled_decay: bool = False
    schedule: str = "constant"
    augment_paths: bool = False

    def __post_init__(self):
        if min(self.lr, self.epochs, self.batch_size) <= 0 or self.weight_decay < 0:
            raise ValueError("training hyperparameters must be positive")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


class SurrogateModel:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray],
                 buffers: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.buffers = buffers

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "SurrogateModel":
        rng = np.random.default_rng(seed)
        s, d, C, dk = config.latent, config.feature_dim, config.heads, config.head_dim

        def uni(shape, fan_in):
            bound = 1 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        p: dict[str, np.ndarray] = {}
        b: dict[str, np.ndarray] = {}
        p["W0"], p["b0"] = uni((d, s), d), uni((s,), d)
        p["bn0.gamma"], p["bn0.beta"] = np.ones(s), np.zeros(s)
        b["bn0.mean"], b["bn0.var"] = np.zeros(s), np.ones(s)
        for l in range(config.layers):
            for name in ("W1", "W2", "W3", "W4"):
                p[f"L{l}.{name}"] = uni((C, s, dk), s)
            p[f"L{l}.w5"] = uni((C, 3 * dk), 3 * dk)
            p[f"L{l}.W6"], p[f"L{l}.b6"] = uni((s, s), s), uni((s,), s)
            p[f"L{l}.bn.gamma"], p[f"L{l}.bn.beta"] = np.ones(s), np.zeros(s)
            b[f"L{l}.bn.mean"], b[f"L{l}.bn.var"] = np.zeros(s), np.ones(s)
            p[f"L{l}.W7"], p[f"L{l}.b7"] = uni((s, s), s), uni((s,), s)
        p["w"], p["b"] = uni((s,), s), uni((), s)
        return cls(config, p, b)

    def copy(self) -> "SurrogateModel":
        return SurrogateModel(self.config, {k: v.copy() for k, v in self.params.items()},
                              {k: v.copy() for k, v in self.buffers.items()})

    # ------------------------------------------------------------ persistence

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SurrogateModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(MAGIC)
        cfg = json.dumps(asdict(self.config)).encode()
        out.write(struct.pack("<I", len(cfg)))
        out.write(cfg)
        arrays = [("p:" + k, v) for k, v in self.params.items()]
        arrays += [("b:" + k, v) for k, v in self.buffers.items()]
        out.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            nb = name.encode()
            out.write(struct.pack("<H", len(nb)))
            out.write(nb)
            out.write(struct.pack("<B", arr.ndim))
            out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SurrogateModel":
        if raw[:4] != MAGIC:
            raise ValueError("not a DQS1 model file")
        buf = io.BytesIO(raw[4:])
        (n,) = struct.unpack("<I", buf.read(4))
        config = ModelConfig(**json.loads(buf.read(n)))
        (count,) = struct.unpack("<I", buf.read(4))
        params, buffers = {}, {}
        for _ in range(count):
            (ln,) = struct.unpack("<H", buf.read(2))
            name = buf.read(ln).decode()
            (ndim,) = struct.unpack("<B", buf.read(1))
            shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf.read(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
            (params if name.startswith("p:") else buffers)[name[2:]] = arr
        return cls(config, params, buffers)


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    """Graphs stacked node-wise; neighbourhoods are an edge list sorted by receiver.

    Edge ``e`` carries a message from node ``src[e]`` to node ``dst[e]``,
    i.e. ``src[e]`` is in N(``dst[e]``).  Self-loops are included.
    """
    X: np.ndarray             # (T, d) node features of all graphs
    src: np.ndarray           # (E,)
    dst: np.ndarray           # (E,) non-decreasing
    edge_start: np.ndarray    # (T,) first edge of every receiver
    node_graph: np.ndarray    # (T,) graph index of every node
    graph_start: np.ndarray   # (G,) first node of every graph

    def __post_init__(self):
        T, E = self.X.shape[0], self.src.size
        # (T, E) incidence matrices: row i sums over edges received / sent by i
        self.to_dst = ad._scatter_matrix(self.dst, T)
        self.to_src = ad._scatter_matrix(self.src, T)

    @property
    def size(self) -> int:
        return self.graph_start.size


def collate(graphs: Sequence[SetupGraph]) -> Batch:
    if not graphs:
        raise ValueError("cannot collate an empty batch")
    d = graphs[0].X.shape[1]
    src, dst, offset = [], [], 0
    for g in graphs:
        if g.X.shape[1] != d:
            raise ValueError("graphs in a batch must share the feature dimension")
        nbr = (g.A > 0) | np.eye(g.n_nodes, dtype=bool)
        i, j = np.nonzero(nbr)          # row-major, so sorted by receiver i
        dst.append(i + offset)
        src.append(j + offset)
        offset += g.n_nodes
    dst, src = np.concatenate(dst), np.concatenate(src)
    sizes = np.array([g.n_nodes for g in graphs])
    return Batch(
        X=np.concatenate([g.X for g in graphs]).astype(float),
        src=src, dst=dst,
        edge_start=np.searchsorted(dst, np.arange(offset)),
        node_graph=np.repeat(np.arange(len(graphs)), sizes),
        graph_start=np.concatenate([[0], np.cumsum(sizes)[:-1]]),
    )


# ---------------------------------------------------------------- forward

def _attention(proj: ad.Tensor, w5: ad.Tensor, batch: Batch, scale: float) -> ad.Tensor:
    """Gated neighbourhood attention for all heads at once.

    ``proj`` is (T, 4, C, dk) holding W1 h, W2 h, W3 h, W4 h; the result is
    hhat of shape (T, C, dk).  Fused with a hand-written backward because
    the composed version is dominated by temporaries.
    """
    src, dst, starts = batch.src, batch.dst, batch.edge_start
    T, _, C, dk = proj.shape
    E = src.size

    def seg_sum(x):  # per-receiver sum over edges
        return np.asarray(batch.to_dst @ x.reshape(E, -1)).reshape((T,) + x.shape[1:])

    S, V, Q, K = (proj.data[:, i] for i in range(4))
    wa, wb, wc = (w5.data[:, k * dk:(k + 1) * dk] for k in range(3))
    qe, ke, ve = Q[dst], K[src], V[src]
    sc = np.einsum("ecd,ecd->ec", qe, ke) * scale
    sc -= np.maximum.reduceat(sc, starts, axis=0)[dst]
    ex = np.exp(sc)
    alpha = ex / seg_sum(ex)[dst]
    m = seg_sum(alpha[..., None] * ve)
    d = S - m
    # w5 . [S, m, S - m] regrouped as S.(wa + wc) + m.(wb - wc)
    logit = np.einsum("tcd,cd->tc", S, wa + wc) + np.einsum("tcd,cd->tc", m, wb - wc)
    beta = 0.5 * (1 + np.tanh(0.5 * logit))
    out = m + beta[..., None] * d

    def back(G):
        dlogit = np.einsum("tcd,tcd->tc", G, d) * beta * (1 - beta)
        dS = beta[..., None] * G + dlogit[..., None] * (wa + wc)
        dm = (1 - beta)[..., None] * G + dlogit[..., None] * (wb - wc)
        if w5.requires_grad:
            w5._accum(np.concatenate([np.einsum("tc,tcd->cd", dlogit, x) for x in (S, m, d)], axis=1))
        dme = dm[dst]
        dve = alpha[..., None] * dme
        dalpha = np.einsum("ecd,ecd->ec", dme, ve)
        dsc = alpha * (dalpha - seg_sum(alpha * dalpha)[dst]) * scale
        dQ = seg_sum(dsc[..., None] * ke)
        dVK = batch.to_src @ np.concatenate([dve, dsc[..., None] * qe], axis=1).reshape(E, -1)
        dVK = np.asarray(dVK).reshape(T, 2, C, dk)
        proj._accum(np.stack([dS, dVK[:, 0], dQ, dVK[:, 1]], axis=1))

    return ad.Tensor(out, _parents=(proj, w5), _backward=back)


def _forward(model: SurrogateModel, batch: Batch, training: bool, params: dict[str, ad.Tensor],
             taps: dict | None = None):
    cfg = model.config
    s, C, dk = cfg.latent, cfg.heads, cfg.head_dim
    T = batch.X.shape[0]
    P = params
    bn = lambda x, key: ad.batch_norm(
        x, P[f"{key}.gamma"], P[f"{key}.beta"], None, cfg.eps,
        (model.buffers[f"{key}.mean"], model.buffers[f"{key}.var"]), training, cfg.momentum)

    h = ad.gelu(bn(ad.matmul(ad.Tensor(batch.X), P["W0"]) + P["b0"], "bn0"))
    scale = 1.0 / math.sqrt(s)
    for l in range(cfg.layers):
        # all four per-head maps in one (s, 4s) matmul
        Wcat = ad.concat([ad.reshape(ad.transpose(P[f"L{l}.{w}"], (1, 0, 2)), (s, s))
                          for w in ("W1", "W2", "W3", "W4")], axis=-1)
        proj = ad.reshape(ad.matmul(h, Wcat), (T, 4, C, dk))
        hh = ad.reshape(_attention(proj, P[f"L{l}.w5"], batch, scale), (T, s))
        z = ad.gelu(bn(ad.matmul(hh, P[f"L{l}.W6"]) + P[f"L{l}.b6"], f"L{l}.bn"))
        h = ad.matmul(z, P[f"L{l}.W7"]) + P[f"L{l}.b7"]
    if taps is not None:
        taps["nodes"] = h.data
    latent = ad.segment_max(h, batch.graph_start, batch.node_graph)
    pred = ad.reshape(ad.matmul(latent, ad.reshape(P["w"], (s, 1))), (batch.size,)) + P["b"]
    return pred, latent


def forward_batch(model: SurrogateModel, batch: Batch, mode: str = "eval"):
    """Predictions (label units / N^2) and latents for a batch; no gradients."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if batch.X.shape[-1] != model.config.feature_dim:
        raise ValueError(f"feature dim {batch.X.shape[-1]} != model {model.config.feature_dim}")
    P = {k: ad.Tensor(v) for k, v in model.params.items()}
    pred, latent = _forward(model, batch, mode == "train", P)
    return pred.data.copy(), latent.data.copy()


def forward(model: SurrogateModel, graph: SetupGraph, mode: str = "eval") -> tuple[float, np.ndarray]:
    pred, latent = forward_batch(model, collate([graph]), mode)
    return float(pred[0]), latent[0]


def predict(model: SurrogateModel, graphs: Sequence[SetupGraph], batch_size: int = 256):
    """Eval-mode predictions and latents, chunked to bound memory."""
    preds, lats = [], []
    for i in range(0, len(graphs), batch_size):
        p, z = forward_batch(model, collate(graphs[i:i + batch_size]), "eval")
        preds.append(p)
        lats.append(z)
    if not preds:
        return np.zeros(0), np.zeros((0, model.config.latent))
    return np.concatenate(preds), np.concatenate(lats)


def loss_and_grads(model: SurrogateModel, batch: Batch, labels: np.ndarray,
                   mode: str = "train") -> tuple[float, dict[str, np.ndarray]]:
    """Batch MSE and its gradient for every parameter array."""
    labels = np.asarray(labels, dtype=float)
    if batch.size == 0 or labels.shape != (batch.size,):
        raise ValueError("need one label per graph in a non-empty batch")
    P = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in model.params.items()}
    pred, _ = _forward(model, batch, mode == "train", P)
    loss = ad.mean(ad.square(pred - labels))
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in P.items()}
    return float(loss.data), grads


# ---------------------------------------------------------------- metrics

def rankdata(x) -> np.ndarray:
    """1-based ranks with ties given their average rank."""
    a = np.asarray(x, dtype=float).ravel()
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(a.size)
    sa = a[order]
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and sa[j + 1] == sa[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1
        i = j + 1
    return ranks


def spearman(predictions, labels) -> float:
    x, y = rankdata(predictions), rankdata(labels)
    if x.size < 2 or x.size != y.size:
        raise ValueError("spearman needs two equal-length sequences of length >= 2")
    x, y = x - x.mean(), y - y.mean()
    den = math.sqrt(float(x @ x) * float(y @ y))
    return float(x @ y / den) if den > 0 else 0.0


# ---------------------------------------------------------------- training

@dataclass
class Adam:
    lr: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float
    decoupled: bool = False
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k in sorted(params):
            p, g = params[k], grads[k]
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p
            m = self.m.get(k, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            if self.weight_decay and self.decoupled:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EpochStats:
    epoch: int
    train_mse: float
    val_mse: float | None
    val_spearman: float | None


def graphs_and_labels(records: Sequence[LabeledSetup], q: int | None = None):
    graphs = [encode_setup(r.setup, q) for r in records]
    labels = np.array([r.qfi for r in records], dtype=float)
    return graphs, labels


def path_symmetries(n_photons: int) -> list[np.ndarray]:
    """Path relabelings that keep every source pair together.

    Sources sit on pairs (0,1), (2,3), ...; permuting pairs and swapping
    within a pair maps a setup to another one with the same label, since
    all devices and permutation-symmetric Hamiltonians are blind to names.
    """
    from itertools import permutations, product
    k = n_photons // 2
    out = []
    for order in permutations(range(k)):
        for flips in product((0, 1), repeat=k):
            out.append(np.array([2 * p + (j ^ f) for p, f in zip(order, flips) for j in (0, 1)]))
    return out


def _relabel(g: SetupGraph, perm: np.ndarray) -> SetupGraph:
    d2 = perm.size
    X = g.X.copy()
    X[:, X.shape[1] - d2 + perm] = g.X[:, X.shape[1] - d2:]
    return SetupGraph(X, g.A)


def train(model: SurrogateModel, records: Sequence[LabeledSetup], config: TrainConfig,
          val_records: Sequence[LabeledSetup] | None = None, progress=None):
    """Fit ``model`` in place with Adam on the MSE of scaled labels.

    Labels are divided by ``config.label_scale`` (default ``N**2``).  When
    ``val_records`` is None, a ``val_fraction`` split is carved out of the
    shuffled records.  Returns ``(model, history)``.
    """
    if not records:
        raise ValueError("empty training set")
    n_photons = records[0].setup.n_photons
    scale = config.label_scale or float(n_photons ** 2)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(records))
    if val_records is None and config.val_fraction > 0 and len(records) > 1:
        n_val = max(1, int(round(config.val_fraction * len(records))))
        val_records = [records[i] for i in order[:n_val]]
        records = [records[i] for i in order[n_val:]]
    graphs, labels = graphs_and_labels(records)
    labels = labels / scale
    if val_records:
        val_graphs, val_labels = graphs_and_labels(val_records)
    opt = Adam(config.lr, config.beta1, config.beta2, config.adam_eps, config.weight_decay,
               config.decoupled_decay)
    syms = path_symmetries(n_photons) if config.augment_paths else None
    history: list[EpochStats] = []
    for epoch in range(config.epochs):
        if config.schedule == "cosine":
            opt.lr = config.lr * 0.5 * (1 + np.cos(np.pi * epoch / config.epochs))
        perm = rng.permutation(len(graphs))
        total, seen = 0.0, 0
        for i in range(0, len(perm), config.batch_size):
            idx = perm[i:i + config.batch_size]
            chosen = [graphs[j] for j in idx]
            if syms:
                chosen = [_relabel(g, syms[t]) for g, t in zip(chosen, rng.integers(len(syms), size=len(idx)))]
            batch = collate(chosen)
            loss, grads = loss_and_grads(model, batch, labels[idx])
            opt.step(model.params, grads)
            total += loss * len(idx)
            seen += len(idx)
        stats = EpochStats(epoch, total / seen, None, None)
        if val_records:
            pred, _ = predict(model, val_graphs)
            stats.val_mse = float(np.mean((pred - val_labels / scale) ** 2))
            stats.val_spearman = spearman(pred, val_labels) if len(val_labels) > 1 else None
        history.append(stats)
        log.debug("epoch %d train %.5f val %s", epoch, stats.train_mse, stats.val_mse)
        if progress:
            progress(stats)
    return model, history


def evaluate(model: SurrogateModel, records: Sequence[LabeledSetup]) -> dict:
    graphs, labels = graphs_and_labels(records)
    scale = float(records[0].setup.n_photons ** 2)
    pred, _ = predict(model, graphs)
    return {
        "mse": float(np.mean((pred - labels / scale) ** 2)),
        "spearman": spearman(pred, labels) if len(labels) > 1 else None,
        "count": len(records),
    }


def new_model(n_photons: int, q: int, latent: int = 64, layers: int = 5, heads: int = 4,
              seed: int = 0) -> SurrogateModel:
    d1, d2 = feature_dims(n_photons, q)
    return SurrogateModel.init(ModelConfig(d1 + d2, latent, layers, heads), seed)


def _readout_argmax(model: SurrogateModel, batch: Batch) -> np.ndarray:
    """Train-mode row index chosen by the max readout, per graph and channel."""
    taps: dict = {}
    _forward(model.copy(), batch, True, {k: ad.Tensor(v) for k, v in model.params.items()}, taps)
    h = taps["nodes"]
    ends = np.append(batch.graph_start[1:], h.shape[0])
    return np.stack([np.argmax(h[a:b], axis=0) for a, b in zip(batch.graph_start, ends)])


def gradient_check(model: SurrogateModel, batch: Batch, labels: np.ndarray, per_group: int = 2,
                   step: float = 1e-4, seed: int = 0, floor: float = 1e-6,
                   max_redraws: int = 20) -> dict[str, float]:
    """Worst relative error between analytic and central-difference gradients per parameter array.

    The error is ``|fd - an| / max(|fd|, |an|, floor)``; the floor keeps
    entries whose true gradient is zero (biases ahead of batch norm) from
    dividing round-off by round-off.  An entry whose +-step interval moves
    the max-readout argmax sits across a kink where the central difference
    is not an estimate of the derivative, so another entry of the same
    array is drawn instead (up to ``max_redraws`` times).
    """
    m = model.copy()
    rng = np.random.default_rng(seed)
    _, grads = loss_and_grads(m, batch, labels)
    base = _readout_argmax(m, batch)
    worst: dict[str, float] = {}
    for name in sorted(m.params):
        v = m.params[name]
        err = 0.0
        for _ in range(per_group):
            for attempt in range(max_redraws + 1):
                i = tuple(int(rng.integers(n)) for n in v.shape)
                old = v[i]
                v[i] = old + step
                lp, _ = loss_and_grads(m, batch, labels)
                smooth = np.array_equal(_readout_argmax(m, batch), base)
                v[i] = old - step
                lm, _ = loss_and_grads(m, batch, labels)
                smooth = smooth and np.array_equal(_readout_argmax(m, batch), base)
                v[i] = old
                if smooth:
                    break
                log.debug("redrawing %s%s: readout argmax changes within the step", name, i)
            fd, an = (lp - lm) / (2 * step), float(grads[name][i])
            err = max(err, abs(fd - an) / max(abs(fd), abs(an), floor))
        worst[name] = err
    return worst
