"""The pair similarity network on top of :mod:`gcgsim.autodiff`.

A batch of pairs is processed as one disjoint union of graphs: graph
``2b`` is side *i* of pair ``b`` and graph ``2b + 1`` is side *j*. Every
per-node and per-graph operation is a gather or segment sum over that
union, so a batch costs the same number of tape nodes as a single pair.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph


@dataclass
class ModelConfig:
    channels: list[int] = field(default_factory=lambda: [64, 64, 32, 16])
    ntn_k: int = 16
    beta: float = 0.05
    lam: float = 0.05
    label_vocab_size: int = 1
    seed: int = 0
    head_hidden: int = 32
    alpha_map: str = "clamp"
    iir_flip: bool = False
    use_gncm: bool = True
    use_psgd: bool = True

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ValueError(f"channels must be positive, got {self.channels}")
        if self.ntn_k <= 0 or self.label_vocab_size <= 0 or self.head_hidden <= 0:
            raise ValueError("ntn_k, label_vocab_size and head_hidden must be positive")
        if not (0.0 <= self.beta <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("beta and lambda must lie in [0, 1]")
        if self.alpha_map not in ("clamp", "affine"):
            raise ValueError(f"alpha_map must be 'clamp' or 'affine', got {self.alpha_map!r}")

    @property
    def layers(self) -> int:
        return len(self.channels)

    def to_json(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# parameters


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _mlp_params(params: dict, rng, prefix: str, dims: Sequence[int]) -> None:
    for t, (i, o) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"{prefix}.W{t}"] = _glorot(rng, (i, o), i, o)
        params[f"{prefix}.b{t}"] = _zeros((o,))


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed)
    p: dict[str, Tensor] = {}
    c0 = cfg.channels[0]
    p["input.W"] = _glorot(rng, (cfg.label_vocab_size, c0), cfg.label_vocab_size, c0)
    c_in = c0
    K = cfg.ntn_k
    for l, c in enumerate(cfg.channels, start=1):
        pre = f"rggc{l}"
        p[f"{pre}.W_S"] = _glorot(rng, (c_in, c), c_in, c)
        p[f"{pre}.W_N"] = _glorot(rng, (c_in, c), c_in, c)
        p[f"{pre}.W_A"] = _glorot(rng, (c_in, c), c_in, c)
        p[f"{pre}.W_B"] = _glorot(rng, (c_in, c), c_in, c)
        p[f"{pre}.b_gate"] = _zeros((c,))
        p[f"{pre}.b"] = _zeros((c,))
        if c_in != c:
            p[f"{pre}.W_R"] = _glorot(rng, (c_in, c), c_in, c)
        _mlp_params(p, rng, f"ds{l}", [c, c, c])
        _mlp_params(p, rng, f"enc_as{l}", [c, c, c])
        _mlp_params(p, rng, f"enc_us{l}", [c, c, c])
        for kind in ("ntn_as", "ntn_us"):
            p[f"{kind}{l}.W"] = _glorot(rng, (K, c, c), c * c, K)
            p[f"{kind}{l}.V"] = _glorot(rng, (2 * c, K), 2 * c, K)
            p[f"{kind}{l}.b"] = _zeros((K,))
        c_in = c
    LK = cfg.layers * K
    _mlp_params(p, rng, "ec_as", [LK, cfg.head_hidden, 1])
    _mlp_params(p, rng, "ec_us", [LK, cfg.head_hidden, 1])
    _mlp_params(p, rng, "sim", [2 * LK, cfg.head_hidden, 1])
    return p


def param_group(name: str) -> str:
    """Coarse module group of a parameter name (for gradient-flow checks)."""
    head = name.split(".")[0].rstrip("0123456789")
    return {
        "input": "rggc", "rggc": "rggc", "ds": "deepsets", "enc_as": "encoders",
        "enc_us": "encoders", "ntn_as": "ntn", "ntn_us": "ntn", "ec_as": "heads",
        "ec_us": "heads", "sim": "heads",
    }[head]


def save_model(path, cfg: ModelConfig, params: dict[str, Tensor], vocabulary: Sequence[str] | None = None) -> None:
    obj = {"config": cfg.to_json(), "parameters": ad.params_to_json(params)}
    if vocabulary is not None:
        obj["vocabulary"] = list(vocabulary)
    with open(path, "w") as fh:
        json.dump(obj, fh)


def load_model(path) -> tuple[ModelConfig, dict[str, Tensor]]:
    cfg, params, _ = load_model_file(path)
    return cfg, params


def load_model_file(path) -> tuple[ModelConfig, dict[str, Tensor], list[str] | None]:
    """Config, parameters and (when stored) the label names in id order."""
    with open(path) as fh:
        obj = json.load(fh)
    return ModelConfig(**obj["config"]), ad.params_from_json(obj["parameters"]), obj.get("vocabulary")


# ----------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Disjoint union of the 2B graphs of B pairs."""

    n_pairs: int
    onehot: np.ndarray
    node_graph: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    offsets: list[int]

    @property
    def n_graphs(self) -> int:
        return 2 * self.n_pairs

    @property
    def n_nodes(self) -> int:
        return self.onehot.shape[0]


def make_batch(pairs: Sequence[tuple[Graph, Graph]], vocab_size: int) -> Batch:
    graphs = [g for pair in pairs for g in pair]
    offsets, node_graph, src, dst, labels = [], [], [], [], []
    base = 0
    for gi, g in enumerate(graphs):
        offsets.append(base)
        for lab in g.labels:
            if not 0 <= lab < vocab_size:
                raise ValueError(f"label id {lab} of graph {g.id!r} outside vocabulary of size {vocab_size}")
        labels.extend(g.labels)
        node_graph.extend([gi] * g.n)
        for u, v in g.sorted_edges():
            src += [base + u, base + v]
            dst += [base + v, base + u]
        base += g.n
    onehot = np.zeros((base, vocab_size))
    onehot[np.arange(base), labels] = 1.0
    return Batch(len(pairs), onehot, np.array(node_graph, dtype=np.int64),
                 np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64), offsets)


# ----------------------------------------------------------------------------
# building blocks


def mlp(x: Tensor, p: dict, prefix: str, n_layers: int = 2) -> Tensor:
    for t in range(n_layers):
        x = ad.add(ad.matmul(x, p[f"{prefix}.W{t}"]), p[f"{prefix}.b{t}"])
        if t < n_layers - 1:
            x = ad.relu(x)
    return x


def rggc_layer(h: Tensor, batch: Batch, p: dict, l: int) -> Tensor:
    """Residual gated graph convolution.

    ``h'[k] = res(h[k]) + ReLU(W_S h[k] + sum_u eta_ku * W_N h[u] + b)`` with
    ``eta_ku = sigmoid(W_A h[k] + W_B h[u] + b_gate)``.
    """
    pre = f"rggc{l}"
    self_term = ad.matmul(h, p[f"{pre}.W_S"])
    if batch.src.size:
        hn = ad.gather_rows(ad.matmul(h, p[f"{pre}.W_N"]), batch.src)
        gate_k = ad.gather_rows(ad.matmul(h, p[f"{pre}.W_A"]), batch.dst)
        gate_u = ad.gather_rows(ad.matmul(h, p[f"{pre}.W_B"]), batch.src)
        eta = ad.sigmoid(ad.add(ad.add(gate_k, gate_u), p[f"{pre}.b_gate"]))
        agg = ad.segment_sum(ad.mul(eta, hn), batch.dst, batch.n_nodes)
        self_term = ad.add(self_term, agg)
    upd = ad.relu(ad.add(self_term, p[f"{pre}.b"]))
    res = ad.matmul(h, p[f"{pre}.W_R"]) if f"{pre}.W_R" in p else h
    return ad.add(res, upd)


def encode_nodes(batch: Batch, p: dict, cfg: ModelConfig) -> list[Tensor]:
    """Node embeddings H^0..H^L for every node of the batch."""
    hs = [ad.matmul(Tensor(batch.onehot), p["input.W"])]
    for l in range(1, cfg.layers + 1):
        hs.append(rggc_layer(hs[-1], batch, p, l))
    return hs


def readout(h: Tensor, batch: Batch, p: dict, l: int) -> Tensor:
    """DeepSets pooling: MLP of the per-graph sum of node embeddings."""
    return mlp(ad.segment_sum(h, batch.node_graph, batch.n_graphs), p, f"ds{l}")


def partner_index(n_graphs: int) -> np.ndarray:
    return np.arange(n_graphs) ^ 1


def gncm(h: Tensor, hg: Tensor, batch: Batch) -> tuple[Tensor, Tensor]:
    """Cross matching: weight each node by cosine to the partner graph's embedding.

    Returns ``(omega, h_tilde)`` with omega an (n_nodes, 1) column.
    """
    partner = partner_index(batch.n_graphs)[batch.node_graph]
    omega = ad.row_cosine(h, ad.gather_rows(hg, partner))
    h_tilde = ad.segment_sum(ad.scale_rows(h, omega), batch.node_graph, batch.n_graphs)
    return omega, h_tilde


def psgd_alpha(hg: Tensor, cfg: ModelConfig, n_pairs: int) -> Tensor:
    """Per-pair prior alpha in [0, 1] from the cosine of the two graph embeddings."""
    cos = ad.row_cosine(ad.gather_rows(hg, np.arange(0, 2 * n_pairs, 2)),
                        ad.gather_rows(hg, np.arange(1, 2 * n_pairs, 2)))
    if cfg.alpha_map == "affine":
        return ad.scalar_mul(ad.add(cos, 1.0), 0.5)
    return ad.clip(cos, 0.0, 1.0)


def psgd_disentangle(h_tilde: Tensor, alpha_graph: Tensor | None, p: dict, l: int) -> tuple[Tensor, Tensor]:
    """Aligned/unaligned split scaled by alpha and 1 - alpha (no scaling when alpha is None)."""
    h_as = mlp(h_tilde, p, f"enc_as{l}")
    h_us = mlp(h_tilde, p, f"enc_us{l}")
    if alpha_graph is None:
        return h_as, h_us
    return ad.scale_rows(h_as, alpha_graph), ad.scale_rows(h_us, ad.sub(1.0, alpha_graph))


def iir_draw(rng: np.random.Generator, n_pairs: int, beta: float, flip: bool = False) -> np.ndarray:
    """One Bernoulli(beta) replacement event per pair; ``flip`` keeps with probability beta instead."""
    fired = rng.random(n_pairs) < beta
    return ~fired if flip else fired


def iir_replicate(h_as_i: Tensor, h_as_j: Tensor, fired: np.ndarray | None) -> Tensor:
    """``tau * h_i + (1 - tau) * h_j`` with ``tau = 0`` exactly on rows where replacement fired."""
    if fired is None or not fired.any():
        return h_as_i
    tau = Tensor((~fired).astype(np.float64).reshape(-1, 1))
    return ad.add(ad.scale_rows(h_as_i, tau), ad.scale_rows(h_as_j, Tensor(1.0 - tau.data)))


def ntn(h1: Tensor, h2: Tensor, p: dict, prefix: str) -> Tensor:
    """Neural tensor network: ``ReLU(h1^T W[m] h2 + V[m].(h1 || h2) + b[m])`` per row."""
    bil = ad.bilinear(h1, p[f"{prefix}.W"], h2)
    lin = ad.matmul(ad.concat_last_dim([h1, h2]), p[f"{prefix}.V"])
    return ad.relu(ad.add(ad.add(bil, lin), p[f"{prefix}.b"]))


def fuse(parts: Sequence[Tensor]) -> Tensor:
    return ad.concat_last_dim(list(parts))


# ----------------------------------------------------------------------------
# full pipeline


@dataclass
class LayerActs:
    h_v: Tensor
    h_g: Tensor
    omega: Tensor | None
    h_tilde: Tensor
    alpha: Tensor | None
    h_as_i: Tensor
    h_as_j: Tensor
    h_us_i: Tensor
    h_us_j: Tensor
    h_as_i_hat: Tensor
    i_as: Tensor
    i_us: Tensor


@dataclass
class PairActivations:
    batch: Batch
    layers: list[LayerActs]
    i_as: Tensor
    i_us: Tensor
    ec_as: Tensor
    ec_us: Tensor
    s_hat: Tensor
    iir_fired: np.ndarray | None = None

    @property
    def n_pairs(self) -> int:
        return self.batch.n_pairs

    def similarity(self) -> np.ndarray:
        return self.s_hat.data.reshape(-1).copy()


def heads(i_as: Tensor, i_us: Tensor, p: dict) -> tuple[Tensor, Tensor, Tensor]:
    ec_as = mlp(i_as, p, "ec_as")
    ec_us = mlp(i_us, p, "ec_us")
    s_hat = ad.sigmoid(mlp(ad.concat_last_dim([i_as, i_us]), p, "sim"))
    return ec_as, ec_us, s_hat


def interact(as_i: Sequence[Tensor], as_j: Sequence[Tensor], us_i: Sequence[Tensor],
             us_j: Sequence[Tensor], p: dict):
    """Layer-wise NTN interaction, fusion and prediction heads."""
    i_as_l = [ntn(a, b, p, f"ntn_as{l}") for l, (a, b) in enumerate(zip(as_i, as_j), start=1)]
    i_us_l = [ntn(a, b, p, f"ntn_us{l}") for l, (a, b) in enumerate(zip(us_i, us_j), start=1)]
    i_as, i_us = fuse(i_as_l), fuse(i_us_l)
    return i_as_l, i_us_l, i_as, i_us, heads(i_as, i_us, p)


def forward(batch: Batch, p: dict, cfg: ModelConfig, rng: np.random.Generator | None = None,
            training: bool = False) -> PairActivations:
    B = batch.n_pairs
    side_i = np.arange(0, 2 * B, 2)
    side_j = side_i + 1
    fired = None
    if training and rng is not None:
        fired = iir_draw(rng, B, cfg.beta, cfg.iir_flip)
    pair_of_graph = np.arange(2 * B) // 2

    hs = encode_nodes(batch, p, cfg)
    per_layer = []
    for l in range(1, cfg.layers + 1):
        h = hs[l]
        hg = readout(h, batch, p, l)
        if cfg.use_gncm:
            omega, h_tilde = gncm(h, hg, batch)
        else:
            omega, h_tilde = None, hg
        alpha = psgd_alpha(hg, cfg, B) if cfg.use_psgd else None
        alpha_graph = ad.gather_rows(alpha, pair_of_graph) if alpha is not None else None
        h_as, h_us = psgd_disentangle(h_tilde, alpha_graph, p, l)
        h_as_i, h_as_j = ad.gather_rows(h_as, side_i), ad.gather_rows(h_as, side_j)
        h_us_i, h_us_j = ad.gather_rows(h_us, side_i), ad.gather_rows(h_us, side_j)
        h_as_i_hat = iir_replicate(h_as_i, h_as_j, fired)
        per_layer.append([h, hg, omega, h_tilde, alpha, h_as_i, h_as_j, h_us_i, h_us_j, h_as_i_hat])

    i_as_l, i_us_l, i_as, i_us, (ec_as, ec_us, s_hat) = interact(
        [t[9] for t in per_layer], [t[6] for t in per_layer],
        [t[7] for t in per_layer], [t[8] for t in per_layer], p)
    layers = [LayerActs(*t, i_as=a, i_us=u) for t, a, u in zip(per_layer, i_as_l, i_us_l)]
    return PairActivations(batch, layers, i_as, i_us, ec_as, ec_us, s_hat, fired)


def loss(acts: PairActivations, ged: Sequence[float], sim: Sequence[float], lam: float) -> Tensor:
    """Mean over the batch of ``(s - s_hat)^2 + lam * (ec_as^2 + (ged - ec_us)^2)``."""
    B = acts.n_pairs
    s = Tensor(np.asarray(sim, dtype=np.float64).reshape(B, 1))
    g = Tensor(np.asarray(ged, dtype=np.float64).reshape(B, 1))
    d_s = ad.sub(s, acts.s_hat)
    total = ad.mul(d_s, d_s)
    if lam:
        d_us = ad.sub(g, acts.ec_us)
        cost = ad.add(ad.mul(acts.ec_as, acts.ec_as), ad.mul(d_us, d_us))
        total = ad.add(total, ad.scalar_mul(cost, lam))
    return ad.mean_all(total)


def predict(pairs: Sequence[tuple[Graph, Graph]], p: dict, cfg: ModelConfig, batch_size: int = 256) -> np.ndarray:
    """Inference similarities for a list of pairs (no tape kept)."""
    out = []
    frozen = {k: Tensor(v.data) for k, v in p.items()}
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        acts = forward(make_batch(chunk, cfg.label_vocab_size), frozen, cfg, training=False)
        out.append(acts.similarity())
    return np.concatenate(out) if out else np.zeros(0)


def run_pairs(pairs: Sequence[tuple[Graph, Graph]], p: dict, cfg: ModelConfig) -> PairActivations:
    frozen = {k: Tensor(v.data) for k, v in p.items()}
    return forward(make_batch(pairs, cfg.label_vocab_size), frozen, cfg, training=False)


SWAP_MODES = ("iis", "eisa", "eisu")


def swap_inference(acts_a: PairActivations, acts_b: PairActivations | None, mode: str,
                   p: dict) -> tuple[np.ndarray, np.ndarray | None]:
    """Recompute similarities after exchanging disentangled embeddings.

    ``iis`` swaps the two aligned embeddings inside each pair of ``acts_a``;
    ``eisa``/``eisu`` exchange aligned/unaligned embeddings between pair
    ``b`` of ``acts_a`` and pair ``b`` of ``acts_b``.
    """
    mode = mode.lower()
    A = acts_a.layers
    if mode == "iis":
        *_, (_, _, s) = interact([t.h_as_j for t in A], [t.h_as_i for t in A],
                                 [t.h_us_i for t in A], [t.h_us_j for t in A], p)
        return s.data.reshape(-1).copy(), None
    if mode not in SWAP_MODES:
        raise ValueError(f"unknown swap mode {mode!r}")
    if acts_b is None or acts_b.n_pairs != acts_a.n_pairs:
        raise ValueError("extra-instance swaps need a second activation set with the same number of pairs")
    Bl = acts_b.layers
    if mode == "eisa":
        *_, (_, _, sa) = interact([t.h_as_i for t in Bl], [t.h_as_j for t in Bl],
                                  [t.h_us_i for t in A], [t.h_us_j for t in A], p)
        *_, (_, _, sb) = interact([t.h_as_i for t in A], [t.h_as_j for t in A],
                                  [t.h_us_i for t in Bl], [t.h_us_j for t in Bl], p)
    else:
        *_, (_, _, sa) = interact([t.h_as_i for t in A], [t.h_as_j for t in A],
                                  [t.h_us_i for t in Bl], [t.h_us_j for t in Bl], p)
        *_, (_, _, sb) = interact([t.h_as_i for t in Bl], [t.h_as_j for t in Bl],
                                  [t.h_us_i for t in A], [t.h_us_j for t in A], p)
    return sa.data.reshape(-1).copy(), sb.data.reshape(-1).copy()


def gncm_rows(acts: PairActivations, pair_index: int = 0) -> list[tuple[int, str, int, float]]:
    """(layer, graph side, node index, omega) rows for one pair of a batch."""
    batch = acts.batch
    rows = []
    for l, lay in enumerate(acts.layers, start=1):
        if lay.omega is None:
            continue
        w = lay.omega.data.reshape(-1)
        for side, gi in (("i", 2 * pair_index), ("j", 2 * pair_index + 1)):
            nodes = np.nonzero(batch.node_graph == gi)[0]
            for k, node in enumerate(nodes):
                rows.append((l, side, k, float(w[node])))
    return rows
