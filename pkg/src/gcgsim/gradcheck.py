"""Central finite-difference checks for the autodiff primitives and the full model."""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import Tensor
from .graph import Graph

STEP = 1e-5
TOLERANCE = 1e-4
# gradients below this norm are compared absolutely. Central differences
# through the full model carry ~3e-10 of roundoff at STEP, which would
# otherwise dominate the ratio for gradients of size 1e-8
NORM_FLOOR = 1e-5


@dataclass
class CheckResult:
    case: str
    tensor: str
    rel_error: float

    @property
    def ok(self) -> bool:
        return self.rel_error <= TOLERANCE


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), NORM_FLOOR)
    return float(diff / scale)


def numeric_grad(f: Callable[[], float], t: Tensor, coords, h: float = STEP) -> np.ndarray:
    flat = t.data.reshape(-1)
    out = np.empty(len(coords))
    for n, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        fp = f()
        flat[c] = orig - h
        fm = f()
        flat[c] = orig
        out[n] = (fp - fm) / (2 * h)
    return out


def check_function(case: str, build: Callable[[], Tensor], leaves: dict[str, Tensor],
                   rng: np.random.Generator, max_coords: int | None = None,
                   h: float = STEP) -> list[CheckResult]:
    """Compare backward() against central differences of ``build().item()``.

    ``build`` must recompute the scalar from the current leaf values.
    """
    ad.zero_grads(leaves.values())
    ad.backward(build())
    f = lambda: build().item()  # noqa: E731
    results = []
    for name, t in leaves.items():
        size = t.data.size
        if max_coords is None or size <= max_coords:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, max_coords, replace=False))
        analytic = np.zeros(size) if t.grad is None else t.grad.reshape(-1)
        results.append(CheckResult(case, name, rel_error(analytic[coords], numeric_grad(f, t, coords, h))))
    return results


def _leaf(rng, *shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def primitive_cases(rng: np.random.Generator):
    """Yield ``(name, build, leaves)`` covering every primitive.

    Each output is contracted with a fixed random tensor so the loss depends
    on every output entry with a generic weight.
    """
    def proj(out: Tensor) -> Tensor:
        key = out.shape
        if key not in weights:
            weights[key] = Tensor(rng.uniform(-1, 1, size=key))
        return ad.sum_all(ad.mul(out, weights[key])) if out.shape else out

    weights: dict = {}
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    yield "matmul", lambda: proj(ad.matmul(a, b)), {"a": a, "b": b}
    c, d = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    yield "add", lambda: proj(ad.add(c, d)), {"a": c, "b": d}
    r = _leaf(rng, 4)
    yield "add_row", lambda: proj(ad.add(c, r)), {"a": c, "row": r}
    s = _leaf(rng)
    yield "add_scalar", lambda: proj(ad.add(c, s)), {"a": c, "s": s}
    yield "sub", lambda: proj(ad.sub(c, d)), {"a": c, "b": d}
    yield "sub_scalar", lambda: proj(ad.sub(s, c)), {"s": s, "a": c}
    yield "mul", lambda: proj(ad.mul(c, d)), {"a": c, "b": d}
    yield "mul_scalar_tensor", lambda: proj(ad.mul(c, s)), {"a": c, "s": s}
    yield "scalar_mul", lambda: proj(ad.scalar_mul(c, -1.7)), {"a": c}
    # keep ReLU/clip inputs away from their kinks
    e = Tensor(rng.uniform(0.1, 2, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4)), requires_grad=True)
    yield "relu", lambda: proj(ad.relu(e)), {"a": e}
    yield "sigmoid", lambda: proj(ad.sigmoid(c)), {"a": c}
    q = Tensor(rng.choice([rng.uniform(-1, -0.1), rng.uniform(0.1, 0.9), rng.uniform(1.1, 2)], size=(3, 4)),
               requires_grad=True)
    yield "clip", lambda: proj(ad.clip(q, 0.0, 1.0)), {"a": q}
    yield "sum_rows", lambda: proj(ad.sum_rows(c)), {"a": c}
    yield "sum_cols", lambda: proj(ad.sum_cols(c)), {"a": c}
    yield "sum_all", lambda: ad.scalar_mul(ad.sum_all(c), 0.3), {"a": c}
    yield "mean_all", lambda: ad.mean_all(ad.mul(c, d)), {"a": c, "b": d}
    f2 = _leaf(rng, 3, 2)
    yield "concat_last_dim", lambda: proj(ad.concat_last_dim([c, f2])), {"a": c, "b": f2}
    yield "transpose", lambda: proj(ad.transpose(c)), {"a": c}
    yield "reshape", lambda: proj(ad.reshape(c, (2, 6))), {"a": c}
    yield "slice_rows", lambda: proj(ad.slice_rows(c, 1, 3)), {"a": c}
    idx = np.array([2, 0, 2, 1])
    yield "gather_rows", lambda: proj(ad.gather_rows(c, idx)), {"a": c}
    seg = np.array([1, 0, 1])
    yield "segment_sum", lambda: proj(ad.segment_sum(c, seg, 3)), {"a": c}
    w = _leaf(rng, 3, 1)
    yield "scale_rows", lambda: proj(ad.scale_rows(c, w)), {"a": c, "w": w}
    yield "l2_norm", lambda: ad.l2_norm(c), {"a": c}
    v1, v2 = _leaf(rng, 5), _leaf(rng, 5)
    yield "dot", lambda: ad.dot(v1, v2), {"a": v1, "b": v2}
    yield "row_cosine", lambda: proj(ad.row_cosine(c, d)), {"a": c, "b": d}
    yield "cosine_similarity", lambda: ad.cosine_similarity(v1, v2), {"a": v1, "b": v2}
    x, W, y = _leaf(rng, 3, 4), _leaf(rng, 2, 4, 5), _leaf(rng, 3, 5)
    yield "bilinear", lambda: proj(ad.bilinear(x, W, y)), {"x": x, "W": W, "y": y}
    # a small MLP-like chain
    bias = _leaf(rng, 2)
    head = Tensor(np.linspace(-1, 1, 4).reshape(2, 2))
    yield "composite", (lambda: ad.mean_all(ad.sigmoid(ad.matmul(ad.relu(ad.add(ad.matmul(a, b), bias)), head)))), \
        {"a": a, "b": b, "bias": bias}


def run_primitive_suite(instances: int = 20, seed: int = 0) -> list[CheckResult]:
    results = []
    for k in range(instances):
        rng = np.random.default_rng(seed + k)
        for name, build, leaves in primitive_cases(rng):
            results += check_function(f"{name}#{k}", build, leaves, rng)
    return results


def _random_graph(rng: random.Random, n: int, n_labels: int, p: float, gid: str) -> Graph:
    labels = tuple(rng.randrange(n_labels) for _ in range(n))
    edges = frozenset((u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p)
    return Graph(gid, labels, edges)


GRADCHECK_CONFIG = dict(channels=[5, 4, 4, 3], ntn_k=3, head_hidden=4, label_vocab_size=3)


def model_case(k: int, seed: int = 0):
    """Random 4-6 node pairs and a small, randomly initialised model."""
    prng = random.Random(seed * 1000 + k)
    pairs = [(_random_graph(prng, prng.randint(4, 6), 3, 0.5, f"a{t}"),
              _random_graph(prng, prng.randint(4, 6), 3, 0.5, f"b{t}")) for t in range(2)]
    beta = 0.5 if k % 2 else 0.0
    cfg = M.ModelConfig(seed=seed * 1000 + k, beta=beta, lam=0.5, **GRADCHECK_CONFIG)
    params = M.init_params(cfg)
    # non-zero biases so every bias path carries signal
    brng = np.random.default_rng(seed * 7919 + k)
    for name, t in params.items():
        if ".b" in name:
            t.data[...] = brng.uniform(-0.2, 0.2, size=t.shape)
    batch = M.make_batch(pairs, cfg.label_vocab_size)
    ged = [float(prng.randint(0, 6)) for _ in pairs]
    sim = [prng.uniform(0.2, 1.0) for _ in pairs]

    def build():
        acts = M.forward(batch, params, cfg, np.random.default_rng(k), training=True)
        return M.loss(acts, ged, sim, cfg.lam)

    return build, params


def run_model_suite(instances: int = 20, seed: int = 0, max_coords: int = 4) -> list[CheckResult]:
    results = []
    for k in range(instances):
        build, params = model_case(k, seed)
        rng = np.random.default_rng(seed + 31 * k)
        results += check_function(f"model#{k}", build, params, rng, max_coords=max_coords)
    return results


def run_all(instances: int = 20, seed: int = 0) -> tuple[bool, list[CheckResult]]:
    results = run_primitive_suite(instances, seed) + run_model_suite(instances, seed)
    return all(r.ok for r in results), results
