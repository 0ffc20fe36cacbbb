"""Adam, the epoch loop and min-validation-loss model selection."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import metrics as mt
from . import model as M
from .autodiff import Tensor


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.eps <= 0:
            raise ValueError("lr, batch_size, epochs and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, cfg: TrainConfig) -> None:
    """In-place Adam update from the ``.grad`` of every parameter."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDiverged(f"non-finite gradient in {name} at step {state.t + 1}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1 - b1 ** state.t, 1 - b2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params.values() if p.grad is not None))
    if total > max_norm:
        for p in params.values():
            if p.grad is not None:
                p.grad *= max_norm / total
    return total


@dataclass
class TrainReport:
    train_loss: list[float]
    val_loss: list[float]
    selected_epoch: int
    test_metrics: dict | None = None
    model_config: dict | None = None
    train_config: dict | None = None

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def batch_loss(samples: Sequence, p: dict, cfg: M.ModelConfig, rng=None, training: bool = False) -> Tensor:
    batch = M.make_batch([(s.g1, s.g2) for s in samples], cfg.label_vocab_size)
    acts = M.forward(batch, p, cfg, rng, training=training)
    return M.loss(acts, [s.ged for s in samples], [s.sim for s in samples], cfg.lam)


def dataset_loss(samples: Sequence, p: dict, cfg: M.ModelConfig, batch_size: int = 256) -> float:
    """Mean per-pair loss with frozen parameters."""
    frozen = {k: Tensor(v.data) for k, v in p.items()}
    total = 0.0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        total += batch_loss(chunk, frozen, cfg).item() * len(chunk)
    return total / len(samples)


def evaluate(samples: Sequence, p: dict, cfg: M.ModelConfig, global_rank: bool = False,
             batch_size: int = 256) -> dict:
    pred = M.predict([(s.g1, s.g2) for s in samples], p, cfg, batch_size)
    return mt.evaluate_query_set([s.g1.id for s in samples], pred, [s.sim for s in samples],
                                 global_rank=global_rank)


def train_step(chunk: Sequence, params: dict, mcfg: M.ModelConfig, tcfg: TrainConfig,
               state: AdamState, rng: np.random.Generator) -> float:
    ad.zero_grads(params.values())
    loss = batch_loss(chunk, params, mcfg, rng, training=True)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss became {value} at step {state.t + 1}")
    ad.backward(loss)
    if tcfg.clip_norm:
        clip_gradients(params, tcfg.clip_norm)
    adam_step(params, state, tcfg)
    return value


def fit(train: Sequence, val: Sequence, test: Sequence | None, mcfg: M.ModelConfig, tcfg: TrainConfig,
        checkpoint_path=None, log=None, global_rank: bool = False,
        vocabulary: Sequence[str] | None = None) -> tuple[dict[str, Tensor], TrainReport]:
    """Train with Adam and keep the parameters of the epoch with the smallest validation loss."""
    if not train or not val:
        raise ValueError("training and validation splits must be non-empty")
    params = M.init_params(mcfg)
    rng = np.random.default_rng(tcfg.seed)
    state = AdamState()
    train_curve, val_curve = [], []
    best, best_epoch = None, 0
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(train))
        losses, weights = [], []
        for start in range(0, len(order), tcfg.batch_size):
            chunk = [train[i] for i in order[start:start + tcfg.batch_size]]
            try:
                losses.append(train_step(chunk, params, mcfg, tcfg, state, rng))
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            weights.append(len(chunk))
        train_curve.append(float(np.average(losses, weights=weights)))
        val_curve.append(dataset_loss(val, params, mcfg, tcfg.eval_batch_size))
        if best is None or val_curve[-1] < val_curve[best_epoch - 1]:
            best, best_epoch = {k: v.data.copy() for k, v in params.items()}, epoch
            if checkpoint_path is not None:
                M.save_model(checkpoint_path, mcfg, _as_tensors(best), vocabulary)
        if log is not None:
            log(f"epoch {epoch:3d} train {train_curve[-1]:.6f} val {val_curve[-1]:.6f}"
                + (" *" if best_epoch == epoch else ""))
    best_params = _as_tensors(best)
    report = TrainReport(train_curve, val_curve, best_epoch, None, mcfg.to_json(), tcfg.to_json())
    if test:
        report.test_metrics = evaluate(test, best_params, mcfg, global_rank, tcfg.eval_batch_size)
    return best_params, report


def _as_tensors(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}


def constant_mean_mse(train: Sequence, test: Sequence) -> float:
    """MSE on ``test`` of always predicting the mean training similarity."""
    mean = float(np.mean([s.sim for s in train]))
    return mt.mse([mean] * len(test), [s.sim for s in test])


def swap_mse_difference(samples: Sequence, p: dict, cfg: M.ModelConfig, mode: str = "iis",
                        others: Sequence | None = None) -> dict:
    """MSE change after a swap probe, keeping the original targets.

    For ``iis`` only ``samples`` is used. For ``eisa``/``eisu`` pair b of
    ``samples`` is exchanged with pair b of ``others`` and the two MSE changes
    are averaged.
    """
    acts_a = M.run_pairs([(s.g1, s.g2) for s in samples], p, cfg)
    truth_a = np.array([s.sim for s in samples])
    base_a = mt.mse(acts_a.similarity(), truth_a)
    frozen = {k: Tensor(v.data) for k, v in p.items()}
    if mode.lower() == "iis":
        swapped, _ = M.swap_inference(acts_a, None, mode, frozen)
        after = mt.mse(swapped, truth_a)
        return {"mode": "iis", "mse_before": base_a, "mse_after": after, "mse_diff": after - base_a,
                "pairs": len(samples)}
    if others is None or len(others) != len(samples):
        raise ValueError("extra-instance swaps need a second, equally long sample list")
    acts_b = M.run_pairs([(s.g1, s.g2) for s in others], p, cfg)
    truth_b = np.array([s.sim for s in others])
    base_b = mt.mse(acts_b.similarity(), truth_b)
    sa, sb = M.swap_inference(acts_a, acts_b, mode, frozen)
    before = (base_a + base_b) / 2
    after = (mt.mse(sa, truth_a) + mt.mse(sb, truth_b)) / 2
    return {"mode": mode.lower(), "mse_before": before, "mse_after": after, "mse_diff": after - before,
            "pairs": len(samples)}
