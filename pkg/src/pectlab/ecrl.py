"""Energy-constrained fine-tuning: objective, Adam and the training loops.

Per sample ``i`` in a minibatch::

    Gamma_i = ||dz_i|| / (|dE_i| + eps)
    L_i     = CE(clean logits_i, y_i) + lam_bit * ||dz_i||^2 + lam_pect * (Gamma_i - mu)^2

where ``dz_i`` is the fused (or, for single-modality models, encoder-output)
displacement between the perturbed and clean pass and ``mu`` is the batch mean
of ``Gamma``. The batch loss is the mean of ``L_i``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .models import Model, argmax_lowest


@dataclass(frozen=True)
class EcrlConfig:
    lambda_bit: float = 1e-4
    lambda_pect: float = 1e-2
    eps: float = 1e-6
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 16
    baseline_epochs: int = 20
    finetune_epochs: int = 5
    seed: int = 0
    detach_mu: bool = True  # treat the batch mean of Gamma as a fixed target

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if not (self.lr > 0 and self.eps_adam > 0):
            raise ValueError("learning rate and eps_adam must be > 0")
        if self.lambda_bit < 0 or self.lambda_pect < 0:
            raise ValueError("penalty weights must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.baseline_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EcrlConfig":
        return cls(**d)


@dataclass
class BatchStats:
    gamma: np.ndarray
    mu_gamma: float
    drift: np.ndarray
    abs_delta_e: np.ndarray
    l_cls: np.ndarray
    l_bit: np.ndarray
    l_pect: np.ndarray
    loss: float
    n_correct: int = 0


def coupling_gamma(drift_norm: float, delta_e: float, eps: float = 1e-6) -> float:
    """Energy-normalized drift ``drift_norm / (|delta_e| + eps)``."""
    if drift_norm < 0:
        raise ValueError(f"drift_norm must be >= 0, got {drift_norm}")
    if not eps > 0:
        raise ValueError("eps must be > 0")
    return float(drift_norm) / (abs(float(delta_e)) + eps)


def drift_norm(dz: Tensor) -> Tensor:
    """Row norms of ``dz`` that are exactly zero at ``dz = 0`` yet differentiable there.

    ``sqrt(sum(dz**2) + e) - sqrt(e)`` with the autodiff guard ``e``; it differs
    from the plain norm by less than ``sqrt(e) = 1e-6``.
    """
    return ad.l2_norm(dz, axis=-1) - _const_like(dz, math.sqrt(ad.SQRT_EPS))


def _const_like(x: Tensor, value: float) -> Tensor:
    return x.tape.constant(np.full(x.shape[:-1], value))


def _broadcast_scalar(s: Tensor, n: int) -> Tensor:
    # (1,) x (1, n) -> (n,) keeps the gradient path to ``s``
    row = ad.reshape(s, (1, 1)) @ np.ones((1, n))
    return ad.reshape(row, (n,))


def ecrl_batch_loss(
    model: Model,
    clean: dict[str, np.ndarray],
    pert: dict[str, np.ndarray],
    delta_e,
    labels,
    cfg: EcrlConfig,
    params: dict[str, Tensor] | None = None,
) -> tuple[Tensor, BatchStats]:
    """Mean per-sample objective over one batch.

    ``params`` are leaves of the tape to differentiate on; when omitted a
    fresh no-gradient tape is used.
    """
    labels = np.asarray(labels, dtype=np.int64)
    delta_e = np.asarray(delta_e, dtype=np.float64).ravel()
    n = labels.size
    if n == 0:
        raise ValueError("empty batch")
    for views, what in ((clean, "clean"), (pert, "perturbed")):
        for m in model.modalities:
            if m not in views or views[m].shape[0] != n:
                raise ValueError(f"{what} views for {m!r} must hold {n} samples")
    if delta_e.size != n:
        raise ValueError(f"delta_e has {delta_e.size} entries for {n} samples")
    if params is None:
        tape = Tape()
        params = model.leaves(tape, requires_grad=False)
    tape = next(iter(params.values())).tape

    _, zf_c, logits = model.forward(tape, clean, params)
    _, zf_p, _ = model.forward(tape, pert, params)
    dz = zf_p - zf_c
    dn = drift_norm(dz)
    abs_de = np.abs(delta_e)
    gamma = ad.mul_const(dn, 1.0 / (abs_de + cfg.eps))
    if cfg.detach_mu:
        mu_val = float(np.mean(gamma.value))
        mu = tape.constant(np.full(n, mu_val))
    else:
        mu_t = ad.mean(gamma)
        mu_val = float(mu_t.value)
        mu = _broadcast_scalar(mu_t, n)

    l_cls = ad.softmax_cross_entropy(logits, labels)
    l_bit = ad.sum(ad.square(dz), axis=-1)
    l_pect = ad.square(gamma - mu)
    per_sample = l_cls + ad.mul_const(l_bit, cfg.lambda_bit) + ad.mul_const(l_pect, cfg.lambda_pect)
    loss = ad.mean(per_sample)
    if not math.isfinite(float(loss.value)):
        raise NonFiniteError("non-finite batch loss")

    stats = BatchStats(
        gamma=gamma.value.copy(),
        mu_gamma=mu_val,
        drift=dn.value.copy(),
        abs_delta_e=abs_de,
        l_cls=l_cls.value.copy(),
        l_bit=l_bit.value.copy(),
        l_pect=l_pect.value.copy(),
        loss=float(loss.value),
        n_correct=int(np.sum(argmax_lowest(logits.value) == labels)),
    )
    return loss, stats


def classification_loss(model: Model, views: dict[str, np.ndarray], labels, params: dict[str, Tensor]) -> Tensor:
    tape = next(iter(params.values())).tape
    _, _, logits = model.forward(tape, views, params)
    return ad.mean(ad.softmax_cross_entropy(logits, labels))


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              cfg: EcrlConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are not modified."""
    if set(grads) != set(params):
        raise ValueError("params and grads must have the same keys")
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"{k}: gradient shape {g.shape} vs parameter {p.shape}")
        m = cfg.beta1 * state.m.get(k, np.zeros_like(p)) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v.get(k, np.zeros_like(p)) + (1.0 - cfg.beta2) * g * g
        new_p[k] = p - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps_adam)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


# --------------------------------------------------------------------------
# datasets and loops


@dataclass
class PairedData:
    """Aligned clean views, perturbed views, energy shifts and labels."""

    clean: dict[str, np.ndarray]
    labels: np.ndarray
    pert: dict[str, np.ndarray] | None = None
    delta_e: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.size
        for views in (self.clean, self.pert or {}):
            for m, v in views.items():
                if v.shape[0] != n:
                    raise ValueError(f"view {m!r} holds {v.shape[0]} samples, labels {n}")
        if self.pert is not None:
            if self.delta_e is None:
                raise ValueError("perturbed views need delta_e")
            self.delta_e = np.asarray(self.delta_e, dtype=np.float64)
            if self.delta_e.shape != (n,):
                raise ValueError("delta_e must have one entry per sample")

    def __len__(self) -> int:
        return self.labels.size

    def subset(self, idx) -> "PairedData":
        idx = np.asarray(idx)
        take = lambda d: None if d is None else {m: v[idx] for m, v in d.items()}
        return PairedData(take(self.clean), self.labels[idx], take(self.pert),
                          None if self.delta_e is None else self.delta_e[idx])


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([int(seed), int(epoch)]).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _grads(model: Model, leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: leaves[k].grad for k in model.params}


def _epoch_record(epoch: int, mode: str, sums: dict, n: int, n_batches: int) -> dict:
    rec = {"epoch": epoch, "mode": mode}
    for k in ("loss", "l_cls", "l_bit", "l_pect", "mean_drift", "mu_gamma"):
        if k in sums:
            # loss-type entries are per-batch means, drift is a per-sample mean
            denom = n if k == "mean_drift" else n_batches
            rec[k] = sums[k] / denom
    rec["train_acc"] = sums["correct"] / n
    return rec


def train_baseline(model: Model, data: PairedData, cfg: EcrlConfig, epochs: int | None = None,
                   history_path: str | Path | None = None) -> tuple[Model, list[dict]]:
    """Pure classification training with seeded shuffling; returns a new model."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    epochs = cfg.baseline_epochs if epochs is None else epochs
    model = model.copy()
    state = AdamState()
    history = []
    for epoch in range(epochs):
        sums = {"loss": 0.0, "l_cls": 0.0, "correct": 0}
        n_batches = 0
        for idx in _batches(len(data), cfg.batch_size, cfg.seed, epoch):
            tape = Tape()
            leaves = model.leaves(tape)
            views = {m: v[idx] for m, v in data.clean.items()}
            _, _, logits = model.forward(tape, views, leaves)
            l_cls = ad.softmax_cross_entropy(logits, data.labels[idx])
            loss = ad.mean(l_cls)
            if not math.isfinite(float(loss.value)):
                raise NonFiniteError(f"non-finite loss in epoch {epoch}")
            tape.backward(loss)
            model.params, state = adam_step(model.params, _grads(model, leaves), state, cfg)
            sums["loss"] += float(loss.value)
            sums["l_cls"] += float(loss.value)
            sums["correct"] += int(np.sum(argmax_lowest(logits.value) == data.labels[idx]))
            n_batches += 1
        history.append(_epoch_record(epoch, "baseline", sums, len(data), n_batches))
    if history_path is not None:
        write_history(history, history_path)
    return model, history


def finetune_ecrl(model: Model, data: PairedData, cfg: EcrlConfig, epochs: int | None = None,
                  history_path: str | Path | None = None) -> tuple[Model, list[dict]]:
    """Fine-tune on the full objective with a fresh optimizer; returns a new model."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    if data.pert is None:
        raise ValueError("fine-tuning needs perturbed views and energy shifts")
    epochs = cfg.finetune_epochs if epochs is None else epochs
    model = model.copy()
    state = AdamState()
    history = []
    for epoch in range(epochs):
        sums = {"loss": 0.0, "l_cls": 0.0, "l_bit": 0.0, "l_pect": 0.0, "mean_drift": 0.0,
                "mu_gamma": 0.0, "correct": 0}
        n_batches = 0
        for idx in _batches(len(data), cfg.batch_size, cfg.seed, epoch):
            tape = Tape()
            leaves = model.leaves(tape)
            loss, st = ecrl_batch_loss(
                model,
                {m: v[idx] for m, v in data.clean.items()},
                {m: v[idx] for m, v in data.pert.items()},
                data.delta_e[idx], data.labels[idx], cfg, leaves,
            )
            tape.backward(loss)
            model.params, state = adam_step(model.params, _grads(model, leaves), state, cfg)
            sums["loss"] += st.loss
            sums["l_cls"] += float(st.l_cls.mean())
            sums["l_bit"] += float(st.l_bit.mean())
            sums["l_pect"] += float(st.l_pect.mean())
            sums["mean_drift"] += float(st.drift.sum())
            sums["mu_gamma"] += st.mu_gamma
            sums["correct"] += st.n_correct
            n_batches += 1
        history.append(_epoch_record(epoch, "ecrl", sums, len(data), n_batches))
    if history_path is not None:
        write_history(history, history_path)
    return model, history


def write_history(history: list[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_history(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
