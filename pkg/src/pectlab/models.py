"""Modality encoders, late fusion, linear classifier and the geometric
utilities (margin, spectral norm) used by the drift analysis."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .features import MODALITIES

ENCODER_KINDS = ("mlp", "conv1d_pool_mlp", "conv2d_pool_mlp", "attention1_mlp")

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "identity": ad.identity}


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "mlp"
    widths: tuple[int, ...] = (32,)
    embed_dim: int = 16
    activation: str = "relu"
    filters: int = 8
    kernel: int = 7
    stride: int = 2
    pool: int = 5
    token_dim: int = 8
    out_norm: bool = True  # layer-normalize the embedding

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if any(w <= 0 for w in self.widths) or min(self.filters, self.kernel, self.stride, self.pool, self.token_dim) <= 0:
            raise ValueError("layer sizes must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def default_encoder(modality: str) -> EncoderSpec:
    if modality == "temporal":
        return EncoderSpec("conv1d_pool_mlp", (32,), 16, filters=8, kernel=7, stride=2, pool=5)
    if modality == "scalogram":
        return EncoderSpec("conv2d_pool_mlp", (32,), 16, filters=4, kernel=3, stride=1, pool=3)
    if modality == "spectrum":
        return EncoderSpec("attention1_mlp", (32,), 16, token_dim=8)
    raise ValueError(f"unknown modality {modality!r}")


PRESETS = {
    "M1": ("temporal",),
    "M2": ("scalogram",),
    "M3": ("spectrum",),
    "M4": ("temporal", "spectrum"),
    "M5": ("scalogram", "spectrum"),
    "M6": ("temporal", "scalogram"),
    "M7": ("temporal", "scalogram", "spectrum"),
}


@dataclass(frozen=True)
class ModelConfig:
    modalities: tuple[str, ...]
    input_shapes: dict
    encoders: dict
    fused_dim: int = 32
    n_classes: int = 4

    def __post_init__(self):
        mods = tuple(m for m in MODALITIES if m in self.modalities)
        if not mods or len(mods) != len(self.modalities):
            raise ValueError(f"modality mask must be a non-empty subset of {MODALITIES}")
        object.__setattr__(self, "modalities", mods)
        if self.fused_dim < 2:
            raise ValueError("fused_dim must be >= 2")

    @property
    def multimodal(self) -> bool:
        return len(self.modalities) > 1

    def to_dict(self) -> dict:
        return {
            "modalities": list(self.modalities),
            "input_shapes": {k: list(v) for k, v in self.input_shapes.items()},
            "encoders": {k: v.to_dict() for k, v in self.encoders.items()},
            "fused_dim": self.fused_dim,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            modalities=tuple(d["modalities"]),
            input_shapes={k: tuple(v) for k, v in d["input_shapes"].items()},
            encoders={k: EncoderSpec(**v) for k, v in d["encoders"].items()},
            fused_dim=d["fused_dim"],
            n_classes=d["n_classes"],
        )


def preset_config(name: str, input_shapes: dict, n_classes: int = 4, fused_dim: int = 32,
                  encoders: dict | None = None) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    mods = PRESETS[name]
    enc = {m: (encoders or {}).get(m, default_encoder(m)) for m in mods}
    return ModelConfig(mods, {m: tuple(input_shapes[m]) for m in mods}, enc, fused_dim, n_classes)


# --------------------------------------------------------------------------
# geometry helpers for convolutional encoders


def conv1d_geometry(length: int, spec: EncoderSpec) -> tuple[np.ndarray, int]:
    n_pos = (length - spec.kernel) // spec.stride + 1
    n_pos = (n_pos // spec.pool) * spec.pool
    if n_pos <= 0:
        raise ValueError("temporal input too short for conv encoder")
    idx = np.arange(n_pos)[:, None] * spec.stride + np.arange(spec.kernel)[None, :]
    return idx, n_pos // spec.pool


def conv2d_geometry(size: int, spec: EncoderSpec) -> tuple[np.ndarray, int]:
    side = (size - spec.kernel) // spec.stride + 1
    side = (side // spec.pool) * spec.pool
    if side <= 0:
        raise ValueError("scalogram too small for conv encoder")
    r = np.arange(side) * spec.stride
    dr = np.arange(spec.kernel)
    rows = (r[:, None, None, None] + dr[None, None, :, None]) * size
    cols = r[None, :, None, None] + dr[None, None, None, :]
    idx = (rows + cols).reshape(side * side, spec.kernel * spec.kernel)
    return idx, side // spec.pool


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape or (fan_in, fan_out))


def _mlp_params(rng, prefix: str, sizes: list[int]) -> dict:
    p = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        p[f"{prefix}.dense{i}.W"] = _glorot(rng, a, b)
        p[f"{prefix}.dense{i}.b"] = np.zeros(b)
    return p


def encoder_params(rng: np.random.Generator, modality: str, spec: EncoderSpec, shape: tuple[int, ...]) -> dict:
    pre = f"enc.{modality}"
    if spec.kind == "mlp":
        return _mlp_params(rng, pre, [int(np.prod(shape)), *spec.widths, spec.embed_dim])
    if spec.kind == "conv1d_pool_mlp":
        _, pooled = conv1d_geometry(shape[0], spec)
        p = {f"{pre}.conv.W": _glorot(rng, spec.kernel, spec.filters), f"{pre}.conv.b": np.zeros(spec.filters)}
        p.update(_mlp_params(rng, pre, [pooled * spec.filters, *spec.widths, spec.embed_dim]))
        return p
    if spec.kind == "conv2d_pool_mlp":
        _, pooled = conv2d_geometry(shape[0], spec)
        k2 = spec.kernel * spec.kernel
        p = {f"{pre}.conv.W": _glorot(rng, k2, spec.filters), f"{pre}.conv.b": np.zeros(spec.filters)}
        p.update(_mlp_params(rng, pre, [pooled * pooled * spec.filters, *spec.widths, spec.embed_dim]))
        return p
    # attention1_mlp
    n_tok, d = shape[0], spec.token_dim
    p = {
        f"{pre}.embed.W": _glorot(rng, 1, d),
        f"{pre}.embed.pos": rng.uniform(-0.1, 0.1, size=(n_tok, d)),
        f"{pre}.attn.Wq": _glorot(rng, d, d),
        f"{pre}.attn.Wk": _glorot(rng, d, d),
        f"{pre}.attn.Wv": _glorot(rng, d, d),
        f"{pre}.ff.W": _glorot(rng, d, 2 * d),
        f"{pre}.ff.b": np.zeros(2 * d),
    }
    p.update(_mlp_params(rng, pre, [2 * d, *spec.widths, spec.embed_dim]))
    return p


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    params = {}
    for m in cfg.modalities:
        params.update(encoder_params(rng, m, cfg.encoders[m], cfg.input_shapes[m]))
    in_dim = sum(cfg.encoders[m].embed_dim for m in cfg.modalities)
    if cfg.multimodal:
        params["fusion.W"] = _glorot(rng, in_dim, cfg.fused_dim)
        params["fusion.b"] = np.zeros(cfg.fused_dim)
        head_in = cfg.fused_dim
    else:
        head_in = in_dim
    params["cls.W"] = _glorot(rng, head_in, cfg.n_classes)
    params["cls.b"] = np.zeros(cfg.n_classes)
    return params


# --------------------------------------------------------------------------
# forward pass


def _mlp(x: Tensor, p: dict, prefix: str, n_layers: int, act) -> Tensor:
    for i in range(n_layers):
        x = ad.bias_add(x @ p[f"{prefix}.dense{i}.W"], p[f"{prefix}.dense{i}.b"])
        if i < n_layers - 1:
            x = act(x)
    return x


def encode(x, modality: str, spec: EncoderSpec, p: dict) -> Tensor:
    z = _encode(x, modality, spec, p)
    return ad.layer_norm(z) if spec.out_norm else z


def _encode(x, modality: str, spec: EncoderSpec, p: dict) -> Tensor:
    """Embed a batch of one modality's views; returns shape ``(B, embed_dim)``.

    ``p`` maps parameter names to tensors on the same tape as ``x``.
    """
    pre = f"enc.{modality}"
    act = ACTIVATIONS[spec.activation]
    n_dense = len(spec.widths) + 1
    b = x.shape[0]
    if spec.kind == "mlp":
        return _mlp(ad.reshape(x, (b, -1)), p, pre, n_dense, act)
    if spec.kind == "conv1d_pool_mlp":
        if x.ndim != 2:
            raise ValueError(f"conv1d encoder expects (B, L), got {x.shape}")
        idx, pooled = conv1d_geometry(x.shape[1], spec)
        h = act(ad.bias_add(ad.take(x, idx) @ p[f"{pre}.conv.W"], p[f"{pre}.conv.b"]))
        h = ad.mean(ad.reshape(h, (b, pooled, spec.pool, spec.filters)), axis=2)
        return _mlp(ad.reshape(h, (b, pooled * spec.filters)), p, pre, n_dense, act)
    if spec.kind == "conv2d_pool_mlp":
        if x.ndim != 3 or x.shape[1] != x.shape[2]:
            raise ValueError(f"conv2d encoder expects (B, S, S), got {x.shape}")
        idx, pooled = conv2d_geometry(x.shape[1], spec)
        h = act(ad.bias_add(ad.take(x, idx) @ p[f"{pre}.conv.W"], p[f"{pre}.conv.b"]))
        k = spec.pool
        h = ad.reshape(h, (b, pooled, k, pooled, k, spec.filters))
        h = ad.mean(h, axis=(2, 4))
        return _mlp(ad.reshape(h, (b, pooled * pooled * spec.filters)), p, pre, n_dense, act)
    # single-head self-attention over scalar spectrum tokens
    if x.ndim != 2:
        raise ValueError(f"attention encoder expects (B, K), got {x.shape}")
    n_tok, d = x.shape[1], spec.token_dim
    h = ad.bias_add(ad.reshape(x, (b, n_tok, 1)) @ p[f"{pre}.embed.W"], p[f"{pre}.embed.pos"])
    q = h @ p[f"{pre}.attn.Wq"]
    k = h @ p[f"{pre}.attn.Wk"]
    v = h @ p[f"{pre}.attn.Wv"]
    scores = ad.mul_const(q @ ad.transpose(k, (0, 2, 1)), 1.0 / math.sqrt(d))
    h = h + ad.softmax(scores, axis=-1) @ v
    h = act(ad.bias_add(h @ p[f"{pre}.ff.W"], p[f"{pre}.ff.b"]))  # token-wise feed-forward
    return _mlp(ad.mean(h, axis=1), p, pre, n_dense, act)


def fuse(zs: list[Tensor], W, b) -> Tensor:
    """Concatenate modality embeddings and project: ``concat(z) @ W + b``."""
    if not zs:
        raise ValueError("fuse needs at least one embedding")
    z = ad.concat(zs, axis=-1) if len(zs) > 1 else zs[0]
    if z.shape[-1] != W.shape[0]:
        raise ValueError(f"fuse: concatenated width {z.shape[-1]} does not match W {W.shape}")
    return ad.bias_add(z @ W, b)


def classify(z: Tensor, W, b) -> Tensor:
    return ad.bias_add(z @ W, b)


class Model:
    """Encoders, optional fusion and a linear head with their parameters."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        return cls(cfg, init_params(cfg, seed))

    @property
    def modalities(self) -> tuple[str, ...]:
        return self.cfg.modalities

    def copy(self) -> "Model":
        return Model(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def leaves(self, tape: Tape, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: tape.leaf(v, requires_grad, name=k) for k, v in self.params.items()}

    def forward(self, tape: Tape, views: dict[str, np.ndarray], p: dict[str, Tensor]):
        """Returns ``(per-modality embeddings, fused representation, logits)``.

        Unimodal models bypass fusion: the encoder output is the representation.
        """
        zs = {}
        for m in self.modalities:
            if m not in views:
                raise ValueError(f"model expects modality {m!r}")
            x = tape.constant(views[m])
            if x.shape[1:] != tuple(self.cfg.input_shapes[m]):
                raise ValueError(f"{m}: expected input {self.cfg.input_shapes[m]}, got {x.shape[1:]}")
            zs[m] = encode(x, m, self.cfg.encoders[m], p)
        if self.cfg.multimodal:
            z_fused = fuse([zs[m] for m in self.modalities], p["fusion.W"], p["fusion.b"])
        else:
            z_fused = zs[self.modalities[0]]
        return zs, z_fused, classify(z_fused, p["cls.W"], p["cls.b"])

    def embed(self, views: dict[str, np.ndarray]):
        """Numpy forward pass without gradients."""
        tape = Tape()
        zs, zf, logits = self.forward(tape, views, self.leaves(tape, requires_grad=False))
        return {m: z.value for m, z in zs.items()}, zf.value, logits.value

    def predict(self, views: dict[str, np.ndarray]) -> np.ndarray:
        return argmax_lowest(self.embed(views)[2])

    def fusion_blocks(self) -> dict[str, np.ndarray]:
        """Per-modality blocks ``W_m`` with ``z_fused = sum_m W_m z_m + b``
        (column-vector convention). Unimodal models use the identity."""
        if not self.cfg.multimodal:
            m = self.modalities[0]
            return {m: np.eye(self.cfg.encoders[m].embed_dim)}
        W = self.params["fusion.W"]
        out, start = {}, 0
        for m in self.modalities:
            d = self.cfg.encoders[m].embed_dim
            out[m] = W[start:start + d].T
            start += d
        return out

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        ad.save_params(path, self.params, {"model": self.cfg.to_dict(), **(meta or {})})

    @classmethod
    def load(cls, path: str | Path) -> tuple["Model", dict]:
        params, meta = ad.load_params(path)
        return cls(ModelConfig.from_dict(meta["model"]), params), meta


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=-1)


# --------------------------------------------------------------------------
# geometry


def margin(z: np.ndarray, W: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance from ``z`` to the nearest decision boundary of the
    linear head ``logits = z @ W + b``.

    Coinciding weight columns give 0 if their logits tie and ``inf`` otherwise.
    """
    logits = z @ W + b
    y = int(argmax_lowest(logits))
    best = math.inf
    for j in range(W.shape[1]):
        if j == y:
            continue
        gap = logits[y] - logits[j]
        norm = float(np.linalg.norm(W[:, y] - W[:, j]))
        if norm == 0.0:
            d = 0.0 if gap == 0 else math.inf
        else:
            d = gap / norm
        best = min(best, d)
    return max(best, 0.0)


def margins(Z: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.array([margin(z, W, b) for z in np.atleast_2d(Z)])


def spectral_norm(W: np.ndarray, max_iter: int = 1000, tol: float = 1e-10, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``W^T W``."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    if not np.any(W):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(W.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        u = W @ v
        new_sigma = float(np.linalg.norm(u))
        w = W.T @ u
        nw = np.linalg.norm(w)
        if nw == 0.0:
            break
        v = w / nw
        if new_sigma > 0 and abs(new_sigma - sigma) <= tol * new_sigma:
            sigma = new_sigma
            break
        sigma = new_sigma
    return float(np.linalg.norm(W @ v))
