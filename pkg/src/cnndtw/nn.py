"""A small numpy CNN: valid 1-D convolutions over time, leaky ReLU, a masked
global max-pool over time, dense layers, dropout, Gaussian input noise and
a sigmoid output, with exact reverse-mode gradients and Adam.

Activations inside the conv stack have shape ``(B, T, C)``; every batch
carries the valid length of each sample so zero padding never reaches the
pool. After pooling, activations are ``(B, C)``.

The last layer must be a sigmoid; its backward pass is fused with the
summed binary cross-entropy so the output pre-activation gradient is
exactly ``y_hat - y`` (zero where the loss clamp is active).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import binfmt
from .errors import (
    CorruptModel,
    DimensionMismatch,
    InputTooShort,
    StaleActivations,
)
from .features import FeatureSequence

MODEL_MAGIC = b"KWMD"
MODEL_VERSION = 1

BCE_EPS = 1e-7
OUTPUT_EPS = 1e-12  # keeps forward outputs strictly inside (0, 1)
DEFAULT_ALPHA = 1.0 / 3.0
DEFAULT_CONV_FILTERS = (80, 80, 96, 96, 128, 128, 256, 256, 512, 512)

KINDS = ("conv1d", "leaky_relu", "global_max_pool_time", "dense", "dropout", "gaussian_noise", "sigmoid")


@dataclass
class LayerSpec:
    kind: str
    filters: int = 0
    width: int = 0
    stride: int = 1
    units: int = 0
    p: float = 0.0
    sigma: float = 0.0
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv1d" and (self.width < 1 or self.filters < 1 or self.stride < 1):
            raise ValueError("conv1d needs width >= 1, filters >= 1, stride >= 1")
        if self.kind == "dense" and self.units < 1:
            raise ValueError("dense needs units >= 1")
        if not 0.0 <= self.p < 1.0:
            raise ValueError("dropout p must be in [0, 1)")
        if self.sigma < 0:
            raise ValueError("noise sigma must be >= 0")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        keys = {
            "conv1d": ("filters", "width", "stride"),
            "dense": ("units",),
            "dropout": ("p",),
            "gaussian_noise": ("sigma",),
            "leaky_relu": ("alpha",),
        }.get(self.kind, ())
        d.update({k: getattr(self, k) for k in keys})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


@dataclass
class CnnModel:
    layers: list[LayerSpec]
    params: list[dict[str, np.ndarray]]
    input_dim: int
    rng_seed: int = 0
    meta: dict = field(default_factory=dict)
    version: int = 0  # bumped on every parameter update; guards cached activations

    def __post_init__(self):
        _validate_stack(self.layers)
        if len(self.params) != len(self.layers):
            raise ValueError("one params dict per layer required")
        shapes = _param_shapes(self.layers, self.input_dim)
        for i, (want, got) in enumerate(zip(shapes, self.params)):
            if set(want) != set(got) or any(want[k] != got[k].shape for k in want):
                raise DimensionMismatch(f"layer {i} ({self.layers[i].kind}) params do not match its spec")

    @property
    def n_outputs(self) -> int:
        return [l for l in self.layers if l.kind == "dense"][-1].units

    @property
    def min_length(self) -> int:
        return min_input_length(self.layers)

    def copy(self) -> "CnnModel":
        return CnnModel(
            list(self.layers),
            [{k: v.copy() for k, v in p.items()} for p in self.params],
            self.input_dim,
            self.rng_seed,
            dict(self.meta),
            self.version,
        )

    def n_parameters(self) -> int:
        return sum(v.size for p in self.params for v in p.values())


def _validate_stack(layers: Sequence[LayerSpec]) -> None:
    kinds = [l.kind for l in layers]
    if kinds.count("global_max_pool_time") != 1:
        raise ValueError("exactly one global_max_pool_time layer is required")
    pool = kinds.index("global_max_pool_time")
    if "conv1d" in kinds[pool:]:
        raise ValueError("conv1d layers must precede the global pool")
    if "dense" in kinds[:pool]:
        raise ValueError("dense layers must follow the global pool")
    if not kinds or kinds[-1] != "sigmoid" or "sigmoid" in kinds[:-1]:
        raise ValueError("the model must end with a single sigmoid layer")
    if "dense" not in kinds[pool:]:
        raise ValueError("at least one dense layer must follow the pool")


def _param_shapes(layers: Sequence[LayerSpec], input_dim: int) -> list[dict[str, tuple]]:
    shapes = []
    ch = input_dim
    for spec in layers:
        if spec.kind == "conv1d":
            shapes.append({"W": (spec.width, ch, spec.filters), "b": (spec.filters,)})
            ch = spec.filters
        elif spec.kind == "dense":
            shapes.append({"W": (ch, spec.units), "b": (spec.units,)})
            ch = spec.units
        else:
            shapes.append({})
    return shapes


def min_input_length(layers: Sequence[LayerSpec]) -> int:
    """Shortest input that leaves at least one frame after the conv stack."""
    need = 1
    for spec in reversed([l for l in layers if l.kind == "conv1d"]):
        need = (need - 1) * spec.stride + spec.width
    return need


def conv_output_lengths(layers: Sequence[LayerSpec], lengths: np.ndarray) -> np.ndarray:
    out = np.asarray(lengths, dtype=np.int64)
    for spec in layers:
        if spec.kind == "conv1d":
            out = (out - spec.width) // spec.stride + 1
    return out


def init_params(layers: Sequence[LayerSpec], input_dim: int, seed: int) -> list[dict[str, np.ndarray]]:
    """Fan-in scaled uniform weights (leaky-ReLU He bound), zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    alpha = next((l.alpha for l in layers if l.kind == "leaky_relu"), DEFAULT_ALPHA)
    for shapes in _param_shapes(layers, input_dim):
        p = {}
        if shapes:
            w_shape = shapes["W"]
            fan_in = int(np.prod(w_shape[:-1]))
            bound = math.sqrt(6.0 / ((1.0 + alpha ** 2) * fan_in))
            p["W"] = rng.uniform(-bound, bound, size=w_shape)
            p["b"] = np.zeros(shapes["b"])
        params.append(p)
    return params


def build_cnn(
    input_dim: int,
    n_outputs: int,
    conv_filters: Sequence[int] = DEFAULT_CONV_FILTERS,
    kernel_width: int = 5,
    stride: int = 1,
    dense_units: Sequence[int] = (3000, 3000),
    dropout: float = 0.5,
    noise_sigma: float | None = 0.1,
    alpha: float = DEFAULT_ALPHA,
    seed: int = 0,
) -> CnnModel:
    """Conv stack -> global max-pool over time -> dense stack -> sigmoid."""
    layers: list[LayerSpec] = []
    if noise_sigma:
        layers.append(LayerSpec("gaussian_noise", sigma=noise_sigma))
    for f in conv_filters:
        layers += [LayerSpec("conv1d", filters=f, width=kernel_width, stride=stride), LayerSpec("leaky_relu", alpha=alpha)]
    layers.append(LayerSpec("global_max_pool_time"))
    for u in dense_units:
        layers += [LayerSpec("dense", units=u), LayerSpec("leaky_relu", alpha=alpha)]
        if dropout:
            layers.append(LayerSpec("dropout", p=dropout))
    layers += [LayerSpec("dense", units=n_outputs), LayerSpec("sigmoid")]
    return CnnModel(layers, init_params(layers, input_dim, seed), input_dim, rng_seed=seed)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    model_id: int
    model_version: int
    saved: list
    y_hat: np.ndarray
    lengths: np.ndarray
    single: bool


def pad_batch(seqs: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad sequences into ``(B, T_max, D)`` plus their lengths."""
    mats = [s.frames if isinstance(s, FeatureSequence) else np.asarray(s) for s in seqs]
    lengths = np.array([m.shape[0] for m in mats], dtype=np.int64)
    out = np.zeros((len(mats), int(lengths.max()), mats[0].shape[1]))
    for i, m in enumerate(mats):
        out[i, :m.shape[0]] = m
    return out, lengths


def _as_batch(x, lengths):
    single = False
    if isinstance(x, FeatureSequence):
        x = x.frames
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
        single = True
    if x.ndim != 3:
        raise DimensionMismatch(f"expected (T, D) or (B, T, D) input, got shape {x.shape}")
    if lengths is None:
        lengths = np.full(x.shape[0], x.shape[1], dtype=np.int64)
    return x, np.asarray(lengths, dtype=np.int64), single


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _im2col(x: np.ndarray, width: int, stride: int) -> np.ndarray:
    B, T, C = x.shape
    win = np.lib.stride_tricks.sliding_window_view(x, width, axis=1)[:, ::stride]  # (B, T', C, w)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(B * win.shape[1], width * C)


def forward(model: CnnModel, x, mode: str = "eval", rng=None, lengths=None):
    """Run the network.

    ``x`` is a FeatureSequence, a ``(T, D)`` matrix or a padded ``(B, T, D)``
    batch with per-sample ``lengths``. Returns ``y_hat`` (shape ``(L,)`` or
    ``(B, L)``); in train mode returns ``(y_hat, cache)``. Train mode draws
    dropout masks and input noise from ``rng`` (a seed or Generator), so the
    same seed reproduces the same output.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    train = mode == "train"
    x, lengths, single = _as_batch(x, lengths)
    if x.shape[2] != model.input_dim:
        raise DimensionMismatch(f"input has D={x.shape[2]}, model expects D={model.input_dim}")
    need = model.min_length
    if lengths.min() < need:
        raise InputTooShort(f"input of {int(lengths.min())} frames is shorter than the minimum length {need}")
    if train:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(
            model.rng_seed if rng is None else rng)

    saved = []
    h = x
    cur_len = lengths
    for spec, p in zip(model.layers, model.params):
        k = spec.kind
        if k == "conv1d":
            B, T, C = h.shape
            cols = _im2col(h, spec.width, spec.stride)
            t_out = (T - spec.width) // spec.stride + 1
            out = (cols @ p["W"].reshape(-1, spec.filters) + p["b"]).reshape(B, t_out, spec.filters)
            saved.append((cols, h.shape) if train else None)
            cur_len = (cur_len - spec.width) // spec.stride + 1
            h = out
        elif k == "leaky_relu":
            saved.append(h > 0 if train else None)
            h = np.where(h > 0, h, spec.alpha * h)
        elif k == "global_max_pool_time":
            B, T, C = h.shape
            valid = np.arange(T)[None, :] < cur_len[:, None]
            masked = np.where(valid[:, :, None], h, -np.inf)
            arg = masked.argmax(axis=1)  # (B, C), first maximum on ties
            saved.append((arg, h.shape) if train else None)
            h = np.take_along_axis(h, arg[:, None, :], axis=1)[:, 0, :]
        elif k == "dense":
            saved.append(h if train else None)
            h = h @ p["W"] + p["b"]
        elif k == "dropout":
            if train and spec.p > 0:
                mask = (rng.random(h.shape) >= spec.p) / (1.0 - spec.p)
                saved.append(mask)
                h = h * mask
            else:
                saved.append(None)
        elif k == "gaussian_noise":
            if train and spec.sigma > 0:
                h = h + spec.sigma * rng.standard_normal(h.shape)
            saved.append(None)
        elif k == "sigmoid":
            h = np.clip(sigmoid(h), OUTPUT_EPS, 1.0 - OUTPUT_EPS)
            saved.append(None)
    y_hat = h[0] if single else h
    if not train:
        return y_hat
    return y_hat, ForwardCache(id(model), model.version, saved, h, lengths, single)


def bce_loss(y, y_hat) -> np.ndarray | float:
    """Summed binary cross-entropy over keywords; one value per sample for batches."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise DimensionMismatch(f"target shape {y.shape} != prediction shape {y_hat.shape}")
    q = np.clip(y_hat, BCE_EPS, 1.0 - BCE_EPS)
    terms = -(y * np.log(q) + (1.0 - y) * np.log(1.0 - q))
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def backward(model: CnnModel, cache: ForwardCache, y, scale: float = 1.0, return_input_grad: bool = False):
    """Gradients of ``scale * sum over samples of bce_loss`` w.r.t. every parameter.

    Returns a list of dicts shaped like ``model.params`` (and the input
    gradient when ``return_input_grad``).
    """
    if cache.model_id != id(model) or cache.model_version != model.version:
        raise StaleActivations("activations were computed before the last parameter update")
    y = np.asarray(y, dtype=np.float64)
    if cache.single:
        y = y[None]
    y_hat = cache.y_hat
    if y.shape != y_hat.shape:
        raise DimensionMismatch(f"target shape {y.shape} != prediction shape {y_hat.shape}")
    inside = (y_hat > BCE_EPS) & (y_hat < 1.0 - BCE_EPS)
    g = np.where(inside, y_hat - y, 0.0) * scale

    grads: list[dict[str, np.ndarray]] = [dict() for _ in model.layers]
    for i in range(len(model.layers) - 1, -1, -1):
        spec, p, s = model.layers[i], model.params[i], cache.saved[i]
        k = spec.kind
        if k == "sigmoid":
            continue  # fused with the loss above
        if k == "dense":
            grads[i] = {"W": s.T @ g, "b": g.sum(axis=0)}
            g = g @ p["W"].T
        elif k == "dropout":
            if s is not None:
                g = g * s
        elif k == "leaky_relu":
            g = np.where(s, g, spec.alpha * g)
        elif k == "global_max_pool_time":
            arg, shape = s
            full = np.zeros(shape)
            np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
            g = full
        elif k == "conv1d":
            cols, in_shape = s
            B, T, C = in_shape
            F = spec.filters
            g2 = g.reshape(-1, F)
            grads[i] = {"W": (cols.T @ g2).reshape(spec.width, C, F), "b": g2.sum(axis=0)}
            if i == 0 and not return_input_grad:
                continue
            dcols = (g2 @ p["W"].reshape(-1, F).T).reshape(B, -1, spec.width, C)
            t_out = dcols.shape[1]
            dx = np.zeros(in_shape)
            span = spec.stride * (t_out - 1) + 1
            for j in range(spec.width):
                dx[:, j:j + span:spec.stride] += dcols[:, :, j]
            g = dx
        # gaussian_noise is additive: gradient passes through unchanged
    if return_input_grad:
        return grads, (g[0] if cache.single else g)
    return grads


# ---------------------------------------------------------------------------
# Adam with a linear learning-rate schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    total_steps: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[dict[str, np.ndarray]] = field(default_factory=list)
    v: list[dict[str, np.ndarray]] = field(default_factory=list)

    def lr(self, t: int | None = None) -> float:
        """Learning rate after ``t`` completed steps; reaches ``lr_end`` at ``total_steps``."""
        t = self.t if t is None else t
        frac = min(t / max(self.total_steps, 1), 1.0)
        return (1.0 - frac) * self.lr_start + frac * self.lr_end

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in ("lr_start", "lr_end", "total_steps", "beta1", "beta2", "eps", "t")}


def adam_init(params: Sequence[dict[str, np.ndarray]], **hyper) -> AdamState:
    state = AdamState(**hyper)
    state.m = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
    state.v = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
    return state


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update, in place. ``params`` may be a CnnModel."""
    model = params if isinstance(params, CnnModel) else None
    plist = model.params if model is not None else params
    if not state.m:
        fresh = adam_init(plist)
        state.m, state.v = fresh.m, fresh.v
    lr = state.lr()
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(plist, grads, state.m, state.v):
        for k in p:
            m[k] *= b1
            m[k] += (1.0 - b1) * g[k]
            v[k] *= b2
            v[k] += (1.0 - b2) * g[k] ** 2
            p[k] -= lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + state.eps)
    if model is not None:
        model.version += 1
    return params, state


# ---------------------------------------------------------------------------
# Model file
# ---------------------------------------------------------------------------


def _blobs(tensors: Sequence[dict[str, np.ndarray]]):
    for p in tensors:
        for k in sorted(p):
            yield p[k]


def encode_model(model: CnnModel, state: AdamState | None = None) -> bytes:
    header = {
        "layers": [l.to_dict() for l in model.layers],
        "input_dim": model.input_dim,
        "rng_seed": model.rng_seed,
        "meta": model.meta,
        "adam": state.hyper() if state is not None else None,
        "has_moments": bool(state is not None and state.m),
    }
    w = binfmt.Writer(MODEL_MAGIC, MODEL_VERSION)
    w.json(header)
    groups = [model.params]
    if header["has_moments"]:
        groups += [state.m, state.v]
    for group in groups:
        for a in _blobs(group):
            w.array(a, "f8")
    return w.finish()


def save_model(model: CnnModel, state: AdamState | None, path: str | Path) -> None:
    binfmt.atomic_write(path, encode_model(model, state))


def decode_model(data: bytes) -> tuple[CnnModel, AdamState | None]:
    _, r = binfmt.open_container(data, MODEL_MAGIC, MODEL_VERSION, CorruptModel)
    header = r.json()
    try:
        layers = [LayerSpec.from_dict(d) for d in header["layers"]]
        input_dim = int(header["input_dim"])
        shapes = _param_shapes(layers, input_dim)
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptModel(f"bad model header: {e}") from None

    def read_group():
        return [{k: r.array(int(np.prod(s[k])), "f8", s[k]) for k in sorted(s)} for s in shapes]

    params = read_group()
    state = None
    if header.get("adam") is not None:
        state = AdamState(**header["adam"])
        if header.get("has_moments"):
            state.m = read_group()
            state.v = read_group()
    r.expect_end()
    model = CnnModel(layers, params, input_dim, int(header.get("rng_seed", 0)), dict(header.get("meta") or {}))
    return model, state


def load_model(path: str | Path) -> tuple[CnnModel, AdamState | None]:
    return decode_model(Path(path).read_bytes())


def predict(model: CnnModel, seqs: Sequence, batch_size: int = 64) -> np.ndarray:
    """Eval-mode outputs for many variable-length sequences, shape ``(M, L)``.

    Sequences are bucketed by length so padding stays small; the result is
    in input order.
    """
    order = np.argsort([len(s) for s in seqs], kind="stable")
    out = np.empty((len(seqs), model.n_outputs))
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        x, lengths = pad_batch([seqs[i] for i in idx])
        out[idx] = forward(model, x, "eval", lengths=lengths)
    return out
