"""Dense numpy engine: reduction MLP, GraphSAGE over fixed-shape ego-graphs,
soft-label cross-entropy, reverse-mode gradients and Adam.

Weights follow the ``[d_out, d_in]`` convention, so a layer computes
``x @ W.T + b`` on row-major batches.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .ego import EgoShape

ACTIVATIONS = ("relu", "identity")
LOG_CLAMP = 1e-12


class NumericalError(FloatingPointError):
    """A forward or backward pass produced non-finite values."""


def _check_activation(kind: str) -> None:
    if kind not in ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; choose from {ACTIVATIONS}")


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else z


def _act_grad(z: np.ndarray, upstream: np.ndarray, kind: str) -> np.ndarray:
    return upstream * (z > 0.0) if kind == "relu" else upstream


def _finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {where}")
    return x


@dataclass
class ReductionParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        _check_activation(self.activation)
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"reduction layer {i} input dim does not match layer {i - 1} output")

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"reduction.weight.{i}"] = w
            out[f"reduction.bias.{i}"] = b
        return out

    def copy(self) -> ReductionParams:
        return ReductionParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def zeros_like(self) -> ReductionParams:
        return ReductionParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases],
                               self.activation)


@dataclass
class PersonalizationParams:
    sage_weights: list[np.ndarray]
    classifier_weight: np.ndarray
    classifier_bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        _check_activation(self.activation)
        dims = [w.shape for w in self.sage_weights] + [self.classifier_weight.shape]
        for i in range(1, len(dims)):
            if dims[i][1] != dims[i - 1][0]:
                raise ValueError(f"personalization layer {i} input dim does not match layer {i - 1} output")

    @property
    def depth(self) -> int:
        return len(self.sage_weights)

    @property
    def in_dim(self) -> int:
        return self.sage_weights[0].shape[1] if self.sage_weights else self.classifier_weight.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"personalization.sage.{i}": w for i, w in enumerate(self.sage_weights)}
        out["personalization.classifier.weight"] = self.classifier_weight
        out["personalization.classifier.bias"] = self.classifier_bias
        return out

    def copy(self) -> PersonalizationParams:
        return PersonalizationParams([w.copy() for w in self.sage_weights], self.classifier_weight.copy(),
                                     self.classifier_bias.copy(), self.activation)

    def zeros_like(self) -> PersonalizationParams:
        return PersonalizationParams([np.zeros_like(w) for w in self.sage_weights],
                                     np.zeros_like(self.classifier_weight), np.zeros_like(self.classifier_bias),
                                     self.activation)


@dataclass
class ModelParams:
    reduction: ReductionParams
    personalization: PersonalizationParams

    def __post_init__(self):
        if self.reduction.out_dim != self.personalization.in_dim:
            raise ValueError(
                f"reduction output dim {self.reduction.out_dim} != personalization input dim "
                f"{self.personalization.in_dim}"
            )

    def tensors(self) -> dict[str, np.ndarray]:
        return {**self.reduction.tensors(), **self.personalization.tensors()}

    def copy(self) -> ModelParams:
        return ModelParams(self.reduction.copy(), self.personalization.copy())

    def zeros_like(self) -> ModelParams:
        return ModelParams(self.reduction.zeros_like(), self.personalization.zeros_like())


# gradients mirror the parameter containers exactly
Gradients = ModelParams


def num_parameters(params) -> int:
    return sum(t.size for t in params.tensors().values())


def param_bytes(params) -> int:
    """Wire size with 32-bit floats."""
    return 4 * num_parameters(params)


def _glorot(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_out, d_in))


def init_model(
    in_dim: int,
    num_classes: int,
    rng: np.random.Generator,
    reduction_dim: int = 64,
    hidden_dim: int = 64,
    depth: int = 2,
    reduction_layers: int = 1,
    activation: str = "relu",
    reduction_activation: str = "relu",
) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    if reduction_layers < 1:
        raise ValueError("need at least one reduction layer")
    dims = [in_dim] + [reduction_dim] * reduction_layers
    red = ReductionParams(
        [_glorot(rng, dims[i + 1], dims[i]) for i in range(reduction_layers)],
        [np.zeros(dims[i + 1]) for i in range(reduction_layers)],
        reduction_activation,
    )
    sage_dims = [reduction_dim] + [hidden_dim] * depth
    pers = PersonalizationParams(
        [_glorot(rng, sage_dims[i + 1], sage_dims[i]) for i in range(depth)],
        _glorot(rng, num_classes, sage_dims[-1]),
        np.zeros(num_classes),
        activation,
    )
    return ModelParams(red, pers)


# ---------------------------------------------------------------- forward passes


def _matmul_t(x, w: np.ndarray) -> np.ndarray:
    """``x @ w.T`` for dense or scipy-sparse ``x``."""
    out = x @ w.T
    return np.asarray(out)


def _reduction_forward_cached(params: ReductionParams, features):
    if features.shape[1] != params.in_dim:
        raise ValueError(f"feature dim {features.shape[1]} != reduction input dim {params.in_dim}")
    inputs, pre = [features], []
    h = features
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = _finite(_matmul_t(h, w) + b, f"reduction layer {i}")
        pre.append(z)
        h = _act(z, params.activation)
        inputs.append(h)
    return h, (inputs, pre)


def reduction_forward(params: ReductionParams, features) -> np.ndarray:
    return _reduction_forward_cached(params, features)[0]


def _reduction_backward(params: ReductionParams, cache, d_out: np.ndarray) -> ReductionParams:
    inputs, pre = cache
    grads = params.zeros_like()
    g = d_out
    for i in reversed(range(len(params.weights))):
        dz = _act_grad(pre[i], g, params.activation)
        x = inputs[i]
        if sp.issparse(x):
            grads.weights[i] = np.asarray((x.T @ dz).T)
        else:
            grads.weights[i] = dz.T @ x
        grads.biases[i] = dz.sum(axis=0)
        if i:
            g = dz @ params.weights[i]
    return grads


class SageCache(NamedTuple):
    inputs: list  # aggregated inputs per layer, [B, V_l, d_in]
    pre: list  # pre-activations per layer, [B, V_l, d_out]
    center: np.ndarray  # [B, d_h]


def sage_forward_batch(params: PersonalizationParams, position_embeddings: np.ndarray, shape: EgoShape):
    """GraphSAGE (mean aggregator, shared self/neighbor weight) over a batch ``[B, S, d]``.

    After layer ``l`` only positions within ``k - l`` hops of the center are
    kept, so the final layer leaves the center alone. Returns center logits
    ``[B, C]`` and the cache needed by :func:`sage_backward`.
    """
    h = np.asarray(position_embeddings, dtype=np.float64)
    if h.ndim == 2:
        h = h[None]
    if h.shape[1] != shape.size or h.shape[2] != params.in_dim:
        raise ValueError(f"expected [B, {shape.size}, {params.in_dim}] embeddings, got {h.shape}")
    if params.depth != shape.k:
        raise ValueError(f"model has {params.depth} GraphSAGE layers but ego-graphs have k={shape.k}")
    b, n = h.shape[0], shape.n
    inputs, pre = [], []
    for l, w in enumerate(params.sage_weights, start=1):
        keep = shape.prefix_size(shape.k - l)
        # children of positions [0, keep) are exactly positions [1, prefix(k-l+1))
        child_mean = h[:, 1 : 1 + keep * n].reshape(b, keep, n, -1).mean(axis=2)
        a = h[:, :keep] + child_mean
        z = _finite(a @ w.T, f"sage layer {l}")
        inputs.append(a)
        pre.append(z)
        h = _act(z, params.activation)
    center = h[:, 0]
    logits = _finite(center @ params.classifier_weight.T + params.classifier_bias, "classifier")
    return logits, SageCache(inputs, pre, center)


def sage_forward_ego(params: PersonalizationParams, position_embeddings: np.ndarray, shape: EgoShape):
    """Single ego-graph ``[S, d_r]`` → (center logits ``[C]``, center embedding ``[d_h]``)."""
    logits, cache = sage_forward_batch(params, position_embeddings[None], shape)
    return logits[0], cache.center[0]


def sage_backward(params: PersonalizationParams, cache: SageCache, d_logits: np.ndarray, shape: EgoShape):
    """Gradients of the personalization layers and of the input position embeddings."""
    grads = params.zeros_like()
    grads.classifier_weight = d_logits.T @ cache.center
    grads.classifier_bias = d_logits.sum(axis=0)
    b, n = d_logits.shape[0], shape.n
    d_h = np.zeros((b, 1, cache.center.shape[1]))
    d_h[:, 0] = d_logits @ params.classifier_weight
    for l in range(params.depth, 0, -1):
        w = params.sage_weights[l - 1]
        dz = _act_grad(cache.pre[l - 1], d_h, params.activation)
        a = cache.inputs[l - 1]
        grads.sage_weights[l - 1] = dz.reshape(-1, dz.shape[-1]).T @ a.reshape(-1, a.shape[-1])
        da = dz @ w
        keep = da.shape[1]
        prev = shape.prefix_size(shape.k - l + 1)
        d_prev = np.zeros((b, prev, da.shape[-1]))
        d_prev[:, :keep] += da
        d_prev[:, 1 : 1 + keep * n] += np.repeat(da / n, n, axis=1)
        d_h = d_prev
    return grads, d_h


# ---------------------------------------------------------------- losses


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_cross_entropy(logits: np.ndarray, soft_targets: np.ndarray) -> float:
    """Mean over rows of ``-sum_c y_c log softmax(logits)_c`` (log clamped at 1e-12)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    soft_targets = np.atleast_2d(np.asarray(soft_targets, dtype=np.float64))
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite logits")
    if logits.shape != soft_targets.shape:
        raise ValueError(f"logits {logits.shape} and targets {soft_targets.shape} differ")
    p = np.maximum(softmax(logits), LOG_CLAMP)
    return float(-(soft_targets * np.log(p)).sum(axis=1).mean())


def _loss_and_dlogits(logits: np.ndarray, targets: np.ndarray):
    loss = soft_cross_entropy(logits, targets)
    d_logits = (softmax(logits) * targets.sum(axis=1, keepdims=True) - targets) / logits.shape[0]
    return loss, d_logits


# ---------------------------------------------------------------- full model


class BatchResult(NamedTuple):
    loss: float
    grads: ModelParams
    position_embeddings: np.ndarray  # [B, S, d_r], reduction outputs before the update


def gather_reduction(params: ReductionParams, features, node_at: np.ndarray):
    """Reduction embeddings for every position of ``node_at`` ``[B, S]``.

    Each distinct node is encoded once.
    """
    unique, inverse = np.unique(node_at, return_inverse=True)
    inverse = inverse.reshape(node_at.shape)
    rows = features[unique]
    emb, cache = _reduction_forward_cached(params, rows)
    return emb[inverse], (unique, inverse, cache)


def model_backward(
    model: ModelParams,
    features,
    node_at: np.ndarray,
    targets: np.ndarray,
    shape: EgoShape,
) -> BatchResult:
    """Loss on the center nodes and exact gradients for every parameter.

    ``features`` is the full feature matrix (dense or CSR); ``node_at`` holds
    the sampled ego-graphs ``[B, S]``; ``targets`` are center label rows ``[B, C]``.
    """
    node_at = np.atleast_2d(node_at)
    if node_at.shape[0] == 0:
        raise ValueError("empty batch")
    pos_emb, (unique, inverse, red_cache) = gather_reduction(model.reduction, features, node_at)
    logits, sage_cache = sage_forward_batch(model.personalization, pos_emb, shape)
    loss, d_logits = _loss_and_dlogits(logits, np.atleast_2d(targets))
    p_grads, d_pos = sage_backward(model.personalization, sage_cache, d_logits, shape)
    d_flat = d_pos.reshape(-1, d_pos.shape[-1])
    scatter = sp.csr_matrix(
        (np.ones(d_flat.shape[0]), (inverse.ravel(), np.arange(d_flat.shape[0]))),
        shape=(unique.shape[0], d_flat.shape[0]),
    )
    d_unique = np.asarray(scatter @ d_flat)
    r_grads = _reduction_backward(model.reduction, red_cache, d_unique)
    grads = ModelParams(r_grads, p_grads)
    for name, g in grads.tensors().items():
        _finite(g, f"gradient of {name}")
    return BatchResult(loss, grads, pos_emb)


def personalization_backward(params: PersonalizationParams, position_embeddings: np.ndarray,
                             targets: np.ndarray, shape: EgoShape):
    """Server-side step: loss and gradients of the personalization layers alone."""
    logits, cache = sage_forward_batch(params, position_embeddings, shape)
    loss, d_logits = _loss_and_dlogits(logits, np.atleast_2d(targets))
    grads, _ = sage_backward(params, cache, d_logits, shape)
    return loss, grads


def model_logits(model: ModelParams, features, node_at: np.ndarray, shape: EgoShape) -> np.ndarray:
    pos_emb, _ = gather_reduction(model.reduction, features, np.atleast_2d(node_at))
    return sage_forward_batch(model.personalization, pos_emb, shape)[0]


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _congruent(params: dict, grads: dict) -> None:
    if params.keys() != grads.keys():
        raise ValueError(f"tensor names differ: {sorted(params)} vs {sorted(grads)}")
    for name, p in params.items():
        if p.shape != grads[name].shape:
            raise ValueError(f"shape mismatch for {name}: {p.shape} vs {grads[name].shape}")


def adam_step(state: AdamState, params, grads) -> None:
    """Bias-corrected Adam update applied in place to ``params``' tensors."""
    p_t, g_t = params.tensors(), grads.tensors()
    _congruent(p_t, g_t)
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, p in p_t.items():
        g = g_t[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.lr:
            p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------- parameter arithmetic


def _assign(template, values: dict[str, np.ndarray]):
    out = template.copy()
    for name, t in out.tensors().items():
        t[...] = values[name]
    return out


def average_params(all_params: list):
    """Coordinate-wise mean, accumulated in list order."""
    if not all_params:
        raise ValueError("cannot average an empty parameter list")
    first = all_params[0].tensors()
    acc = {name: t.copy() for name, t in first.items()}
    for other in all_params[1:]:
        o = other.tensors()
        _congruent(acc, o)
        for name in acc:
            acc[name] += o[name]
    n = len(all_params)
    return _assign(all_params[0], {name: t / n for name, t in acc.items()})


def average_reduction(all_clients: list[ReductionParams]) -> ReductionParams:
    return average_params(all_clients)


def mix_personalization(local: PersonalizationParams, global_p: PersonalizationParams,
                        lam: float) -> PersonalizationParams:
    """``lam * global + (1 - lam) * local``, elementwise."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixing coefficient {lam} outside [0, 1]")
    lt, gt = local.tensors(), global_p.tensors()
    _congruent(lt, gt)
    return _assign(local, {name: lam * gt[name] + (1.0 - lam) * lt[name] for name in lt})


class Divergence(NamedTuple):
    value: float
    skipped: int

    def __float__(self) -> float:
        return self.value


def weight_divergence(local: PersonalizationParams, global_p: PersonalizationParams,
                      mode: str = "relative") -> Divergence:
    """Flattened 2-norm of ``(local - global) / global`` (relative) or ``local - global``.

    In relative mode, entries with ``|global| < 1e-12`` are skipped and counted.
    """
    lt, gt = local.tensors(), global_p.tensors()
    _congruent(lt, gt)
    diff = np.concatenate([(lt[k] - gt[k]).ravel() for k in lt])
    if mode == "absolute":
        return Divergence(float(np.linalg.norm(diff)), 0)
    if mode != "relative":
        raise ValueError(f"unknown divergence mode {mode!r}")
    denom = np.concatenate([gt[k].ravel() for k in lt])
    ok = np.abs(denom) >= 1e-12
    return Divergence(float(np.linalg.norm(diff[ok] / denom[ok])), int((~ok).sum()))


def param_distance(a, b) -> float:
    at, bt = a.tensors(), b.tensors()
    _congruent(at, bt)
    return float(math.sqrt(sum(float(np.sum((at[k] - bt[k]) ** 2)) for k in at)))


# ---------------------------------------------------------------- gradient check


def _relu_pattern(model: ModelParams, features, node_at: np.ndarray, shape: EgoShape) -> np.ndarray:
    """Signs of every pre-activation that passes through a ReLU."""
    pos_emb, (_, _, (_, red_pre)) = gather_reduction(model.reduction, features, np.atleast_2d(node_at))
    _, cache = sage_forward_batch(model.personalization, pos_emb, shape)
    parts = []
    if model.reduction.activation == "relu":
        parts += [z > 0 for z in red_pre]
    if model.personalization.activation == "relu":
        parts += [z > 0 for z in cache.pre]
    return np.concatenate([p.ravel() for p in parts]) if parts else np.zeros(0, dtype=bool)


def finite_difference_gradcheck(
    model: ModelParams,
    features,
    node_at: np.ndarray,
    targets: np.ndarray,
    shape: EgoShape,
    step: float = 1e-4,
    tolerance: float = 1e-4,
) -> dict:
    """Compare analytic gradients to central differences, coordinate by coordinate.

    Per tensor, the error is ``max |analytic - numeric|`` divided by the
    tensor's largest gradient magnitude (either route), so tiny entries are
    judged at the scale of their tensor.

    A coordinate whose ``+step`` or ``-step`` probe flips the sign of some ReLU
    input straddles a kink, where the central difference does not estimate
    the derivative; such coordinates are left out of the error and counted
    under ``kinks``.
    """
    analytic = model_backward(model, features, node_at, targets, shape).grads.tensors()
    probe = model.copy()
    base_pattern = _relu_pattern(model, features, node_at, shape)
    errors, kinks = {}, {}
    for name, t in probe.tensors().items():
        numeric = np.zeros_like(t)
        valid = np.ones(t.shape, dtype=bool)
        flat, nflat, vflat = t.reshape(-1), numeric.reshape(-1), valid.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = model_backward(probe, features, node_at, targets, shape).loss
            up_ok = np.array_equal(_relu_pattern(probe, features, node_at, shape), base_pattern)
            flat[i] = orig - step
            down = model_backward(probe, features, node_at, targets, shape).loss
            down_ok = np.array_equal(_relu_pattern(probe, features, node_at, shape), base_pattern)
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * step)
            vflat[i] = up_ok and down_ok
        a = analytic[name]
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        err = np.abs(a - numeric)[valid].max(initial=0.0)
        errors[name] = 0.0 if scale == 0.0 else float(err / scale)
        kinks[name] = int((~valid).sum())
    worst = max(errors.values(), default=0.0)
    return {"errors": errors, "kinks": kinks, "max_error": worst, "passed": bool(worst < tolerance)}


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"FEGO"
CHECKPOINT_VERSION = 1


def save_checkpoint(params, path: str | Path) -> None:
    tensors = params.tensors()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + ln].decode("utf-8")
        off += ln
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float64)
        off += 4 * size
    return out


def load_checkpoint(path: str | Path, template):
    """Load tensors into a copy of ``template`` (which fixes structure and activations)."""
    values = read_checkpoint(path)
    expected = template.tensors()
    if values.keys() != expected.keys():
        raise ValueError(f"{path}: tensor names do not match the template")
    return _assign(template, values)
