"""Deterministic toy-training harness with hand-coded gradients.

Small frozen-base models (linear or conv2d layers, tanh between them, last
layer linear) are trained on fixed data with only the adapter factors as
trainable parameters. Everything is written out explicitly: forward pass,
backprop through every factor tensor (Tucker cores included), and the three
optimizers. The point is exactness, not speed; this module backs the
merge-ratio equivalence check, the homogeneity check, and finite-difference
gradient verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import adapters
from .adapters import (
    LayerShape,
    LohaAdapter,
    LokrAdapter,
    LoraAdapter,
    MergeScale,
)
from .tensor_core import NumericalError, as_tensor

__all__ = [
    "OPTIMIZERS",
    "HARNESS_ALGORITHMS",
    "HarnessAlgo",
    "OptimizerConfig",
    "ToyLayer",
    "ToyModel",
    "TrainTrace",
    "mse_loss",
    "model_forward",
    "model_loss",
    "loss_and_grads",
    "adapter_grads",
    "homogeneity_degree",
    "train",
    "homogeneity_check",
    "verify_merge_ratio",
    "gradient_check",
    "build_toy_model",
    "toy_dataset",
]

OPTIMIZERS = ("sgd", "adam", "adagrad")

# learning-rate exponent in the equivalence: ratio s demands lr * s^(c/k)
C_EXPONENT = {"sgd": 2, "adam": 1, "adagrad": 1}

BASE_LR = {"sgd": 0.01, "adam": 0.02, "adagrad": 0.02}

# initial reconstructed-delta RMS in toy models; keeps large merge ratios in
# the stable regime without freezing the factors
INIT_DELTA_RMS = 0.02

LINEAR_DIMS = (16, 12, 8)
LINEAR_SAMPLES = 64
CONV_CHANNELS = (4, 8, 4)
CONV_KERNEL = 3
CONV_IMAGE = 8
CONV_SAMPLES = 16


@dataclass(frozen=True)
class HarnessAlgo:
    """One named adapter configuration the harness knows how to train."""

    algorithm: str
    tucker: bool
    conv: bool
    dim: int
    factor: int


HARNESS_ALGORITHMS = {
    "lora": HarnessAlgo("lora", tucker=False, conv=False, dim=4, factor=-1),
    "loha": HarnessAlgo("loha", tucker=False, conv=False, dim=4, factor=-1),
    "lokr": HarnessAlgo("lokr", tucker=False, conv=False, dim=4, factor=4),
    "lokr-factored": HarnessAlgo("lokr", tucker=False, conv=False, dim=2, factor=4),
    "lora-tucker": HarnessAlgo("lora", tucker=True, conv=True, dim=3, factor=-1),
    "loha-tucker": HarnessAlgo("loha", tucker=True, conv=True, dim=2, factor=-1),
    "lokr-tucker": HarnessAlgo("lokr", tucker=True, conv=True, dim=2, factor=4),
}


@dataclass(frozen=True)
class OptimizerConfig:
    """Optimizer kind plus hyperparameters; learning_rate may be per layer."""

    kind: str
    learning_rate: float | tuple[float, ...]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}, expected one of {OPTIMIZERS}")
        rates = self.learning_rate if isinstance(self.learning_rate, tuple) else (self.learning_rate,)
        for lr in rates:
            if not math.isfinite(lr) or lr < 0:
                raise ValueError(f"learning rate must be finite and >= 0, got {lr}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps < 0 or self.weight_decay < 0:
            raise ValueError("eps and weight_decay must be non-negative")

    def rate_for(self, layer_index: int, n_layers: int) -> float:
        if isinstance(self.learning_rate, tuple):
            if len(self.learning_rate) != n_layers:
                raise ValueError(
                    f"{len(self.learning_rate)} learning rates for {n_layers} layers"
                )
            return self.learning_rate[layer_index]
        return self.learning_rate


@dataclass
class ToyLayer:
    base_weight: np.ndarray
    base_bias: np.ndarray
    adapter: adapters.Adapter
    activation: bool


@dataclass
class ToyModel:
    layers: list[ToyLayer]


@dataclass
class TrainTrace:
    """Per-step loss and post-update reconstructed deltas per layer."""

    losses: list[float] = field(default_factory=list)
    deltas: list[list[np.ndarray]] = field(default_factory=list)


def mse_loss(pred, target) -> float:
    """Mean of squared elementwise error over every array element."""
    pm, tm = as_tensor(pred), as_tensor(target)
    if pm.shape != tm.shape:
        raise ValueError(f"prediction shape {pm.shape} != target shape {tm.shape}")
    diff = pm - tm
    return float(np.mean(diff * diff))


def homogeneity_degree(adapter) -> int:
    """Number of factor tensors: scaling all by c scales the delta by c^k."""
    return len(adapter.tensors())


# ---------------------------------------------------------------------------
# batched forward / backward


def _conv_batch(kernel: np.ndarray, x: np.ndarray) -> np.ndarray:
    k = kernel.shape[2]
    windows = sliding_window_view(x, (k, k), axis=(2, 3))
    return np.einsum("oiab,nihwab->nohw", kernel, windows, optimize=True)


def _conv_weight_grad(dz: np.ndarray, x: np.ndarray, k: int) -> np.ndarray:
    windows = sliding_window_view(x, (k, k), axis=(2, 3))
    return np.einsum("nohw,nihwab->oiab", dz, windows, optimize=True)


def _conv_input_grad(dz: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    k = kernel.shape[2]
    pad = k - 1
    dzp = np.pad(dz, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    flipped = kernel[:, :, ::-1, ::-1]
    windows = sliding_window_view(dzp, (k, k), axis=(2, 3))
    return np.einsum("ocab,noijab->ncij", flipped, windows, optimize=True)


def _effective_weight(layer: ToyLayer) -> np.ndarray:
    return layer.base_weight + layer.adapter.scale.gamma * adapters.reconstruct(layer.adapter)


def model_forward(model: ToyModel, x) -> np.ndarray:
    """Batched forward pass; x is (n, in) or (n, in, H, W)."""
    h = as_tensor(x)
    for layer in model.layers:
        w_eff = _effective_weight(layer)
        if layer.adapter.layer.kind == "linear":
            z = h @ w_eff.T + layer.base_bias
        else:
            z = _conv_batch(w_eff, h) + layer.base_bias[None, :, None, None]
        h = np.tanh(z) if layer.activation else z
    return h


def model_loss(model: ToyModel, x, target) -> float:
    return mse_loss(model_forward(model, x), target)


def _tucker_grads(g4, core, up, down):
    # delta[o,i,a,b] = sum_{s,t} core[s,t,a,b] * up[o,s] * down[t,i]
    dcore = np.einsum("oiab,os,ti->stab", g4, up, down, optimize=True)
    dup = np.einsum("oiab,stab,ti->os", g4, core, down, optimize=True)
    ddown = np.einsum("oiab,stab,os->ti", g4, core, up, optimize=True)
    return dcore, dup, ddown


def _lora_like_grads(g, up, down, core):
    """Gradients for a single up/down(/core) product chain; g is delta-shaped."""
    if core is not None:
        dcore, dup, ddown = _tucker_grads(g, core, up, down)
        return {"up": dup, "down": ddown, "core": dcore}
    if g.ndim == 2:
        return {"up": g @ down.T, "down": up.T @ g}
    g2 = g.reshape(g.shape[0], -1)
    d2 = down.reshape(down.shape[0], -1)
    return {"up": g2 @ d2.T, "down": (up.T @ g2).reshape(down.shape)}


def adapter_grads(adapter, g) -> dict[str, np.ndarray]:
    """Factor gradients given g = dL/d(delta), with delta = reconstruct(adapter)."""
    gm = np.asarray(g, dtype=np.float64)
    if gm.shape != adapter.layer.delta_shape:
        raise ValueError(f"gradient shape {gm.shape} != delta shape {adapter.layer.delta_shape}")
    if isinstance(adapter, LoraAdapter):
        return _lora_like_grads(gm, adapter.up, adapter.down, adapter.core)
    if isinstance(adapter, LohaAdapter):
        b1 = adapters.reconstruct(LoraAdapter(adapter.layer, adapter.scale,
                                              adapter.up1, adapter.down1, adapter.core1))
        b2 = adapters.reconstruct(LoraAdapter(adapter.layer, adapter.scale,
                                              adapter.up2, adapter.down2, adapter.core2))
        g1 = _lora_like_grads(gm * b2, adapter.up1, adapter.down1, adapter.core1)
        g2 = _lora_like_grads(gm * b1, adapter.up2, adapter.down2, adapter.core2)
        out = {f"{k}1": v for k, v in g1.items()}
        out.update({f"{k}2": v for k, v in g2.items()})
        return out
    if isinstance(adapter, LokrAdapter):
        u_p, v_p, u_q, v_q = adapter.block_dims
        kk = adapter.layer.kernel
        if adapter.layer.kind == "linear":
            g_blocks = gm.reshape(u_p, v_p, u_q, v_q)
            spec_c, spec_r = "ipjq,pq->ij", "ipjq,ij->pq"
        else:
            g_blocks = gm.reshape(u_p, v_p, u_q, v_q, kk, kk)
            spec_c, spec_r = "ipjqab,pqab->ij", "ipjqab,ij->pqab"
        if adapter.w2 is not None:
            right = adapter.w2
        else:
            block_layer = LayerShape(adapter.layer.kind, v_p, v_q,
                                     kk if adapter.layer.kind == "conv2d" else 1)
            right = adapters.reconstruct(
                LoraAdapter(block_layer, adapter.scale, adapter.up, adapter.down, adapter.core))
        dc = np.einsum(spec_c, g_blocks, right, optimize=True)
        dright = np.einsum(spec_r, g_blocks, adapter.c, optimize=True)
        if adapter.w2 is not None:
            return {"c": dc, "w2": dright}
        out = _lora_like_grads(dright, adapter.up, adapter.down, adapter.core)
        out["c"] = dc
        return out
    raise TypeError(f"not an adapter: {type(adapter).__name__}")


def loss_and_grads(model: ToyModel, x, target):
    """MSE loss and hand-derived gradients of every adapter factor.

    Returns (loss, grads) where grads[i] maps the i-th layer's factor roles
    to arrays shaped like the factors themselves.
    """
    xm, tm = as_tensor(x), as_tensor(target)
    inputs = []
    acts = []
    h = xm
    for layer in model.layers:
        w_eff = _effective_weight(layer)
        if layer.adapter.layer.kind == "linear":
            z = h @ w_eff.T + layer.base_bias
        else:
            z = _conv_batch(w_eff, h) + layer.base_bias[None, :, None, None]
        a = np.tanh(z) if layer.activation else z
        inputs.append((h, w_eff))
        acts.append(a)
        h = a
    if h.shape != tm.shape:
        raise ValueError(f"prediction shape {h.shape} != target shape {tm.shape}")
    diff = h - tm
    loss = float(np.mean(diff * diff))
    d = (2.0 / diff.size) * diff
    grads: list[dict[str, np.ndarray]] = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        h_in, w_eff = inputs[i]
        if layer.activation:
            a = acts[i]
            d = d * (1.0 - a * a)
        if layer.adapter.layer.kind == "linear":
            g_w = d.T @ h_in
            d = d @ w_eff
        else:
            g_w = _conv_weight_grad(d, h_in, layer.adapter.layer.kernel)
            d = _conv_input_grad(d, w_eff)
        grads[i] = adapter_grads(layer.adapter, layer.adapter.scale.gamma * g_w)
    return loss, grads


# ---------------------------------------------------------------------------
# optimizers


class _Optimizer:
    def __init__(self, cfg: OptimizerConfig, n_layers: int):
        self.cfg = cfg
        self.n_layers = n_layers
        self.t = 0

    def begin_step(self):
        self.t += 1

    def _direction(self, key, g):
        raise NotImplementedError

    def update(self, layer_index: int, role: str, p: np.ndarray, g: np.ndarray) -> np.ndarray:
        lr = self.cfg.rate_for(layer_index, self.n_layers)
        step = self._direction((layer_index, role), g)
        new = p - lr * step
        if self.cfg.weight_decay:
            new = new - lr * self.cfg.weight_decay * p
        return new


class _Sgd(_Optimizer):
    def _direction(self, key, g):
        return g


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # den == 0 implies num == 0 (moments of all-zero gradients); treat as no-op
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


class _Adam(_Optimizer):
    def __init__(self, cfg, n_layers):
        super().__init__(cfg, n_layers)
        self.m: dict = {}
        self.v: dict = {}

    def _direction(self, key, g):
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        m = self.m.get(key)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        else:
            v = self.v[key]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        self.m[key], self.v[key] = m, v
        m_hat = m / (1 - b1 ** self.t)
        v_hat = v / (1 - b2 ** self.t)
        return _safe_ratio(m_hat, np.sqrt(v_hat) + self.cfg.eps)


class _Adagrad(_Optimizer):
    def __init__(self, cfg, n_layers):
        super().__init__(cfg, n_layers)
        self.acc: dict = {}

    def _direction(self, key, g):
        acc = self.acc.get(key)
        acc = g * g if acc is None else acc + g * g
        self.acc[key] = acc
        return _safe_ratio(g, np.sqrt(acc) + self.cfg.eps)


_OPTIMIZER_TYPES = {"sgd": _Sgd, "adam": _Adam, "adagrad": _Adagrad}


# ---------------------------------------------------------------------------
# model building and training


def _algorithm_of(adapter) -> str:
    return {LoraAdapter: "lora", LohaAdapter: "loha", LokrAdapter: "lokr"}[type(adapter)]


def _seed_seq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def _reinit(adapter, seed):
    tucker = getattr(adapter, "core", None) is not None or getattr(adapter, "core1", None) is not None
    factor = getattr(adapter, "factor", -1)
    return adapters.random_adapter(_algorithm_of(adapter), adapter.layer,
                                   adapter.scale.dim, adapter.scale.alpha,
                                   factor, tucker, seed)


def toy_geometry(conv: bool) -> list[tuple[LayerShape, bool]]:
    """Default layer stack: every layer tanh-activated except the last."""
    if conv:
        dims = CONV_CHANNELS
        shapes = [LayerShape("conv2d", dims[i + 1], dims[i], CONV_KERNEL)
                  for i in range(len(dims) - 1)]
    else:
        dims = LINEAR_DIMS
        shapes = [LayerShape("linear", dims[i + 1], dims[i]) for i in range(len(dims) - 1)]
    return [(shape, i < len(shapes) - 1) for i, shape in enumerate(shapes)]


def toy_dataset(conv: bool, seed=0, samples: int | None = None):
    """Fixed standard-normal (x, target) pairs matching the toy geometry."""
    rng = np.random.default_rng(seed)
    if conv:
        n = CONV_SAMPLES if samples is None else samples
        spatial = CONV_IMAGE
        out_spatial = spatial - 2 * (CONV_KERNEL - 1)
        x = rng.standard_normal((n, CONV_CHANNELS[0], spatial, spatial))
        y = rng.standard_normal((n, CONV_CHANNELS[-1], out_spatial, out_spatial))
    else:
        n = LINEAR_SAMPLES if samples is None else samples
        x = rng.standard_normal((n, LINEAR_DIMS[0]))
        y = rng.standard_normal((n, LINEAR_DIMS[-1]))
    return x, y


def build_toy_model(name: str, seed=0, ratio: float = 1.0) -> ToyModel:
    """Toy model for a named harness algorithm, every factor random (nonzero).

    The adapter merge ratio is set to `ratio` via alpha = ratio * dim; base
    weights and biases are frozen draws from the same seed.
    """
    spec = HARNESS_ALGORITHMS[name]
    geometry = toy_geometry(spec.conv)
    ss = _seed_seq(seed).spawn(len(geometry) + 1)
    base_rng = np.random.default_rng(ss[0])
    layers = []
    for (shape, act), child in zip(geometry, ss[1:]):
        fan_in = shape.unrolled_in
        w0 = base_rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape.delta_shape)
        b0 = base_rng.normal(0.0, 0.05, size=(shape.out_dim,))
        ad = adapters.random_adapter(spec.algorithm, shape, spec.dim,
                                     alpha=ratio * spec.dim, factor=spec.factor,
                                     tucker=spec.tucker, seed=child)
        # normalize the starting delta to a fixed small RMS; the k-th root
        # spreads the correction evenly over the factor tensors
        rms = float(np.sqrt(np.mean(adapters.reconstruct(ad) ** 2)))
        k = homogeneity_degree(ad)
        ad = adapters.scale_factors(ad, (INIT_DELTA_RMS / max(rms, 1e-300)) ** (1.0 / k))
        layers.append(ToyLayer(w0, b0, ad, act))
    return ToyModel(layers)


def train(model: ToyModel, optimizer: OptimizerConfig, dataset, steps: int,
          seed=None) -> TrainTrace:
    """Full-batch training of the adapter factors; the base stays frozen.

    The input model is not mutated. With `seed` given, every adapter is
    re-drawn (all factors random) before training. Raises NumericalError if
    the loss goes non-finite, reporting the step index.
    """
    if steps < 1:
        raise ValueError(f"steps must be positive, got {steps}")
    x, y = dataset
    layers = [ToyLayer(l.base_weight, l.base_bias, l.adapter, l.activation)
              for l in model.layers]
    work = ToyModel(layers)
    if seed is not None:
        children = _seed_seq(seed).spawn(len(work.layers))
        for layer, child in zip(work.layers, children):
            layer.adapter = _reinit(layer.adapter, child)
    opt = _OPTIMIZER_TYPES[optimizer.kind](optimizer, len(work.layers))
    trace = TrainTrace()
    for step_index in range(1, steps + 1):
        loss, grads = loss_and_grads(work, x, y)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {step_index}")
        opt.begin_step()
        for li, layer in enumerate(work.layers):
            new = {role: opt.update(li, role, p, grads[li][role])
                   for role, p in layer.adapter.tensors().items()}
            layer.adapter = adapters.with_tensors(layer.adapter, new)
        trace.losses.append(loss)
        trace.deltas.append([adapters.reconstruct(l.adapter) for l in work.layers])
    return trace


def homogeneity_check(algorithm: str, c: float = 2.0, trials: int = 100, seed=0) -> float:
    """Max relative deviation of reconstruct(c * factors) from c^k * reconstruct.

    k is the number of factor tensors (2 for lora and unfactored lokr, 3 for
    factored lokr and Tucker lora, 4 for loha). Exact in real arithmetic, so
    the deviation is rounding noise.
    """
    spec = HARNESS_ALGORITHMS[algorithm]
    shapes = [shape for shape, _ in toy_geometry(spec.conv)]
    worst = 0.0
    children = _seed_seq(seed).spawn(trials)
    for i, child in enumerate(children):
        shape = shapes[i % len(shapes)]
        ad = adapters.random_adapter(spec.algorithm, shape, spec.dim, alpha=spec.dim,
                                     factor=spec.factor, tucker=spec.tucker, seed=child)
        k = homogeneity_degree(ad)
        expected = (c ** k) * adapters.reconstruct(ad)
        got = adapters.reconstruct(adapters.scale_factors(ad, c))
        denom = max(float(np.max(np.abs(expected))), 1e-300)
        worst = max(worst, float(np.max(np.abs(got - expected))) / denom)
    return worst


def verify_merge_ratio(algorithm: str, s: float, optimizer: str = "sgd",
                       steps: int = 100, seed=0, eps: float = 0.0,
                       weight_decay: float = 0.0) -> float:
    """Max deviation between ratio-s training and its rescaled-ratio-1 twin.

    Run A trains with merge ratio s. Run B starts from the same factors
    scaled by s^(1/k) with ratio 1 and learning rate scaled by s^(c/k),
    where c is 2 for SGD and 1 for Adam/AdaGrad (with eps = 0). Returns the
    max over steps and layers of |s * delta_A - delta_B|, elementwise.
    """
    if s <= 0:
        raise ValueError(f"merge ratio must be positive, got {s}")
    if optimizer not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    spec = HARNESS_ALGORITHMS[algorithm]
    ss = _seed_seq(seed).spawn(2)
    model_a = build_toy_model(algorithm, seed=ss[0], ratio=s)
    k = homogeneity_degree(model_a.layers[0].adapter)
    model_b = ToyModel([
        ToyLayer(
            l.base_weight, l.base_bias,
            adapters.scale_factors(
                replace(l.adapter, scale=MergeScale(alpha=float(l.adapter.scale.dim),
                                                    dim=l.adapter.scale.dim)),
                s ** (1.0 / k)),
            l.activation)
        for l in model_a.layers
    ])
    lr = BASE_LR[optimizer]
    c_exp = C_EXPONENT[optimizer]
    cfg_a = OptimizerConfig(optimizer, lr, eps=eps, weight_decay=weight_decay)
    cfg_b = OptimizerConfig(optimizer, lr * s ** (c_exp / k), eps=eps,
                            weight_decay=weight_decay)
    data = toy_dataset(spec.conv, seed=ss[1])
    trace_a = train(model_a, cfg_a, data, steps)
    trace_b = train(model_b, cfg_b, data, steps)
    worst = 0.0
    for das, dbs in zip(trace_a.deltas, trace_b.deltas):
        for da, db in zip(das, dbs):
            worst = max(worst, float(np.max(np.abs(s * da - db))))
    return worst


def gradient_check(algorithm: str, seed=0, step: float = 1e-6) -> dict[str, float]:
    """Central-difference check of every factor gradient.

    Returns the worst relative error per 'layer<i>.<role>' key. gamma is set
    away from 1 so the ratio chain rule is exercised too.
    """
    spec = HARNESS_ALGORITHMS[algorithm]
    model = build_toy_model(algorithm, seed=seed, ratio=1.3)
    x, y = toy_dataset(spec.conv, seed=seed, samples=4 if not spec.conv else 2)
    _, grads = loss_and_grads(model, x, y)
    worst: dict[str, float] = {}
    for li, layer in enumerate(model.layers):
        for role, param in layer.adapter.tensors().items():
            analytic = grads[li][role]
            err = 0.0
            flat = param.reshape(-1)
            for idx in range(flat.size):
                probes = []
                for sign in (+1.0, -1.0):
                    shifted = flat.copy()
                    shifted[idx] += sign * step
                    layer.adapter = adapters.with_tensors(
                        layer.adapter, {role: shifted.reshape(param.shape)})
                    probes.append(model_loss(model, x, y))
                layer.adapter = adapters.with_tensors(layer.adapter, {role: param})
                fd = (probes[0] - probes[1]) / (2 * step)
                an = float(analytic.reshape(-1)[idx])
                denom = max(abs(fd), abs(an), 1e-8)
                err = max(err, abs(an - fd) / denom)
            worst[f"layer{li}.{role}"] = err
    return worst
