"""Factored weight-update adapters for linear and conv2d layers.

Three decompositions of a weight delta are supported, each optionally in a
Tucker-core form on conv layers:

* lora: delta = up @ down, rank bounded by the inner extent r.
* loha: delta = (up1 @ down1) * (up2 @ down2), an elementwise product of two
  rank-r branches whose result can reach rank r^2.
* lokr: delta = kron(c, right), with the right block either stored whole or
  itself factored as up @ down.

Conv kernels (out, in, k, k) are handled by unrolling to (out, in*k*k); the
Tucker form instead keeps a small (r, r, k, k) core contracted with channel
factors on both sides. Adapters are immutable; every operation returns new
arrays. The merge ratio gamma = alpha / dim scales the delta wherever it is
applied, but never inside reconstruct().
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import kron_linear, tensor_core
from .tensor_core import ShapeError, as_tensor

__all__ = [
    "ALGORITHMS",
    "InvariantError",
    "MergeScale",
    "LayerShape",
    "LoraAdapter",
    "LohaAdapter",
    "LokrAdapter",
    "ModelMeta",
    "AdapterModel",
    "lokr_factor_dims",
    "lokr_is_full",
    "init_adapter",
    "random_adapter",
    "scale_factors",
    "reconstruct",
    "forward_linear",
    "forward_conv",
    "merge",
    "combine",
    "param_count",
    "max_rank_bound",
    "svd_fit_lora",
    "nkp_fit_lokr",
    "init_model",
]

ALGORITHMS = ("lora", "loha", "lokr")


class InvariantError(ValueError):
    """An adapter's stored tensors are inconsistent with its layer shape."""


@dataclass(frozen=True)
class MergeScale:
    """Merge ratio bookkeeping: gamma = alpha / dim."""

    alpha: float
    dim: int

    def __post_init__(self):
        if not isinstance(self.dim, int) or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"alpha must be finite and non-negative, got {self.alpha}")

    @property
    def gamma(self) -> float:
        return self.alpha / self.dim


@dataclass(frozen=True)
class LayerShape:
    """Target layer geometry: linear (out, in) or conv2d (out, in, k)."""

    kind: str
    out_dim: int
    in_dim: int
    kernel: int = 1

    def __post_init__(self):
        if self.kind not in ("linear", "conv2d"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.out_dim < 1 or self.in_dim < 1 or self.kernel < 1:
            raise ValueError(f"layer extents must be positive: {self}")
        if self.kind == "linear" and self.kernel != 1:
            raise ValueError("linear layers have no kernel extent")

    @property
    def unrolled_in(self) -> int:
        """Input extent after unrolling kernel axes (in * k^2 for conv)."""
        if self.kind == "conv2d":
            return self.in_dim * self.kernel * self.kernel
        return self.in_dim

    @property
    def delta_shape(self) -> tuple[int, ...]:
        if self.kind == "conv2d":
            return (self.out_dim, self.in_dim, self.kernel, self.kernel)
        return (self.out_dim, self.in_dim)


def _store(obj, **arrays) -> None:
    # frozen dataclasses: coerce tensor fields once, at construction
    for name, value in arrays.items():
        object.__setattr__(obj, name, as_tensor(value) if value is not None else None)


def _expect(cond: bool, message: str) -> None:
    if not cond:
        raise InvariantError(message)


@dataclass(frozen=True)
class LoraAdapter:
    """delta = up @ down (conv: unrolled, or Tucker with a (r, r, k, k) core).

    Shapes: up (out, r); down (r, in) for linear and Tucker forms,
    (r, in, k, k) for the plain conv form; core (r, r, k, k) or None.
    """

    layer: LayerShape
    scale: MergeScale
    up: np.ndarray
    down: np.ndarray
    core: np.ndarray | None = None

    def __post_init__(self):
        _store(self, up=self.up, down=self.down, core=self.core)
        shp, r = self.layer, self.scale.dim
        _expect(self.up.shape == (shp.out_dim, r), f"up shape {self.up.shape} != ({shp.out_dim}, {r})")
        if self.core is None:
            if shp.kind == "linear":
                _expect(self.down.shape == (r, shp.in_dim), f"down shape {self.down.shape}")
            else:
                _expect(
                    self.down.shape == (r, shp.in_dim, shp.kernel, shp.kernel),
                    f"down shape {self.down.shape} does not match {shp}",
                )
        else:
            _expect(shp.kind == "conv2d", "Tucker core requires a conv2d layer")
            _expect(
                self.core.shape == (r, r, shp.kernel, shp.kernel),
                f"core shape {self.core.shape} != ({r}, {r}, {shp.kernel}, {shp.kernel})",
            )
            _expect(self.down.shape == (r, shp.in_dim), f"down shape {self.down.shape}")

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"up": self.up, "down": self.down}
        if self.core is not None:
            out["core"] = self.core
        return out


@dataclass(frozen=True)
class LohaAdapter:
    """delta = (up1 @ down1) * (up2 @ down2), branch shapes as in LoraAdapter."""

    layer: LayerShape
    scale: MergeScale
    up1: np.ndarray
    down1: np.ndarray
    up2: np.ndarray
    down2: np.ndarray
    core1: np.ndarray | None = None
    core2: np.ndarray | None = None

    def __post_init__(self):
        _store(
            self, up1=self.up1, down1=self.down1, up2=self.up2, down2=self.down2,
            core1=self.core1, core2=self.core2,
        )
        _expect(
            (self.core1 is None) == (self.core2 is None),
            "Tucker cores must be present on both branches or neither",
        )
        for up, down, core in ((self.up1, self.down1, self.core1), (self.up2, self.down2, self.core2)):
            probe = LoraAdapter(self.layer, self.scale, up, down, core)
            del probe  # constructed purely for its shape checks
        _expect(self.up1.shape == self.up2.shape, "branch up shapes differ")
        _expect(self.down1.shape == self.down2.shape, "branch down shapes differ")

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"up1": self.up1, "down1": self.down1, "up2": self.up2, "down2": self.down2}
        if self.core1 is not None:
            out["core1"] = self.core1
            out["core2"] = self.core2
        return out


@dataclass(frozen=True)
class LokrAdapter:
    """delta = kron(c, right block), channel extents split by lokr_factor_dims.

    c is (u_p, u_q) where out = u_p * v_p and in = u_q * v_q. The right block
    is either stored whole (w2: (v_p, v_q) or (v_p, v_q, k, k)) or factored
    as up (v_p, r) @ down ((r, v_q) or (r, v_q, k, k)); the Tucker form adds
    a (r, r, k, k) core with down (r, v_q). Kernel axes always ride on the
    right block.
    """

    layer: LayerShape
    scale: MergeScale
    factor: int
    c: np.ndarray
    w2: np.ndarray | None = None
    up: np.ndarray | None = None
    down: np.ndarray | None = None
    core: np.ndarray | None = None

    def __post_init__(self):
        _store(self, c=self.c, w2=self.w2, up=self.up, down=self.down, core=self.core)
        shp, r = self.layer, self.scale.dim
        _expect(self.c.ndim == 2, f"c must be a matrix, got shape {self.c.shape}")
        u_p, u_q = self.c.shape
        _expect(shp.out_dim % u_p == 0, f"out extent {shp.out_dim} not divisible by {u_p}")
        _expect(shp.in_dim % u_q == 0, f"in extent {shp.in_dim} not divisible by {u_q}")
        v_p, v_q = shp.out_dim // u_p, shp.in_dim // u_q
        k = shp.kernel
        full = self.w2 is not None
        if full:
            _expect(self.up is None and self.down is None and self.core is None,
                    "full right block excludes factored fields")
            want = (v_p, v_q) if shp.kind == "linear" else (v_p, v_q, k, k)
            _expect(self.w2.shape == want, f"w2 shape {self.w2.shape} != {want}")
        else:
            _expect(self.up is not None and self.down is not None,
                    "factored right block requires up and down")
            _expect(self.up.shape == (v_p, r), f"up shape {self.up.shape} != ({v_p}, {r})")
            if self.core is None:
                want = (r, v_q) if shp.kind == "linear" else (r, v_q, k, k)
                _expect(self.down.shape == want, f"down shape {self.down.shape} != {want}")
            else:
                _expect(shp.kind == "conv2d", "Tucker core requires a conv2d layer")
                _expect(self.core.shape == (r, r, k, k), f"core shape {self.core.shape}")
                _expect(self.down.shape == (r, v_q), f"down shape {self.down.shape} != ({r}, {v_q})")

    @property
    def block_dims(self) -> tuple[int, int, int, int]:
        u_p, u_q = self.c.shape
        return u_p, self.layer.out_dim // u_p, u_q, self.layer.in_dim // u_q

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"c": self.c}
        if self.w2 is not None:
            out["w2"] = self.w2
        else:
            out["up"] = self.up
            out["down"] = self.down
            if self.core is not None:
                out["core"] = self.core
        return out


Adapter = LoraAdapter | LohaAdapter | LokrAdapter


@dataclass(frozen=True)
class ModelMeta:
    """Shared hyperparameters for a whole adapter model."""

    algorithm: str
    dim: int
    alpha: float
    factor: int = -1
    seed: int = 0
    format_version: int = 1


@dataclass
class AdapterModel:
    """Named layer -> adapter map with shared metadata."""

    meta: ModelMeta
    entries: dict[str, Adapter]


def lokr_factor_dims(v: int, factor: int = -1) -> tuple[int, int]:
    """Split extent v into (u, v // u) with u its largest divisor <= min(factor, sqrt(v)).

    factor == -1 lifts the user bound, leaving only the sqrt(v) cap, so the
    split is as close to square as the divisors of v allow. The second
    element is always the larger one.
    """
    if v < 1:
        raise ValueError(f"extent must be positive, got {v}")
    if factor == 0 or factor < -1:
        raise ValueError(f"factor must be -1 or a positive integer, got {factor}")
    bound = math.isqrt(v) if factor == -1 else min(factor, math.isqrt(v))
    for u in range(max(bound, 1), 0, -1):
        if v % u == 0:
            return u, v // u
    raise AssertionError("unreachable: 1 divides every extent")


def lokr_is_full(layer: LayerShape, dim: int, factor: int = -1) -> bool:
    """Whether a lokr adapter stores its right block whole at this dim.

    The right block is left unfactored when dim reaches the block's own
    maximal rank min(v_p, v_q * k^2); smaller dims factor it as up @ down.
    """
    _, v_p = lokr_factor_dims(layer.out_dim, factor)
    _, v_q = lokr_factor_dims(layer.in_dim, factor)
    return dim >= min(v_p, v_q * layer.kernel * layer.kernel)


def _tucker_kernel(core: np.ndarray, up: np.ndarray, down: np.ndarray) -> np.ndarray:
    # (r, r, k, k) x0 up.T -> (rows(up), r, k, k), then x1 down -> (rows, cols(down), k, k)
    return tensor_core.nmode_product(tensor_core.nmode_product(core, up.T, 0), down, 1)


def _lora_delta(ad: LoraAdapter) -> np.ndarray:
    shp = ad.layer
    if ad.core is not None:
        return _tucker_kernel(ad.core, ad.up, ad.down)
    if shp.kind == "linear":
        return ad.up @ ad.down
    flat = ad.up @ ad.down.reshape(ad.down.shape[0], -1)
    return flat.reshape(shp.delta_shape)


def _loha_branch(ad: LohaAdapter, which: int) -> np.ndarray:
    up, down, core = ((ad.up1, ad.down1, ad.core1), (ad.up2, ad.down2, ad.core2))[which]
    probe = LoraAdapter(ad.layer, ad.scale, up, down, core)
    return _lora_delta(probe)


def _lokr_right_block(ad: LokrAdapter) -> np.ndarray:
    """Right Kronecker block with its natural axes ((v_p, v_q) or + (k, k))."""
    if ad.w2 is not None:
        return ad.w2
    if ad.core is not None:
        return _tucker_kernel(ad.core, ad.up, ad.down)
    if ad.layer.kind == "linear":
        return ad.up @ ad.down
    _, v_p, _, v_q = ad.block_dims
    k = ad.layer.kernel
    flat = ad.up @ ad.down.reshape(ad.down.shape[0], -1)
    return flat.reshape(v_p, v_q, k, k)


def reconstruct(adapter: Adapter) -> np.ndarray:
    """Materialize the dense weight delta (gamma is NOT applied)."""
    if isinstance(adapter, LoraAdapter):
        delta = _lora_delta(adapter)
    elif isinstance(adapter, LohaAdapter):
        delta = _loha_branch(adapter, 0) * _loha_branch(adapter, 1)
    elif isinstance(adapter, LokrAdapter):
        right = _lokr_right_block(adapter)
        right2 = right.reshape(right.shape[0], -1)
        flat = np.kron(adapter.c, right2)
        delta = flat if adapter.layer.kind == "linear" else flat.reshape(adapter.layer.delta_shape)
    else:
        raise TypeError(f"not an adapter: {type(adapter).__name__}")
    if delta.shape != adapter.layer.delta_shape:
        raise InvariantError(
            f"reconstructed shape {delta.shape} != layer shape {adapter.layer.delta_shape}"
        )
    return delta


def forward_linear(adapter: Adapter, w0, bias, x) -> np.ndarray:
    """y = w0 @ x + bias + gamma * delta @ x, via each adapter's factored path."""
    w0m, bv, xv = as_tensor(w0), as_tensor(bias), as_tensor(x)
    shp = adapter.layer
    if shp.kind != "linear":
        raise ShapeError(f"forward_linear needs a linear layer, got {shp.kind}")
    if w0m.shape != (shp.out_dim, shp.in_dim):
        raise ShapeError(f"base weight shape {w0m.shape} != {(shp.out_dim, shp.in_dim)}")
    if bv.shape != (shp.out_dim,):
        raise ShapeError(f"bias shape {bv.shape} != ({shp.out_dim},)")
    if xv.shape != (shp.in_dim,):
        raise ShapeError(f"input shape {xv.shape} != ({shp.in_dim},)")
    if isinstance(adapter, LoraAdapter):
        dy = adapter.up @ (adapter.down @ xv)
    elif isinstance(adapter, LohaAdapter):
        dy = reconstruct(adapter) @ xv
    elif isinstance(adapter, LokrAdapter):
        if adapter.w2 is not None:
            dy = kron_linear.grouped_forward_full(adapter.c, adapter.w2, xv)
        else:
            dy = kron_linear.grouped_forward(adapter.c, adapter.up, adapter.down, xv)
    else:
        raise TypeError(f"not an adapter: {type(adapter).__name__}")
    return w0m @ xv + bv + adapter.scale.gamma * dy


def forward_conv(adapter: Adapter, k0, bias, x) -> np.ndarray:
    """Conv layer forward with the adapter applied in factored form.

    LoRA runs as a chain of convolutions (k x k with `down`, then 1 x 1 with
    `up`; the Tucker form as 1 x 1, core k x k, 1 x 1). LoHa and LoKr build
    the delta kernel from their factors and apply it in one pass, since
    elementwise and Kronecker structure do not commute with convolution.
    """
    k0m, bv, xm = as_tensor(k0), as_tensor(bias), as_tensor(x)
    shp = adapter.layer
    if shp.kind != "conv2d":
        raise ShapeError(f"forward_conv needs a conv2d layer, got {shp.kind}")
    if k0m.shape != shp.delta_shape:
        raise ShapeError(f"base kernel shape {k0m.shape} != {shp.delta_shape}")
    if bv.shape != (shp.out_dim,):
        raise ShapeError(f"bias shape {bv.shape} != ({shp.out_dim},)")
    r = adapter.scale.dim
    if isinstance(adapter, LoraAdapter):
        if adapter.core is None:
            mid = tensor_core.conv2d(adapter.down, xm)
        else:
            mid = tensor_core.conv2d(adapter.down.reshape(r, shp.in_dim, 1, 1), xm)
            mid = tensor_core.conv2d(adapter.core, mid)
        dy = tensor_core.conv2d(adapter.up.reshape(shp.out_dim, r, 1, 1), mid)
    elif isinstance(adapter, (LohaAdapter, LokrAdapter)):
        dy = tensor_core.conv2d(reconstruct(adapter), xm)
    else:
        raise TypeError(f"not an adapter: {type(adapter).__name__}")
    base = tensor_core.conv2d(k0m, xm)
    return base + bv[:, None, None] + adapter.scale.gamma * dy


def merge(adapter: Adapter, w0_new, lam: float = 1.0) -> np.ndarray:
    """w0_new + lam * gamma * delta; shapes must agree with the layer."""
    wm = as_tensor(w0_new)
    if not math.isfinite(lam):
        raise ValueError(f"merge weight must be finite, got {lam}")
    if wm.shape != adapter.layer.delta_shape:
        raise ShapeError(f"weight shape {wm.shape} != layer shape {adapter.layer.delta_shape}")
    return wm + (lam * adapter.scale.gamma) * reconstruct(adapter)


def combine(updates) -> np.ndarray:
    """Weighted sum of dense deltas: [(delta, weight), ...] -> sum w * delta."""
    items = list(updates)
    if not items:
        raise ValueError("combine requires at least one (delta, weight) pair")
    first = as_tensor(items[0][0])
    total = np.zeros_like(first)
    for delta, weight in items:
        dm = as_tensor(delta)
        if dm.shape != first.shape:
            raise ShapeError(f"delta shape {dm.shape} != {first.shape}")
        if not math.isfinite(weight):
            raise ValueError(f"combine weight must be finite, got {weight}")
        total += weight * dm
    return total


def param_count(adapter: Adapter) -> int:
    """Number of stored scalars across all factor tensors."""
    return int(sum(t.size for t in adapter.tensors().values()))


def max_rank_bound(adapter: Adapter) -> int:
    """Upper bound on the rank of the (unrolled) reconstructed delta."""
    shp = adapter.layer
    p, q = shp.out_dim, shp.unrolled_in
    if isinstance(adapter, LoraAdapter):
        return min(adapter.scale.dim, p, q)
    if isinstance(adapter, LohaAdapter):
        return min(adapter.scale.dim ** 2, p, q)
    if isinstance(adapter, LokrAdapter):
        u_p, v_p, u_q, v_q = adapter.block_dims
        right_cols = v_q * shp.kernel * shp.kernel
        right = min(v_p, right_cols)
        if adapter.w2 is None:
            right = min(right, adapter.scale.dim)
        return min(min(u_p, u_q) * right, p, q)
    raise TypeError(f"not an adapter: {type(adapter).__name__}")


# role zeroed at init, per algorithm/form: exactly one factor, so the
# reconstructed delta starts at exactly zero
_ZERO_ROLE = {
    ("lora", False): "up",
    ("lora", True): "up",
    ("loha", False): "down2",
    ("loha", True): "down2",
    ("lokr", False): "down",
    ("lokr", True): "down",
}


def _build_adapter(algorithm, layer, dim, alpha, factor, tucker, seed, zero_init):
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}, expected one of {ALGORITHMS}")
    if tucker and layer.kind != "conv2d":
        raise ValueError("Tucker form is only defined for conv2d layers")
    scale = MergeScale(alpha=alpha, dim=dim)
    rng = np.random.default_rng(seed)
    std = 1.0 / math.sqrt(dim)
    k = layer.kernel

    def draw(*shape):
        return rng.normal(0.0, std, size=shape)

    if algorithm == "lora":
        up = draw(layer.out_dim, dim)
        if tucker:
            core = draw(dim, dim, k, k)
            down = draw(dim, layer.in_dim)
        else:
            core = None
            down = (draw(dim, layer.in_dim, k, k) if layer.kind == "conv2d"
                    else draw(dim, layer.in_dim))
        fields = {"up": up, "down": down, "core": core}
        if zero_init:
            fields[_ZERO_ROLE["lora", tucker]] = np.zeros_like(fields[_ZERO_ROLE["lora", tucker]])
        return LoraAdapter(layer, scale, **fields)

    if algorithm == "loha":
        def branch():
            up = draw(layer.out_dim, dim)
            if tucker:
                return up, draw(dim, layer.in_dim), draw(dim, dim, k, k)
            down = (draw(dim, layer.in_dim, k, k) if layer.kind == "conv2d"
                    else draw(dim, layer.in_dim))
            return up, down, None
        up1, down1, core1 = branch()
        up2, down2, core2 = branch()
        if zero_init:
            down2 = np.zeros_like(down2)
        return LohaAdapter(layer, scale, up1, down1, up2, down2, core1, core2)

    u_p, v_p = lokr_factor_dims(layer.out_dim, factor)
    u_q, v_q = lokr_factor_dims(layer.in_dim, factor)
    c = draw(u_p, u_q)
    if not tucker and lokr_is_full(layer, dim, factor):
        w2 = draw(v_p, v_q) if layer.kind == "linear" else draw(v_p, v_q, k, k)
        if zero_init:
            w2 = np.zeros_like(w2)
        return LokrAdapter(layer, scale, factor, c, w2=w2)
    up = draw(v_p, dim)
    if tucker:
        core = draw(dim, dim, k, k)
        down = draw(dim, v_q)
    else:
        core = None
        down = draw(dim, v_q) if layer.kind == "linear" else draw(dim, v_q, k, k)
    if zero_init:
        down = np.zeros_like(down)
    return LokrAdapter(layer, scale, factor, c, up=up, down=down, core=core)


def init_adapter(algorithm: str, layer: LayerShape, dim: int, alpha: float,
                 factor: int = -1, tucker: bool = False, seed=0) -> Adapter:
    """Fresh adapter with reconstruct() == 0.

    Exactly one factor starts at zero (lora: up; loha: down2; lokr: down, or
    w2 when the right block is unfactored); every other factor is drawn
    i.i.d. Gaussian with mean 0 and std 1/sqrt(dim) from the given seed.
    """
    return _build_adapter(algorithm, layer, dim, alpha, factor, tucker, seed, zero_init=True)


def random_adapter(algorithm: str, layer: LayerShape, dim: int, alpha: float,
                   factor: int = -1, tucker: bool = False, seed=0) -> Adapter:
    """Adapter with every factor drawn Gaussian (no zeroed factor).

    Not the production init: reconstruct() is generically nonzero. Used by
    the optimizer harness and tests, which need all factors live.
    """
    return _build_adapter(algorithm, layer, dim, alpha, factor, tucker, seed, zero_init=False)


def scale_factors(adapter: Adapter, c: float) -> Adapter:
    """Copy of the adapter with every stored factor tensor multiplied by c."""
    if not math.isfinite(c):
        raise ValueError(f"scale must be finite, got {c}")
    return replace(adapter, **{name: c * value for name, value in adapter.tensors().items()})


def with_tensors(adapter: Adapter, tensors: dict[str, np.ndarray]) -> Adapter:
    """Copy of the adapter with the named factor tensors replaced."""
    return replace(adapter, **tensors)


def svd_fit_lora(delta, dim: int) -> LoraAdapter:
    """Best rank-dim fit of a dense delta, by truncated SVD.

    Accepts a (p, q) matrix or an (out, in, k, k) kernel stack (fitted on its
    unrolled form). Factors are up = U_r diag(S_r), down = V_r^T; alpha is
    set to dim so gamma == 1 and merge() reproduces the fit directly.
    """
    dm = as_tensor(delta)
    if dm.ndim == 2:
        layer = LayerShape("linear", dm.shape[0], dm.shape[1])
        work = dm
    elif dm.ndim == 4:
        if dm.shape[2] != dm.shape[3]:
            raise ShapeError(f"kernel must be square, got shape {dm.shape}")
        layer = LayerShape("conv2d", dm.shape[0], dm.shape[1], dm.shape[2])
        work = tensor_core.unroll_conv(dm)
    else:
        raise ShapeError(f"delta must have rank 2 or 4, got shape {dm.shape}")
    if not 1 <= dim <= min(work.shape):
        raise ValueError(f"dim {dim} out of range [1, {min(work.shape)}] for shape {dm.shape}")
    u, s, v = tensor_core.svd(work)
    up = u[:, :dim] * s[:dim]
    down = np.ascontiguousarray(v[:, :dim].T)
    if layer.kind == "conv2d":
        down = down.reshape(dim, layer.in_dim, layer.kernel, layer.kernel)
    return LoraAdapter(layer, MergeScale(alpha=float(dim), dim=dim), up, down)


def _nkp_rearrange(dm: np.ndarray, u_p: int, v_p: int, u_q: int, v_q: int) -> np.ndarray:
    # permute delta entries so kron(c, right) becomes the rank-1 outer
    # product vec(c) @ vec(right).T
    if dm.ndim == 2:
        blocks = dm.reshape(u_p, v_p, u_q, v_q).transpose(0, 2, 1, 3)
        return blocks.reshape(u_p * u_q, v_p * v_q)
    k = dm.shape[2]
    blocks = dm.reshape(u_p, v_p, u_q, v_q, k, k).transpose(0, 2, 1, 3, 4, 5)
    return blocks.reshape(u_p * u_q, v_p * v_q * k * k)


def nkp_fit_lokr(delta, factor: int = -1, dim: int | None = None) -> LokrAdapter:
    """Nearest Kronecker-product fit of a dense delta.

    Rearranges the delta so the best kron(c, right) pair is the leading
    rank-1 term of an SVD. c comes out with unit Frobenius norm and its
    first nonzero entry positive; the right block absorbs the magnitude.
    With dim below the right block's maximal rank, the block is further
    truncated to up @ down by an inner SVD.
    """
    dm = as_tensor(delta)
    if dm.ndim == 2:
        layer = LayerShape("linear", dm.shape[0], dm.shape[1])
    elif dm.ndim == 4:
        if dm.shape[2] != dm.shape[3]:
            raise ShapeError(f"kernel must be square, got shape {dm.shape}")
        layer = LayerShape("conv2d", dm.shape[0], dm.shape[1], dm.shape[2])
    else:
        raise ShapeError(f"delta must have rank 2 or 4, got shape {dm.shape}")
    u_p, v_p = lokr_factor_dims(layer.out_dim, factor)
    u_q, v_q = lokr_factor_dims(layer.in_dim, factor)
    k = layer.kernel
    rearranged = _nkp_rearrange(dm, u_p, v_p, u_q, v_q)
    u, s, v = tensor_core.svd(rearranged)
    c_vec = u[:, 0].copy()
    right_vec = s[0] * v[:, 0]
    nonzero = np.flatnonzero(c_vec)
    if nonzero.size and c_vec[nonzero[0]] < 0:
        c_vec, right_vec = -c_vec, -right_vec
    c = c_vec.reshape(u_p, u_q)
    right_cols = v_q * k * k
    block_rank = min(v_p, right_cols)
    if dim is None:
        dim = block_rank
    if dim >= block_rank:
        w2 = right_vec.reshape((v_p, v_q) if layer.kind == "linear" else (v_p, v_q, k, k))
        return LokrAdapter(layer, MergeScale(alpha=float(dim), dim=dim), factor, c, w2=w2)
    u2, s2, v2 = tensor_core.svd(right_vec.reshape(v_p, right_cols))
    up = u2[:, :dim] * s2[:dim]
    down = np.ascontiguousarray(v2[:, :dim].T)
    if layer.kind == "conv2d":
        down = down.reshape(dim, v_q, k, k)
    return LokrAdapter(layer, MergeScale(alpha=float(dim), dim=dim), factor, c, up=up, down=down)


def init_model(entries, algorithm: str, dim: int, alpha: float, factor: int = -1,
               tucker: bool = False, seed: int = 0) -> AdapterModel:
    """Zero-initialized adapters for a list of (name, LayerShape) entries.

    Per-layer seeds are spawned deterministically from the model seed. The
    tucker flag applies to conv2d layers; linear layers always use the plain
    form.
    """
    named = list(entries)
    names = [name for name, _ in named]
    if len(set(names)) != len(names):
        raise ValueError("layer names must be unique")
    children = np.random.SeedSequence(seed).spawn(len(named))
    built: dict[str, Adapter] = {}
    for (name, layer), child in zip(named, children):
        use_tucker = tucker and layer.kind == "conv2d"
        built[name] = init_adapter(algorithm, layer, dim, alpha, factor, use_tucker, seed=child)
    meta = ModelMeta(algorithm=algorithm, dim=dim, alpha=alpha, factor=factor, seed=seed)
    return AdapterModel(meta=meta, entries=built)
