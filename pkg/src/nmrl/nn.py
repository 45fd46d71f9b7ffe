"""Small feed-forward networks with N:M-masked linear layers and manual backprop.

Inputs are batches of row vectors, ``x.shape == (batch, fan_in)``; weights are
stored ``(fan_out, fan_in)``. Sparse layers keep a dense weight store and a
mask; the forward pass uses ``W * E`` and weight gradients are masked the same
way, so weights outside the mask never move unless SR-STE shrinkage is on.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .sparsity import NmMask, NmPattern, check_mask, project_nm

DTYPE = np.float32


def kaiming_bound(fan_in: int, pattern: NmPattern, mode: str = "adjusted") -> float:
    """Uniform bound sqrt(6 / fan_in), widened by sqrt(m / n) in ``adjusted`` mode."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    bound = math.sqrt(6.0 / fan_in)
    if mode == "adjusted":
        return bound * math.sqrt(pattern.m / pattern.n)
    if mode == "standard":
        return bound
    raise ValueError(f"unknown init mode {mode!r}")


def init_kaiming_nm(
    fan_in: int, fan_out: int, pattern: NmPattern, mode: str = "adjusted", seed=None, dtype=DTYPE
) -> np.ndarray:
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"invalid layer dims {fan_in}->{fan_out}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = kaiming_bound(fan_in, pattern, mode)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)


def init_bias(fan_in: int, fan_out: int, seed=None, dtype=DTYPE) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=fan_out).astype(dtype)


class Linear:
    sparse = False

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = weight
        self.bias = bias
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"bias shape {bias.shape} does not match weight {weight.shape}")

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]

    @property
    def effective_weight(self) -> np.ndarray:
        return self.weight

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.fan_in:
            raise ValueError(f"layer expects (batch, {self.fan_in}) input, got {x.shape}")
        return x @ self.effective_weight.T + self.bias

    def backward(self, x, grad_y, param_grads=True):
        """Return ``(grad_x, grad_w, grad_b)``; weight/bias grads are None when not requested."""
        if grad_y.shape != (x.shape[0], self.fan_out):
            raise ValueError(f"grad_y shape {grad_y.shape} inconsistent with input {x.shape}")
        grad_x = grad_y @ self.effective_weight
        if not param_grads:
            return grad_x, None, None
        return grad_x, grad_y.T @ x, grad_y.sum(axis=0)


class SparseLinear(Linear):
    sparse = True

    def __init__(self, weight: np.ndarray, bias: np.ndarray, mask: NmMask):
        super().__init__(weight, bias)
        self.kernel: kernels.CompressedNm | None = None
        self.set_mask(mask)

    @property
    def pattern(self) -> NmPattern:
        return self.mask.pattern

    def set_mask(self, mask: NmMask):
        if mask.shape != self.weight.shape:
            raise ValueError(f"mask shape {mask.shape} does not match weight {self.weight.shape}")
        self.mask = mask
        self.mask_f = mask.bits.astype(self.weight.dtype)
        self.kernel = None

    @property
    def effective_weight(self) -> np.ndarray:
        return self.weight * self.mask_f

    def attach_kernel(self):
        """Snapshot the current effective weights into packed form for :meth:`forward`.

        The snapshot goes stale on any weight update; call :meth:`detach_kernel`
        (or re-attach) after training steps.
        """
        self.kernel = kernels.compress(self.effective_weight, self.pattern)

    def detach_kernel(self):
        self.kernel = None

    def forward(self, x):
        if self.kernel is None:
            return super().forward(x)
        if x.ndim != 2 or x.shape[1] != self.fan_in:
            raise ValueError(f"layer expects (batch, {self.fan_in}) input, got {x.shape}")
        y = kernels.spmm(self.kernel, x.T).T + self.bias
        return y.astype(self.weight.dtype)

    def backward(self, x, grad_y, param_grads=True):
        grad_x, grad_w, grad_b = super().backward(x, grad_y, param_grads)
        if grad_w is not None:
            grad_w *= self.mask_f
        return grad_x, grad_w, grad_b


class Mlp:
    """ReLU network; output is ``scale * tanh`` (``"tanh"``) or affine (``"linear"``)."""

    def __init__(self, layers: list[Linear], output: str = "linear", scale: float = 1.0):
        if output not in ("tanh", "linear"):
            raise ValueError(f"unknown output {output!r}")
        self.layers = layers
        self.output = output
        self.scale = scale
        self._inputs: list[np.ndarray] | None = None
        self._out: np.ndarray | None = None

    @property
    def sparse_layers(self) -> list[SparseLinear]:
        return [layer for layer in self.layers if layer.sparse]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def grad_masks(self) -> list[np.ndarray | None]:
        """Per-parameter update masks aligned with :meth:`params`."""
        out = []
        for layer in self.layers:
            out += [layer.mask_f if layer.sparse else None, None]
        return out

    def forward(self, x: np.ndarray, keep: bool = True) -> np.ndarray:
        inputs = []
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            inputs.append(h)
            h = layer.forward(h)
            if i < last:
                np.maximum(h, 0, out=h)
        if self.output == "tanh":
            h = np.tanh(h)
            out = h * self.scale
        else:
            out = h
        if keep:
            self._inputs = inputs
            self._out = h
        return out

    def backward(self, grad_out: np.ndarray, param_grads: bool = True):
        """Backprop through the last kept forward pass.

        Returns ``(grad_x, grads)`` where ``grads`` aligns with :meth:`params`
        (or is None when ``param_grads`` is False).
        """
        if self._inputs is None:
            raise RuntimeError("backward called without a kept forward pass")
        g = grad_out
        if self.output == "tanh":
            g = g * (self.scale * (1.0 - self._out * self._out))
        grads: list[np.ndarray | None] = [None] * (2 * len(self.layers))
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            x = self._inputs[i]
            g_in, gw, gb = layer.backward(x, g, param_grads)
            grads[2 * i], grads[2 * i + 1] = gw, gb
            if i > 0:
                g = g_in * (x > 0)
            else:
                g = g_in
        return g, (grads if param_grads else None)

    def __call__(self, x):
        return self.forward(x, keep=False)

    def copy(self) -> "Mlp":
        clone = copy.deepcopy(self)
        clone._inputs = clone._out = None
        return clone

    def check_masks(self):
        for i, layer in enumerate(self.layers):
            if layer.sparse:
                try:
                    check_mask(layer.mask)
                except ValueError as err:
                    raise ValueError(f"layer {i}: {err}") from None


def build_mlp(
    sizes: Sequence[int],
    pattern: NmPattern,
    rng: np.random.Generator,
    output: str = "linear",
    scale: float = 1.0,
    init_mode: str = "adjusted",
    dtype=DTYPE,
) -> Mlp:
    """All layers but the last are N:M sparse; masks start as the projection of the init."""
    layers: list[Linear] = []
    last = len(sizes) - 2
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if i < last:
            w = init_kaiming_nm(fan_in, fan_out, pattern, init_mode, rng, dtype)
            b = init_bias(fan_in, fan_out, rng, dtype)
            layers.append(SparseLinear(w, b, project_nm(w, pattern)))
        else:
            w = init_kaiming_nm(fan_in, fan_out, pattern, "standard", rng, dtype)
            b = init_bias(fan_in, fan_out, rng, dtype)
            layers.append(Linear(w, b))
    return Mlp(layers, output=output, scale=scale)


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **hyper,
        )


def adam_step(params, grads, state: AdamState, masks=None) -> AdamState:
    """In-place bias-corrected Adam update.

    ``masks`` (aligned with ``params``, entries may be None) gates the
    parameter update, so a weight outside its mask stays bit-identical even
    while its retained moments decay.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"grad {i} shape {g.shape} != param shape {params[i].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {i}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    step_size = state.lr / c1
    b1, b2 = state.beta1, state.beta2
    inv_sqrt_c2 = 1.0 / np.sqrt(c2)
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        tmp = np.multiply(g, 1.0 - b1, dtype=m.dtype)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        # sqrt(v / c2) + eps, then the step
        np.sqrt(v, out=tmp)
        tmp *= inv_sqrt_c2
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step_size
        if masks is not None and masks[i] is not None:
            tmp *= masks[i]
        p -= tmp.astype(p.dtype, copy=False)
    return state


def srste_shrink(layer: SparseLinear, lam: float, mode: str, event: str = "step") -> np.ndarray:
    """Multiply inactive weights by ``1 - lam`` when ``event`` matches ``mode``.

    ``mode`` is ``"off"``, ``"per_step"`` (fires on optimizer-step events) or
    ``"per_mask_update"`` (fires on mask-update events).
    """
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"lambda_W must be in [0, 1), got {lam}")
    fires = (mode == "per_step" and event == "step") or (
        mode == "per_mask_update" and event == "mask_update"
    )
    if fires and lam > 0.0:
        inactive = layer.mask.bits == 0
        layer.weight[inactive] *= layer.weight.dtype.type(1.0 - lam)
    return layer.weight
