"""Feed-forward networks with hand-written reverse mode, Adam and Polyak averaging.

Hidden layers are ``affine -> layer norm -> GELU``; the output layer is affine.
Everything runs in float64 on batches of shape ``(B, in_dim)``; 1-D inputs are
treated as a batch of one and returned 1-D.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from . import archive

LN_EPS = 1e-5
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Input or parameter shapes are inconsistent with the network."""


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    gain: np.ndarray | None = None  # layer-norm scale, hidden layers only
    offset: np.ndarray | None = None

    @property
    def hidden(self) -> bool:
        return self.gain is not None

    def arrays(self) -> list[np.ndarray]:
        out = [self.weight, self.bias]
        if self.hidden:
            out += [self.gain, self.offset]
        return out


@dataclass
class MlpParams:
    layers: list[Layer]

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].weight.shape[1]] + [layer.weight.shape[0] for layer in self.layers]

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer.arrays()]

    def copy(self) -> MlpParams:
        return MlpParams(
            [
                Layer(
                    l.weight.copy(),
                    l.bias.copy(),
                    None if l.gain is None else l.gain.copy(),
                    None if l.offset is None else l.offset.copy(),
                )
                for l in self.layers
            ]
        )

    def zeros_like(self) -> MlpParams:
        z = self.copy()
        for a in z.arrays():
            a[...] = 0.0
        return z

    def validate(self) -> None:
        sizes = self.sizes
        for i, layer in enumerate(self.layers):
            if layer.weight.shape != (sizes[i + 1], sizes[i]) or layer.bias.shape != (sizes[i + 1],):
                raise ShapeError(f"layer {i}: weight/bias shapes do not chain")
            if (i < len(self.layers) - 1) != layer.hidden:
                raise ShapeError(f"layer {i}: only hidden layers carry layer-norm parameters")
            if layer.hidden and (layer.gain.shape != layer.bias.shape or layer.offset.shape != layer.bias.shape):
                raise ShapeError(f"layer {i}: layer-norm parameter shape mismatch")
        if not all(np.all(np.isfinite(a)) for a in self.arrays()):
            raise ValueError("non-finite parameter")


def init_mlp(sizes: list[int], rng: np.random.Generator, final_scale: float = 1.0) -> MlpParams:
    """Fan-in scaled uniform init; ``sizes`` = [in, hidden..., out]."""
    if len(sizes) < 2:
        raise ShapeError("need at least input and output sizes")
    layers = []
    n = len(sizes) - 1
    for i in range(n):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = np.sqrt(3.0 / fan_in)
        if i == n - 1:
            bound *= final_scale
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        if i < n - 1:
            layers.append(Layer(w, b, np.ones(fan_out), np.zeros(fan_out)))
        else:
            layers.append(Layer(w, b))
    return MlpParams(layers)


def gelu(x: np.ndarray) -> np.ndarray:
    return x * ndtr(x)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _as_batch(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"expected input of width {params.in_dim}, got shape {x.shape}")
    return x, single


def forward_cached(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Batched forward pass that also returns the activations needed by :func:`backward_cached`."""
    h = x
    cache = []
    for layer in params.layers:
        pre = h @ layer.weight.T + layer.bias
        if not layer.hidden:
            cache.append((h,))
            h = pre
            continue
        mu = pre.mean(axis=1, keepdims=True)
        centered = pre - mu
        inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + LN_EPS)
        xhat = centered * inv_std
        y = xhat * layer.gain + layer.offset
        cdf = ndtr(y)
        cache.append((h, xhat, inv_std, y, cdf))
        h = y * cdf
    return h, cache


def backward_cached(params: MlpParams, cache: list, grad_out: np.ndarray) -> tuple[MlpParams, np.ndarray]:
    g = grad_out
    grads = []
    for layer, c in zip(reversed(params.layers), reversed(cache)):
        if not layer.hidden:
            (h_in,) = c
            grads.append(Layer(g.T @ h_in, g.sum(axis=0)))
            g = g @ layer.weight
            continue
        h_in, xhat, inv_std, y, cdf = c
        g = g * (cdf + y * _INV_SQRT_2PI * np.exp(-0.5 * y * y))
        d_gain = (g * xhat).sum(axis=0)
        d_offset = g.sum(axis=0)
        gx = g * layer.gain
        # layer-norm backward over the feature axis
        d_pre = inv_std * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        grads.append(Layer(d_pre.T @ h_in, d_pre.sum(axis=0), d_gain, d_offset))
        g = d_pre @ layer.weight
    return MlpParams(grads[::-1]), g


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    xb, single = _as_batch(params, x)
    out, _ = forward_cached(params, xb)
    return out[0] if single else out


def backward(params: MlpParams, x: np.ndarray, grad_out: np.ndarray) -> tuple[MlpParams, np.ndarray]:
    """Gradients of ``sum(grad_out * forward(params, x))`` w.r.t. parameters and input."""
    xb, single = _as_batch(params, x)
    g = np.asarray(grad_out, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != (xb.shape[0], params.out_dim):
        raise ShapeError(f"output gradient shape {g.shape} does not match ({xb.shape[0]}, {params.out_dim})")
    _, cache = forward_cached(params, xb)
    grads, gin = backward_cached(params, cache, g)
    return grads, (gin[0] if single else gin)


def global_norm(grads: MlpParams) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in grads.arrays())))


def clip_by_global_norm(grads: MlpParams, max_norm: float) -> float:
    """Scale ``grads`` in place so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for a in grads.arrays():
            a *= scale
    return norm


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, lr: float = 3e-4, **kw) -> AdamState:
        return cls(
            m=[np.zeros_like(a) for a in params.arrays()],
            v=[np.zeros_like(a) for a in params.arrays()],
            lr=lr,
            **kw,
        )


def adam_step(state: AdamState, params: MlpParams, grads: MlpParams) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update, applied in place."""
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if len(p_arrays) != len(g_arrays) or len(p_arrays) != len(state.m):
        raise ShapeError("parameter, gradient and optimizer state structures differ")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def polyak_update(target: MlpParams, online: MlpParams, beta: float) -> MlpParams:
    if not 0.0 <= beta <= 1.0:
        raise ValueError("polyak rate must lie in [0, 1]")
    if target.sizes != online.sizes:
        raise ShapeError("target and online architectures differ")
    for t, o in zip(target.arrays(), online.arrays()):
        t *= 1.0 - beta
        t += beta * o
    return target


def params_to_arrays(params: MlpParams, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for i, layer in enumerate(params.layers):
        out[f"{prefix}{i}.weight"] = layer.weight
        out[f"{prefix}{i}.bias"] = layer.bias
        if layer.hidden:
            out[f"{prefix}{i}.gain"] = layer.gain
            out[f"{prefix}{i}.offset"] = layer.offset
    return out


def params_from_arrays(sizes: list[int], arrays: dict[str, np.ndarray], prefix: str = "") -> MlpParams:
    layers = []
    n = len(sizes) - 1
    try:
        for i in range(n):
            if i < n - 1:
                layers.append(
                    Layer(
                        arrays[f"{prefix}{i}.weight"],
                        arrays[f"{prefix}{i}.bias"],
                        arrays[f"{prefix}{i}.gain"],
                        arrays[f"{prefix}{i}.offset"],
                    )
                )
            else:
                layers.append(Layer(arrays[f"{prefix}{i}.weight"], arrays[f"{prefix}{i}.bias"]))
    except KeyError as exc:
        raise ShapeError(f"missing parameter array {exc}") from None
    params = MlpParams(layers)
    if params.sizes != list(sizes):
        raise ShapeError(f"header sizes {sizes} disagree with stored arrays {params.sizes}")
    params.validate()
    return params


def save_mlp(params: MlpParams, path: str | Path) -> None:
    meta = {"kind": "mlp", "sizes": params.sizes, "hidden_activation": "gelu", "layer_norm": True}
    archive.write(path, meta, params_to_arrays(params))


def load_mlp(path: str | Path) -> MlpParams:
    meta, arrays = archive.read(path)
    if meta.get("kind") != "mlp":
        raise archive.ArchiveError("not an mlp checkpoint")
    return params_from_arrays(meta["sizes"], arrays)
