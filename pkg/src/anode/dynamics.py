"""Parametric right-hand sides ``f(z, theta)`` with exact vector-Jacobian products.

Every field takes its parameters as one flat float64 vector ``theta`` and
records how that vector is laid out in :attr:`VectorField.layout`.  Fields
carry a default ``theta`` but every method accepts an explicit one, which is
what the gradient code and the trainer pass around.

Leading batch axes on ``z`` are allowed for the dense and convolutional
fields; ``vjp_theta`` sums over them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core_math import Rng, as_rng, gaussian_tensor, norm2, operator_norm


@dataclass(frozen=True)
class Activation:
    name: str = "identity"
    slope: float = 0.01

    def __post_init__(self):
        if self.name not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.name!r}")

    def __call__(self, x):
        if self.name == "identity":
            return x
        if self.name == "relu":
            return np.maximum(x, 0.0)
        if self.name == "leaky_relu":
            return np.where(x > 0, x, self.slope * x)
        return np.logaddexp(0.0, x)

    def grad(self, x):
        # a.e. derivative; the kink at 0 gets derivative 0 (relu) / slope (leaky)
        if self.name == "identity":
            return np.ones_like(x)
        if self.name == "relu":
            return (x > 0).astype(np.float64)
        if self.name == "leaky_relu":
            return np.where(x > 0, 1.0, self.slope)
        return 0.5 * (1.0 + np.tanh(0.5 * x))

    @property
    def smooth(self) -> bool:
        return self.name in ("identity", "softplus")

    def to_spec(self):
        if self.name == "leaky_relu":
            return {"name": self.name, "slope": self.slope}
        return self.name


ACTIVATIONS = ("identity", "relu", "leaky_relu", "softplus")


def activation(spec) -> Activation:
    if isinstance(spec, Activation):
        return spec
    if isinstance(spec, dict):
        return Activation(spec["name"], spec.get("slope", 0.01))
    return Activation(spec or "identity")


@dataclass(frozen=True)
class ParamSlot:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return math.prod(self.shape)


class VectorField:
    """Base class; subclasses fill in ``_eval``, ``_vjp_z`` and ``_vjp_theta``."""

    kind = "abstract"

    def __init__(self, theta=None, layout=()):
        self.layout = list(layout)
        self.n_params = sum(s.size for s in self.layout)
        self.theta = np.zeros(0) if theta is None else np.asarray(theta, dtype=np.float64).ravel()
        if self.theta.size != self.n_params:
            raise ValueError(f"{self.kind}: expected {self.n_params} parameters, got {self.theta.size}")

    def _theta(self, theta):
        if theta is None:
            return self.theta
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.n_params:
            raise ValueError(f"{self.kind}: expected {self.n_params} parameters, got {theta.size}")
        return theta

    def __call__(self, z, theta=None):
        return self._eval(z, self._theta(theta))

    def vjp_z(self, z, theta, v):
        """``(df/dz)^T v``, shaped like ``z``."""
        return self._vjp_z(z, self._theta(theta), v)

    def vjp_theta(self, z, theta, v):
        """``(df/dtheta)^T v``, shaped like ``theta``."""
        return self._vjp_theta(z, self._theta(theta), v)

    def preactivation(self, z, theta=None):
        """Arguments fed to non-smooth activations, or ``None`` if the field is smooth."""
        return None

    def unpack(self, theta=None) -> dict:
        theta = self._theta(theta)
        return {s.name: theta[s.offset:s.offset + s.size].reshape(s.shape) for s in self.layout}

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def to_spec(self) -> dict:
        return {"kind": self.kind}

    def __repr__(self):
        return f"{type(self).__name__}(n_params={self.n_params})"


def evaluate(field: VectorField, z, theta=None):
    return field(z, theta)


class ZeroField(VectorField):
    kind = "zero"

    def _eval(self, z, theta):
        return np.zeros_like(z, dtype=np.float64)

    def _vjp_z(self, z, theta, v):
        return np.zeros_like(z, dtype=np.float64)

    def _vjp_theta(self, z, theta, v):
        return np.zeros(0)


class ConstantField(VectorField):
    """``f(z) = c``; ``c`` broadcasts against ``z`` from the right."""

    kind = "constant"

    def __init__(self, c):
        c = np.atleast_1d(np.asarray(c, dtype=np.float64))
        self.c_shape = c.shape
        super().__init__(c.ravel(), [ParamSlot("c", 0, c.shape)])

    def _eval(self, z, theta):
        return np.broadcast_to(theta.reshape(self.c_shape), np.shape(z)).astype(np.float64)

    def _vjp_z(self, z, theta, v):
        return np.zeros_like(z, dtype=np.float64)

    def _vjp_theta(self, z, theta, v):
        g = np.asarray(v, dtype=np.float64)
        lead = g.ndim - len(self.c_shape)
        if lead > 0:
            g = g.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, n in enumerate(self.c_shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return g.reshape(-1)

    def to_spec(self):
        return {"kind": self.kind, "c": self.theta.tolist()}


class ScalarLinear(VectorField):
    """``f(z) = lam * z`` elementwise."""

    kind = "scalar_linear"

    def __init__(self, lam):
        super().__init__([lam], [ParamSlot("lam", 0, (1,))])

    def _eval(self, z, theta):
        return theta[0] * z

    def _vjp_z(self, z, theta, v):
        return theta[0] * v

    def _vjp_theta(self, z, theta, v):
        return np.array([np.vdot(z, v)])

    def to_spec(self):
        return {"kind": self.kind, "lam": float(self.theta[0])}


class ScalarRelu(VectorField):
    """``f(z) = a * max(0, b * z)`` elementwise."""

    kind = "scalar_relu"

    def __init__(self, a, b):
        super().__init__([a, b], [ParamSlot("a", 0, (1,)), ParamSlot("b", 1, (1,))])

    def _eval(self, z, theta):
        return theta[0] * np.maximum(theta[1] * z, 0.0)

    def _vjp_z(self, z, theta, v):
        a, b = theta
        return a * b * (b * z > 0) * v

    def _vjp_theta(self, z, theta, v):
        a, b = theta
        pre = b * z
        mask = pre > 0
        return np.array([np.vdot(np.maximum(pre, 0.0), v), a * np.vdot(mask * z, v)])

    def preactivation(self, z, theta=None):
        return self._theta(theta)[1] * np.asarray(z)

    def lipschitz(self, theta=None) -> float:
        a, b = self._theta(theta)
        return abs(a * b)

    def to_spec(self):
        return {"kind": self.kind, "a": float(self.theta[0]), "b": float(self.theta[1])}


class Quadratic(VectorField):
    """``f(z) = c * z**2`` elementwise; the smallest field whose Jacobian moves with ``z``."""

    kind = "quadratic"

    def __init__(self, c=1.0):
        super().__init__([c], [ParamSlot("c", 0, (1,))])

    def _eval(self, z, theta):
        return theta[0] * z * z

    def _vjp_z(self, z, theta, v):
        return 2.0 * theta[0] * z * v

    def _vjp_theta(self, z, theta, v):
        return np.array([np.vdot(z * z, v)])

    def to_spec(self):
        return {"kind": self.kind, "c": float(self.theta[0])}


class Dense(VectorField):
    """``act(W z + b)`` acting on the last axis of ``z``.

    Used both as an ODE right-hand side (square ``W``) and as a plain
    network layer or a stage inside :class:`Composite`.
    """

    kind = "dense"

    def __init__(self, weight, bias=None, act="identity"):
        weight = np.asarray(weight, dtype=np.float64)
        if weight.ndim != 2:
            raise ValueError("weight must be a matrix")
        self.n_out, self.n_in = weight.shape
        self.has_bias = bias is not None
        self.act = activation(act)
        layout = [ParamSlot("W", 0, weight.shape)]
        parts = [weight.ravel()]
        if self.has_bias:
            bias = np.asarray(bias, dtype=np.float64).ravel()
            if bias.size != self.n_out:
                raise ValueError("bias length must match output dimension")
            layout.append(ParamSlot("b", weight.size, (self.n_out,)))
            parts.append(bias)
        super().__init__(np.concatenate(parts), layout)

    def _wb(self, theta):
        w = theta[: self.n_out * self.n_in].reshape(self.n_out, self.n_in)
        b = theta[self.n_out * self.n_in:] if self.has_bias else None
        return w, b

    def _check(self, z):
        if np.shape(z)[-1:] != (self.n_in,):
            raise ValueError(f"{self.kind}: state of shape {np.shape(z)} does not match input dim {self.n_in}")

    def _pre(self, z, theta):
        self._check(z)
        w, b = self._wb(theta)
        pre = z @ w.T
        if b is not None:
            pre = pre + b
        return pre

    def _eval(self, z, theta):
        return self.act(self._pre(z, theta))

    def _vjp_z(self, z, theta, v):
        w, _ = self._wb(theta)
        g = v if self.act.name == "identity" else v * self.act.grad(self._pre(z, theta))
        return g @ w

    def _vjp_theta(self, z, theta, v):
        g = v if self.act.name == "identity" else v * self.act.grad(self._pre(z, theta))
        g2 = np.reshape(g, (-1, self.n_out))
        gw = g2.T @ np.reshape(z, (-1, self.n_in))
        if self.has_bias:
            return np.concatenate([gw.ravel(), g2.sum(axis=0)])
        return gw.ravel()

    def preactivation(self, z, theta=None):
        if self.act.smooth:
            return None
        return self._pre(z, self._theta(theta))

    def out_shape(self, in_shape):
        return tuple(in_shape[:-1]) + (self.n_out,)

    def lipschitz(self, theta=None, iterations: int = 200) -> float:
        w, _ = self._wb(self._theta(theta))
        from .core_math import spectral_norm

        slope = 1.0 if self.act.name != "leaky_relu" else max(1.0, abs(self.act.slope))
        return slope * spectral_norm(w, iterations)

    def to_spec(self):
        w, b = self._wb(self.theta)
        spec = {"kind": self.kind, "W": w.tolist(), "act": self.act.to_spec()}
        if b is not None:
            spec["b"] = b.tolist()
        return spec


def linear(weight, c=None) -> Dense:
    """``f(z) = W z + c``."""
    return Dense(weight, c, "identity")


def matrix_relu(weight) -> Dense:
    """``f(z) = max(0, W z)``."""
    return Dense(weight, None, "relu")


def _shifted(zp, h, w):
    """Stack of the nine 3x3 shifts of a padded array: ``(..., C, 3, 3, H, W)``."""
    rows = []
    for dy in range(3):
        rows.append(np.stack([zp[..., dy:dy + h, dx:dx + w] for dx in range(3)], axis=-3))
    return np.stack(rows, axis=-4)


class Conv2dBlock(VectorField):
    """3x3 stride-1 zero-padded convolution followed by an activation.

    State layout is ``(C, H, W)`` with optional leading batch axes; the
    kernel is ``(C_out=C, C_in=C, 3, 3)`` and applied as a correlation.
    """

    kind = "conv2d_block"

    def __init__(self, kernel, act="relu", bias=None):
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.ndim == 2:
            kernel = kernel[None, None]
        if kernel.shape[2:] != (3, 3) or kernel.shape[0] != kernel.shape[1]:
            raise ValueError("kernel must have shape (C, C, 3, 3)")
        self.channels = kernel.shape[0]
        self.act = activation(act)
        self.has_bias = bias is not None
        layout = [ParamSlot("K", 0, kernel.shape)]
        parts = [kernel.ravel()]
        if self.has_bias:
            bias = np.asarray(bias, dtype=np.float64).ravel()
            layout.append(ParamSlot("b", kernel.size, (self.channels,)))
            parts.append(bias)
        super().__init__(np.concatenate(parts), layout)

    def _kb(self, theta):
        c = self.channels
        k = theta[: c * c * 9].reshape(c, c, 3, 3)
        b = theta[c * c * 9:] if self.has_bias else None
        return k, b

    def _check(self, z):
        if np.ndim(z) < 3 or np.shape(z)[-3] != self.channels:
            raise ValueError(f"conv2d_block: expected (..., {self.channels}, H, W), got {np.shape(z)}")

    def _patches(self, z):
        pad = [(0, 0)] * (np.ndim(z) - 2) + [(1, 1), (1, 1)]
        zp = np.pad(z, pad)
        return _shifted(zp, z.shape[-2], z.shape[-1])

    def conv(self, z, kernel):
        return np.einsum("oikl,...iklhw->...ohw", kernel, self._patches(z), optimize=True)

    def conv_t(self, v, kernel):
        """Adjoint of :meth:`conv` with respect to its input."""
        h, w = v.shape[-2], v.shape[-1]
        gp = np.einsum("oikl,...ohw->...iklhw", kernel, v, optimize=True)
        out = np.zeros(v.shape[:-2] + (h + 2, w + 2))
        for dy in range(3):
            for dx in range(3):
                out[..., dy:dy + h, dx:dx + w] += gp[..., dy, dx, :, :]
        return out[..., 1:-1, 1:-1]

    def _pre(self, z, theta):
        self._check(z)
        k, b = self._kb(theta)
        pre = self.conv(z, k)
        if b is not None:
            pre = pre + b[:, None, None]
        return pre

    def _eval(self, z, theta):
        return self.act(self._pre(z, theta))

    def _vjp_z(self, z, theta, v):
        k, _ = self._kb(theta)
        g = v if self.act.name == "identity" else v * self.act.grad(self._pre(z, theta))
        return self.conv_t(g, k)

    def _vjp_theta(self, z, theta, v):
        g = v if self.act.name == "identity" else v * self.act.grad(self._pre(z, theta))
        gk = np.einsum("...ohw,...iklhw->oikl", g, self._patches(z), optimize=True)
        if self.has_bias:
            return np.concatenate([gk.ravel(), np.reshape(g, (-1,) + g.shape[-3:]).sum(axis=(0, 2, 3))])
        return gk.ravel()

    def preactivation(self, z, theta=None):
        if self.act.smooth:
            return None
        return self._pre(z, self._theta(theta))

    def operator_norm(self, shape, theta=None, iterations: int = 100) -> float:
        """Spectral norm of the convolution (without activation) on states of ``shape``."""
        k, _ = self._kb(self._theta(theta))
        return operator_norm(lambda x: self.conv(x, k), lambda y: self.conv_t(y, k), shape, iterations)

    def to_spec(self):
        k, b = self._kb(self.theta)
        spec = {"kind": self.kind, "K": k.tolist(), "act": self.act.to_spec()}
        if b is not None:
            spec["b"] = b.tolist()
        return spec


class Composite(VectorField):
    """``f = g_k o ... o g_1``; the parts' parameters are concatenated in order."""

    kind = "residual_composite"

    def __init__(self, parts):
        self.parts = list(parts)
        if not self.parts:
            raise ValueError("composite needs at least one part")
        layout, offset, chunks = [], 0, []
        for i, p in enumerate(self.parts):
            for s in p.layout:
                layout.append(ParamSlot(f"{i}.{s.name}", offset + s.offset, s.shape))
            offset += p.n_params
            chunks.append(p.theta)
        self._offsets = np.cumsum([0] + [p.n_params for p in self.parts])
        super().__init__(np.concatenate(chunks) if chunks else np.zeros(0), layout)

    def _split(self, theta):
        return [theta[self._offsets[i]:self._offsets[i + 1]] for i in range(len(self.parts))]

    def _forward(self, z, theta):
        xs = [z]
        for p, th in zip(self.parts, self._split(theta)):
            xs.append(p._eval(xs[-1], th))
        return xs

    def _eval(self, z, theta):
        out = self._forward(z, theta)[-1]
        if np.shape(out) != np.shape(z):
            raise ValueError("composite field must preserve the state shape")
        return out

    def _backward(self, z, theta, v):
        xs = self._forward(z, theta)
        ths = self._split(theta)
        grads = [None] * len(self.parts)
        g = v
        for i in range(len(self.parts) - 1, -1, -1):
            grads[i] = self.parts[i]._vjp_theta(xs[i], ths[i], g)
            g = self.parts[i]._vjp_z(xs[i], ths[i], g)
        return g, grads

    def _vjp_z(self, z, theta, v):
        return self._backward(z, theta, v)[0]

    def _vjp_theta(self, z, theta, v):
        grads = self._backward(z, theta, v)[1]
        return np.concatenate(grads) if grads else np.zeros(0)

    def vjp(self, z, theta, v):
        """Both products from one forward/backward pass."""
        gz, grads = self._backward(z, self._theta(theta), v)
        return gz, np.concatenate(grads)

    def preactivation(self, z, theta=None):
        theta = self._theta(theta)
        xs = self._forward(z, theta)
        pres = []
        for p, x, th in zip(self.parts, xs, self._split(theta)):
            pre = p.preactivation(x, th)
            if pre is not None:
                pres.append(np.ravel(pre))
        return np.concatenate(pres) if pres else None

    def out_shape(self, in_shape):
        for p in self.parts:
            in_shape = p.out_shape(in_shape)
        return in_shape

    def to_spec(self):
        return {"kind": self.kind, "parts": [p.to_spec() for p in self.parts]}


class Negated(VectorField):
    """``-f``; the right-hand side of the reverse-time flow."""

    def __init__(self, field: VectorField):
        self.field = field
        self.kind = f"neg_{field.kind}"
        super().__init__(field.theta, field.layout)

    def _eval(self, z, theta):
        return -self.field._eval(z, theta)

    def _vjp_z(self, z, theta, v):
        return -self.field._vjp_z(z, theta, v)

    def _vjp_theta(self, z, theta, v):
        return -self.field._vjp_theta(z, theta, v)

    def preactivation(self, z, theta=None):
        return self.field.preactivation(z, theta)


def vjp(field: VectorField, z, theta, v):
    """``(vjp_z, vjp_theta)``; composites share one forward pass."""
    if isinstance(field, Composite):
        return field.vjp(z, theta, v)
    return field.vjp_z(z, theta, v), field.vjp_theta(z, theta, v)


def min_abs_preactivation(field: VectorField, z, theta=None) -> float:
    pre = field.preactivation(z, theta)
    if pre is None or np.size(pre) == 0:
        return math.inf
    return float(np.min(np.abs(pre)))


# ---------------------------------------------------------------------------
# construction from config dictionaries


def _init_matrix(rng, n_out, n_in, scale=None):
    std = 1.0 / math.sqrt(n_in) if scale is None else scale
    return gaussian_tensor(rng, (n_out, n_in), 0.0, std)


def field_from_spec(spec: dict, rng=None) -> VectorField:
    """Build a field from a JSON-style dictionary.

    Explicit parameter arrays (``W``, ``K``, ``lam`` ...) are used verbatim;
    otherwise weights are drawn from ``rng`` (Gaussian, std ``1/sqrt(fan_in)``
    unless ``std`` is given).
    """
    rng = as_rng(spec.get("seed", rng) if isinstance(spec, dict) else rng)
    kind = spec["kind"]
    if kind == "zero":
        return ZeroField()
    if kind == "constant":
        return ConstantField(spec.get("c", 1.0))
    if kind == "scalar_linear":
        return ScalarLinear(spec.get("lam", -1.0))
    if kind == "scalar_relu":
        return ScalarRelu(spec.get("a", -1.0), spec.get("b", 10.0))
    if kind == "quadratic":
        return Quadratic(spec.get("c", 1.0))
    if kind in ("dense", "linear", "matrix_relu"):
        act = spec.get("act", {"linear": "identity", "matrix_relu": "relu"}.get(kind, "identity"))
        if "W" in spec:
            w = np.asarray(spec["W"], dtype=np.float64)
        else:
            n_in = int(spec.get("n_in", spec.get("n", 2)))
            n_out = int(spec.get("n_out", spec.get("n", n_in)))
            w = _init_matrix(rng, n_out, n_in, spec.get("std"))
            if spec.get("normalize"):
                from .core_math import spectral_norm

                w = w / spectral_norm(w, 500) * float(spec.get("target_norm", 1.0))
        b = spec.get("b")
        if b is None and spec.get("bias", kind == "linear"):
            b = np.zeros(w.shape[0])
        return Dense(w, b, act)
    if kind == "conv2d_block":
        if "K" in spec:
            k = np.asarray(spec["K"], dtype=np.float64)
        else:
            c = int(spec.get("channels", 1))
            k = gaussian_tensor(rng, (c, c, 3, 3), 0.0, spec.get("std", 1.0 / math.sqrt(9 * c)))
        b = spec.get("b")
        if b is None and spec.get("bias", False):
            b = np.zeros(k.shape[0])
        field = Conv2dBlock(k, spec.get("act", "relu"), b)
        if spec.get("normalize"):
            shape = tuple(spec.get("norm_shape", (field.channels, 16, 16)))
            scale = float(spec.get("target_norm", 1.0)) / field.operator_norm(shape, iterations=200)
            theta = field.theta.copy()
            theta[: k.size] *= scale
            field = Conv2dBlock(theta[: k.size].reshape(k.shape), field.act, b)
        return field
    if kind in ("residual_composite", "composite"):
        return Composite([field_from_spec(p, rng) for p in spec["parts"]])
    raise ValueError(f"unknown field kind {kind!r}")


def check_vjp(field: VectorField, z=None, theta=None, trials: int = 3, h: float = 1e-5,
              rng=None, max_resample: int = 50) -> float:
    """Worst relative error of ``vjp_z``/``vjp_theta`` against central differences of ``v^T f``.

    ``z`` is used as given unless some pre-activation lies within ``10 h``
    of a kink, in which case (or when ``z`` is ``None``) points are redrawn
    from a standard normal of the same shape.
    """
    if not 1e-8 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-8, 1e-3]")
    rng = as_rng(rng)
    theta = field._theta(theta).copy()
    if z is None:
        raise ValueError("a state (or a template of the right shape) is required")
    z0 = np.asarray(z, dtype=np.float64)
    worst = 0.0
    for _ in range(trials):
        zt = z0
        tries = 0
        while min_abs_preactivation(field, zt, theta) < 10 * h:
            tries += 1
            if tries > max_resample:
                raise RuntimeError("could not find a kink-free sample")
            zt = gaussian_tensor(rng, z0.shape)
        out = field(zt, theta)
        v = gaussian_tensor(rng, np.shape(out)) if np.ndim(out) else rng.normal(1)[0]
        gz, gt = vjp(field, zt, theta, v)
        fd_z = np.zeros(zt.size)
        zf = zt.ravel().copy()
        for j in range(zt.size):
            old = zf[j]
            zf[j] = old + h
            fp = np.vdot(v, field(zf.reshape(zt.shape), theta))
            zf[j] = old - h
            fm = np.vdot(v, field(zf.reshape(zt.shape), theta))
            zf[j] = old
            fd_z[j] = (fp - fm) / (2 * h)
        fd_t = np.zeros(theta.size)
        th = theta.copy()
        for j in range(theta.size):
            old = th[j]
            th[j] = old + h
            fp = np.vdot(v, field(zt, th))
            th[j] = old - h
            fm = np.vdot(v, field(zt, th))
            th[j] = old
            fd_t[j] = (fp - fm) / (2 * h)
        an = np.concatenate([np.ravel(gz), np.ravel(gt)])
        fd = np.concatenate([fd_z, fd_t])
        scale = max(norm2(an), norm2(fd))
        err = 0.0 if scale == 0.0 else norm2(an - fd) / scale
        worst = max(worst, err)
    return worst


__all__ = [
    "Activation", "ACTIVATIONS", "activation", "ParamSlot", "VectorField", "evaluate",
    "ZeroField", "ConstantField", "ScalarLinear", "ScalarRelu", "Quadratic", "Dense",
    "linear", "matrix_relu", "Conv2dBlock", "Composite", "Negated", "vjp",
    "min_abs_preactivation", "field_from_spec", "check_vjp", "Rng",
]
