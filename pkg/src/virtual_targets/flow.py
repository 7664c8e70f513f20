"""Conditional masked autoregressive flow with rational-quadratic spline transforms.

Direction convention: :meth:`CnfModel.forward` maps data ``x`` to the base
variable ``z`` (density direction), :meth:`CnfModel.inverse` maps ``z`` back to
``x`` (sampling direction).

Each layer transforms the dimensions in its own order.  The spline for the
``j``-th dimension in that order is parameterized by a dedicated MLP that sees
the layer's *input* values of the preceding dimensions plus the normalized
time and dynamics parameters, so the Jacobian of every layer is triangular.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import MlpParams, Tensor, concat, init_mlp, mlp_forward, mlp_forward_tensor
from .core import NormalizationParams
from .errors import ContractViolation

FORMAT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SplineConfig:
    bins: int = 8
    tail_bound: float = 3.0
    min_bin_fraction: float = 1e-3  # floor per bin, as a fraction of the mean bin size

    def __post_init__(self) -> None:
        if self.bins < 2 or self.tail_bound <= 0:
            raise ContractViolation(f"need bins >= 2 and tail_bound > 0, got {self.bins}, {self.tail_bound}")

    @property
    def n_raw(self) -> int:
        """Raw conditioner outputs per dimension: K widths, K heights, K-1 interior slopes."""
        return 3 * self.bins - 1

    @property
    def min_bin(self) -> float:
        return self.min_bin_fraction * 2.0 * self.tail_bound / self.bins


@dataclass(frozen=True)
class SplineParams:
    """Explicit spline for one dimension; ``derivs`` includes both boundary slopes."""

    widths: np.ndarray
    heights: np.ndarray
    derivs: np.ndarray
    tail_bound: float

    def __post_init__(self) -> None:
        w, h, dv = (np.asarray(a, dtype=np.float64) for a in (self.widths, self.heights, self.derivs))
        k = len(w)
        if len(h) != k or len(dv) != k + 1:
            raise ContractViolation("need K widths, K heights and K+1 derivatives")
        if np.any(w <= 0) or np.any(h <= 0) or np.any(dv <= 0):
            raise ContractViolation("widths, heights and derivatives must be positive")
        span = 2.0 * self.tail_bound
        if not (math.isclose(w.sum(), span, rel_tol=1e-9) and math.isclose(h.sum(), span, rel_tol=1e-9)):
            raise ContractViolation("widths and heights must each sum to 2 * tail_bound")
        object.__setattr__(self, "widths", w)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "derivs", dv)

    @classmethod
    def identity(cls, bins: int = 8, tail_bound: float = 3.0) -> "SplineParams":
        size = 2.0 * tail_bound / bins
        return cls(np.full(bins, size), np.full(bins, size), np.ones(bins + 1), tail_bound)


def constrain(raw: np.ndarray, config: SplineConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map raw conditioner outputs ``(n, 3K-1)`` to widths, heights, interior slopes.

    Widths and heights are a softmax scaled to span ``2B`` with a per-bin floor;
    slopes are ``softplus(raw + softplus^-1(1))``.  Zero raw output therefore
    gives equal bins and unit slopes, i.e. the identity map.
    """
    k = config.bins
    scale = 2.0 * config.tail_bound - k * config.min_bin
    widths = _softmax(raw[:, :k]) * scale + config.min_bin
    heights = _softmax(raw[:, k : 2 * k]) * scale + config.min_bin
    derivs = _softplus(raw[:, 2 * k :] + ad.SOFTPLUS_INV_ONE)
    return widths, heights, derivs


# Reductions along a short last axis are slow in numpy; a matrix-vector
# product or a loop over columns is several times faster for K ~ 8.
def _row_sum(a: np.ndarray) -> np.ndarray:
    return (a @ np.ones(a.shape[1]))[:, None]


def _row_max(a: np.ndarray) -> np.ndarray:
    m = a[:, 0].copy()
    for i in range(1, a.shape[1]):
        np.maximum(m, a[:, i], out=m)
    return m[:, None]


def _knots(sizes: np.ndarray, bound: float) -> np.ndarray:
    """``[-B, -B + s0, -B + s0 + s1, ...]`` as one matrix product."""
    k = sizes.shape[1]
    upper = np.triu(np.ones((k, k + 1)), 1)
    return sizes @ upper - bound


def _bin_index(v: np.ndarray, knots: np.ndarray) -> np.ndarray:
    idx = np.zeros(len(v), dtype=np.intp)
    for i in range(1, knots.shape[1] - 1):
        idx += v >= knots[:, i]
    return idx


def _softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - _row_max(a))
    e /= _row_sum(e)
    return e


def _softplus(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))


def _rqs(xv: np.ndarray, wv: np.ndarray, hv: np.ndarray, dv: np.ndarray, bound: float):
    """Evaluate the spline; returns ``y``, ``log dy/dx`` and a vector-Jacobian product.

    The knots are cumulative sums of the bin sizes, so the gradient of a bin's
    lower knot flows to every bin below it.
    """
    n, k = wv.shape
    inside = (xv >= -bound) & (xv <= bound)
    xc = np.where(inside, xv, 0.0)
    xk = _knots(wv, bound)
    yk = _knots(hv, bound)
    ones = np.ones((n, 1))
    derivs = np.concatenate([ones, dv, ones], axis=1)

    idx = _bin_index(xc, xk)
    rows = np.arange(n)
    x_lo, y_lo = xk[rows, idx], yk[rows, idx]
    w, h = wv[rows, idx], hv[rows, idx]
    d0, d1 = derivs[rows, idx], derivs[rows, idx + 1]

    xi = (xc - x_lo) / w
    s = h / w
    om = 1.0 - xi
    t1 = xi * om
    c_sum = d0 + d1 - 2.0 * s
    den = s + c_sum * t1
    num = s * xi * xi + d0 * t1
    q = d1 * xi * xi + 2.0 * s * t1 + d0 * om * om
    y = np.where(inside, y_lo + h * num / den, xv)
    ld = np.where(inside, 2.0 * np.log(s) + np.log(q) - 2.0 * np.log(den), 0.0)

    def vjp(gy: np.ndarray, gl: np.ndarray):
        gy_in = np.where(inside, gy, 0.0)
        gl_in = np.where(inside, gl, 0.0)
        den2 = den * den
        dy_dxi = h * s * q / den2
        dy_ds = h * (xi * xi * den - num * (1.0 - 2.0 * t1)) / den2
        dy_dd0 = h * t1 * (den - num) / den2
        dy_dd1 = -h * num * t1 / den2
        dq_dxi = 2.0 * d1 * xi + 2.0 * s * (1.0 - 2.0 * xi) - 2.0 * d0 * om
        dl_dxi = dq_dxi / q - 2.0 * c_sum * (1.0 - 2.0 * xi) / den
        dl_ds = 2.0 / s + 2.0 * t1 / q - 2.0 * (1.0 - 2.0 * t1) / den
        dl_dd0 = om * om / q - 2.0 * t1 / den
        dl_dd1 = xi * xi / q - 2.0 * t1 / den

        g_xi = gy_in * dy_dxi + gl_in * dl_dxi
        g_s = gy_in * dy_ds + gl_in * dl_ds
        g_x = np.where(inside, g_xi / w, gy)
        g_w = -(g_xi * xi + g_s * s) / w
        g_h = gy_in * num / den + g_s / w

        below = np.arange(k)[None, :] < idx[:, None]
        gw_all = below * (-g_xi / w)[:, None]  # through the lower knot
        gw_all[rows, idx] += g_w
        gh_all = below * gy_in[:, None]
        gh_all[rows, idx] += g_h
        gd_all = np.zeros((n, k + 1))
        gd_all[rows, idx] += gy_in * dy_dd0 + gl_in * dl_dd0
        gd_all[rows, idx + 1] += gy_in * dy_dd1 + gl_in * dl_dd1
        return g_x, gw_all, gh_all, gd_all[:, 1:k]

    return y, ld, vjp


def rqs_forward(x: Tensor, widths: Tensor, heights: Tensor, inner_derivs: Tensor, bound: float) -> tuple[Tensor, Tensor]:
    """Rational-quadratic spline on ``[-bound, bound]``, identity outside.

    ``x`` is ``(n, 1)``; parameters are ``(n, K)``, ``(n, K)``, ``(n, K-1)``.
    Returns ``y`` and ``log dy/dx``, both ``(n, 1)``.
    """
    y, ld, vjp = _rqs(x.data[:, 0], widths.data, heights.data, inner_derivs.data, bound)

    def backward(g):
        gx, gw, gh, gd = vjp(g[:, 0], g[:, 1])
        return gx[:, None], gw, gh, gd

    both = Tensor(np.column_stack([y, ld]), parents=(x, widths, heights, inner_derivs), backward=backward)
    return both[:, 0:1], both[:, 1:2]


def rqs_from_raw(x: Tensor, raw: Tensor, config: SplineConfig) -> tuple[Tensor, Tensor]:
    """:func:`constrain` followed by :func:`rqs_forward`, fused into one graph node."""
    k = config.bins
    scale = 2.0 * config.tail_bound - k * config.min_bin
    r = raw.data
    sw = _softmax(r[:, :k])
    sh = _softmax(r[:, k : 2 * k])
    shifted = r[:, 2 * k :] + ad.SOFTPLUS_INV_ONE
    y, ld, vjp = _rqs(x.data[:, 0], sw * scale + config.min_bin, sh * scale + config.min_bin, _softplus(shifted), config.tail_bound)

    def backward(g):
        gx, gw, gh, gd = vjp(g[:, 0], g[:, 1])
        gw = gw * scale
        gh = gh * scale
        g_raw = np.concatenate(
            [
                sw * (gw - _row_sum(gw * sw)),
                sh * (gh - _row_sum(gh * sh)),
                gd * ad._sigmoid(shifted),
            ],
            axis=1,
        )
        return gx[:, None], g_raw

    both = Tensor(np.column_stack([y, ld]), parents=(x, raw), backward=backward)
    return both[:, 0:1], both[:, 1:2]


def rqs_inverse(
    y: np.ndarray, widths: np.ndarray, heights: np.ndarray, inner_derivs: np.ndarray, bound: float
) -> np.ndarray:
    """Analytic inverse of :func:`rqs_forward` (numpy only, ``y`` is ``(n,)``)."""
    n, k = widths.shape
    inside = (y >= -bound) & (y <= bound)
    yc = np.where(inside, y, 0.0)
    xk = _knots(widths, bound)
    yk = _knots(heights, bound)
    ones = np.ones((n, 1))
    derivs = np.concatenate([ones, inner_derivs, ones], axis=1)

    idx = _bin_index(yc, yk)[:, None]
    take = lambda a, i: np.take_along_axis(a, i, axis=1)[:, 0]  # noqa: E731
    x_lo, y_lo = take(xk, idx), take(yk, idx)
    w, h = take(widths, idx), take(heights, idx)
    d0, d1 = take(derivs, idx), take(derivs, idx + 1)

    s = h / w
    dy = yc - y_lo
    c_sum = d0 + d1 - 2.0 * s
    a = h * (s - d0) + dy * c_sum
    b = h * d0 - dy * c_sum
    c = -s * dy
    disc = np.maximum(b * b - 4.0 * a * c, 0.0)
    xi = (2.0 * c) / (-b - np.sqrt(disc))
    return np.where(inside, x_lo + xi * w, y)


def spline_forward(x: Any, params: SplineParams) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate one explicit spline at scalar or array ``x``; returns ``(y, log dy/dx)``."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    n = len(flat)
    _check_boundary_slopes(params)
    y, ld, _ = _rqs(
        flat,
        np.broadcast_to(params.widths, (n, len(params.widths))),
        np.broadcast_to(params.heights, (n, len(params.heights))),
        np.broadcast_to(params.derivs[1:-1], (n, len(params.derivs) - 2)),
        params.tail_bound,
    )
    return y.reshape(x.shape), ld.reshape(x.shape)


def spline_inverse(y: Any, params: SplineParams) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    flat = y.reshape(-1)
    n = len(flat)
    _check_boundary_slopes(params)
    x = rqs_inverse(
        flat,
        np.broadcast_to(params.widths, (n, len(params.widths))),
        np.broadcast_to(params.heights, (n, len(params.heights))),
        np.broadcast_to(params.derivs[1:-1], (n, len(params.derivs) - 2)),
        params.tail_bound,
    )
    return x.reshape(y.shape)


def _check_boundary_slopes(params: SplineParams) -> None:
    if params.derivs[0] != 1.0 or params.derivs[-1] != 1.0:
        raise ContractViolation("boundary derivatives are fixed to 1 to match the identity tails")


@dataclass
class FlowLayer:
    order: tuple[int, ...]
    nets: list[MlpParams]  # nets[j] drives dimension order[j]


@dataclass
class CnfModel:
    d: int
    n_psi: int
    layers: list[FlowLayer]
    spline: SplineConfig = field(default_factory=SplineConfig)
    norm: NormalizationParams | None = None
    frame_origin: np.ndarray | None = None  # model-frame start position, world units
    hidden: tuple[int, ...] = (32, 32)
    seed: int = 0

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_cond(self) -> int:
        return 1 + self.n_psi

    @classmethod
    def create(
        cls,
        d: int,
        n_psi: int = 0,
        n_layers: int = 4,
        spline: SplineConfig | None = None,
        hidden: Sequence[int] = (32, 32),
        seed: int = 0,
        norm: NormalizationParams | None = None,
        frame_origin: Sequence[float] | None = None,
        output_scale: float = 0.0,
    ) -> "CnfModel":
        """Build a model; with ``output_scale == 0`` it is exactly the identity map.

        A positive ``output_scale`` draws the output-layer weights and biases
        from ``N(0, output_scale**2)`` which gives a random, non-trivial flow.
        """
        if d not in (2, 3) or n_psi < 0 or n_layers < 1:
            raise ContractViolation(f"invalid model shape d={d}, n_psi={n_psi}, n_layers={n_layers}")
        spline = spline or SplineConfig()
        rng = np.random.default_rng(seed)
        layers = []
        for l in range(n_layers):
            order = tuple(range(d)) if l % 2 == 0 else tuple(reversed(range(d)))
            nets = []
            for j in range(d):
                sizes = [j + 1 + n_psi, *hidden, spline.n_raw]
                net = init_mlp(sizes, rng)
                if output_scale > 0:
                    net.weights[-1] = rng.normal(0.0, output_scale, net.weights[-1].shape)
                    net.biases[-1] = rng.normal(0.0, output_scale, net.biases[-1].shape)
                nets.append(net)
            layers.append(FlowLayer(order, nets))
        origin = None if frame_origin is None else np.asarray(frame_origin, dtype=np.float64)
        return cls(d, n_psi, layers, spline, norm, origin, tuple(hidden), seed)

    def parameters(self) -> list[np.ndarray]:
        return [a for layer in self.layers for net in layer.nets for a in net.arrays]

    def n_parameters(self) -> int:
        return sum(a.size for a in self.parameters())

    def copy(self) -> "CnfModel":
        layers = [FlowLayer(layer.order, [net.copy() for net in layer.nets]) for layer in self.layers]
        origin = None if self.frame_origin is None else self.frame_origin.copy()
        return CnfModel(self.d, self.n_psi, layers, self.spline, self.norm, origin, self.hidden, self.seed)

    # -- evaluation ---------------------------------------------------------
    def conditioning(self, t: Any, psi: Any, n: int) -> np.ndarray:
        """Stack normalized time and psi into an ``(n, 1 + n_psi)`` array."""
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        psi = np.zeros(0) if psi is None else np.asarray(psi, dtype=np.float64)
        if self.n_psi == 0 and psi.size == 0:
            psi = np.zeros((n, 0))
        elif psi.shape[-1:] != (self.n_psi,):
            raise ContractViolation(f"psi must have {self.n_psi} components, got shape {psi.shape}")
        psi = np.broadcast_to(psi, (n, self.n_psi))
        cond = np.column_stack([t, psi])
        if not np.all(np.isfinite(cond)):
            raise ContractViolation("conditioning values must be finite")
        return cond

    def _check_points(self, x: Any) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ContractViolation(f"expected points of dimension {self.d}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ContractViolation("input contains non-finite values")
        return x

    def forward_graph(
        self, x: np.ndarray, cond: np.ndarray, params: Sequence[Tensor] | None = None
    ) -> tuple[Tensor, Tensor]:
        """Recording forward pass; ``params`` (from :meth:`parameter_tensors`) enable gradients."""
        if params is None:
            params = [Tensor(a) for a in self.parameters()]
        n_net = 2 * len(self.hidden) + 2  # weight + bias per dense layer
        offset = 0
        cond_t = Tensor(cond)
        cols = [Tensor(x[:, i : i + 1]) for i in range(self.d)]
        logdet: Tensor | None = None
        for layer in self.layers:
            new_cols = list(cols)
            for j, dim in enumerate(layer.order):
                net_params = params[offset : offset + n_net]
                offset += n_net
                inp = concat([cols[p] for p in layer.order[:j]] + [cond_t], axis=1)
                raw = mlp_forward_tensor(net_params, inp)
                y, ld = rqs_from_raw(cols[dim], raw, self.spline)
                new_cols[dim] = y
                logdet = ld if logdet is None else logdet + ld
            cols = new_cols
        z = concat(cols, axis=1)
        return z, logdet[:, 0]

    def parameter_tensors(self) -> list[Tensor]:
        return [Tensor(a, requires_grad=True) for a in self.parameters()]

    def forward(self, x: Any, t: Any, psi: Any = None) -> tuple[np.ndarray, np.ndarray]:
        """Data to base: returns ``z`` ``(n, d)`` and ``log|det dz/dx|`` ``(n,)``."""
        x = self._check_points(x)
        z, logdet = self.forward_graph(x, self.conditioning(t, psi, len(x)))
        return z.data, logdet.data

    def inverse(self, z: Any, t: Any, psi: Any = None) -> np.ndarray:
        """Base to data; dimensions are recovered sequentially within each layer."""
        z = self._check_points(z)
        cond = self.conditioning(t, psi, len(z))
        u = z.copy()
        for layer in reversed(self.layers):
            y = u
            u = np.empty_like(y)
            for j, dim in enumerate(layer.order):
                inp = np.column_stack([u[:, list(layer.order[:j])], cond])
                w, h, dv = constrain(mlp_forward(layer.nets[j], inp), self.spline)
                u[:, dim] = rqs_inverse(y[:, dim], w, h, dv, self.spline.tail_bound)
        return u

    def log_density(self, x: Any, t: Any, psi: Any = None) -> np.ndarray:
        """``log p(x | t, psi)`` in normalized coordinates."""
        z, logdet = self.forward(x, t, psi)
        return base_log_density(z) + logdet

    def nll(self, x: np.ndarray, cond: np.ndarray, params: Sequence[Tensor] | None = None) -> Tensor:
        z, logdet = self.forward_graph(x, cond, params)
        log_p = (z * z).sum(axis=1) * -0.5 - 0.5 * self.d * LOG_2PI + logdet
        return -log_p.mean()

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "d": self.d,
            "n_psi": self.n_psi,
            "n_l": self.n_layers,
            "K": self.spline.bins,
            "B": self.spline.tail_bound,
            "min_bin_fraction": self.spline.min_bin_fraction,
            "hidden": list(self.hidden),
            "seed": self.seed,
            "normalization": None if self.norm is None else self.norm.to_dict(),
            "frame_origin": None if self.frame_origin is None else self.frame_origin.tolist(),
            "layers": [
                {
                    "order": list(layer.order),
                    "nets": [
                        {
                            "layer_sizes": list(net.layer_sizes),
                            "weights": [w.ravel().tolist() for w in net.weights],
                            "biases": [b.tolist() for b in net.biases],
                        }
                        for net in layer.nets
                    ],
                }
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CnfModel":
        if data.get("format_version") != FORMAT_VERSION:
            raise ContractViolation(f"unsupported checkpoint format {data.get('format_version')!r}")
        layers = []
        for spec in data["layers"]:
            nets = []
            for net in spec["nets"]:
                sizes = [int(s) for s in net["layer_sizes"]]
                weights = [
                    np.array(w, dtype=np.float64).reshape(sizes[i], sizes[i + 1]) for i, w in enumerate(net["weights"])
                ]
                biases = [np.array(b, dtype=np.float64) for b in net["biases"]]
                nets.append(MlpParams(sizes, weights, biases))
            layers.append(FlowLayer(tuple(int(o) for o in spec["order"]), nets))
        if len(layers) != data["n_l"]:
            raise ContractViolation("layer count does not match n_l")
        norm = data.get("normalization")
        origin = data.get("frame_origin")
        return cls(
            d=int(data["d"]),
            n_psi=int(data["n_psi"]),
            layers=layers,
            spline=SplineConfig(int(data["K"]), float(data["B"]), float(data.get("min_bin_fraction", 1e-3))),
            norm=None if norm is None else NormalizationParams.from_dict(norm),
            frame_origin=None if origin is None else np.array(origin, dtype=np.float64),
            hidden=tuple(int(h) for h in data["hidden"]),
            seed=int(data.get("seed", 0)),
        )


def base_log_density(z: np.ndarray) -> np.ndarray:
    """Standard normal log-density, summed over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * z.shape[-1] * LOG_2PI
