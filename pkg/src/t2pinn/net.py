"""The 1 -> C -> C -> 1 tanh network and its exact derivatives.

``forward`` carries a forward-mode tangent alongside the value, giving
``dN/dt`` in the same pass. ``grad_wrt_params`` then runs reverse
accumulation through both the value path and the tangent path, so the
physics loss (which depends on ``dN/dt``) gets exact parameter gradients.

The input is scaled as ``x = t / t_scale`` before entering the network;
derivatives are always reported with respect to physical time in ms. The
trainable T2 is ``t_scale * softplus(rho)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, fields

import numpy as np

FORMAT_VERSION = 1
_MAGIC = b"T2PINN-MLP\n"
PARAM_ORDER = ("w1", "b1", "w2", "b2", "w3", "b3", "rho")


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y: float) -> float:
    if y <= 0:
        raise ValueError(f"softplus range is (0, inf), got {y}")
    return y + math.log(-math.expm1(-y))


def sigmoid(x):
    """Derivative of :func:`softplus`."""
    return np.exp(-np.logaddexp(0.0, -x))


@dataclass
class MlpParams:
    w1: np.ndarray  # (C,)  first-layer weights (C x 1 matrix, stored flat)
    b1: np.ndarray  # (C,)
    w2: np.ndarray  # (C, C)
    b2: np.ndarray  # (C,)
    w3: np.ndarray  # (C,)  output weights (1 x C matrix, stored flat)
    b3: float
    rho: float = 0.0
    t_scale: float = 1.0

    @property
    def width(self) -> int:
        return self.w1.shape[0]

    @property
    def t2(self) -> float:
        return float(self.t_scale * softplus(self.rho))

    def to_flat(self) -> np.ndarray:
        """Trainables in :data:`PARAM_ORDER`, ``w2`` row-major."""
        return np.concatenate(
            [self.w1, self.b1, self.w2.ravel(), self.b2, self.w3, [self.b3, self.rho]]
        ).astype(np.float64)

    @classmethod
    def from_flat(cls, flat, width: int, t_scale: float = 1.0) -> MlpParams:
        flat = np.asarray(flat, dtype=np.float64)
        c = width
        if flat.shape != (n_params(c),):
            raise ValueError(f"expected {n_params(c)} values for width {c}, got {flat.shape}")
        o = np.cumsum([0, c, c, c * c, c, c])
        return cls(
            w1=flat[o[0] : o[1]].copy(),
            b1=flat[o[1] : o[2]].copy(),
            w2=flat[o[2] : o[3]].reshape(c, c).copy(),
            b2=flat[o[3] : o[4]].copy(),
            w3=flat[o[4] : o[5]].copy(),
            b3=float(flat[o[5]]),
            rho=float(flat[o[5] + 1]),
            t_scale=float(t_scale),
        )

    def zeros_like(self) -> MlpParams:
        return MlpParams.from_flat(np.zeros(n_params(self.width)), self.width, self.t_scale)

    def copy(self) -> MlpParams:
        return MlpParams.from_flat(self.to_flat(), self.width, self.t_scale)

    def to_bytes(self) -> bytes:
        """Small JSON header followed by float64 little-endian trainables."""
        header = json.dumps(
            {"version": FORMAT_VERSION, "width": self.width, "t_scale": self.t_scale, "order": list(PARAM_ORDER)}
        ).encode()
        return _MAGIC + struct.pack("<I", len(header)) + header + self.to_flat().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> MlpParams:
        if not blob.startswith(_MAGIC):
            raise ValueError("not a serialized MlpParams blob")
        pos = len(_MAGIC)
        (hlen,) = struct.unpack_from("<I", blob, pos)
        header = json.loads(blob[pos + 4 : pos + 4 + hlen])
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported MlpParams version {header.get('version')}")
        payload = np.frombuffer(blob[pos + 4 + hlen :], dtype="<f8")
        return cls.from_flat(payload, int(header["width"]), float(header["t_scale"]))


def n_params(width: int) -> int:
    return width * width + 4 * width + 2


def init_params(c: int = 8, seed: int | np.random.SeedSequence = 0, *, t_scale: float = 1.0, t2: float | None = None) -> MlpParams:
    """Uniform weights in ``+-sqrt(1/fan_in)``, zero biases.

    ``rho`` is set so that the parameter's T2 equals ``t2`` when given.
    """
    if c < 1:
        raise ValueError(f"width must be >= 1, got {c}")
    rng = np.random.default_rng(seed)
    s = math.sqrt(1.0 / c)
    w1 = rng.uniform(-1.0, 1.0, c)
    w2 = rng.uniform(-s, s, (c, c))
    w3 = rng.uniform(-s, s, c)
    rho = softplus_inv(t2 / t_scale) if t2 is not None else 0.0
    return MlpParams(w1, np.zeros(c), w2, np.zeros(c), w3, 0.0, rho, float(t_scale))


@dataclass
class EvalRecord:
    """Forward pass at one or more times, with the activations backprop needs."""

    t: np.ndarray
    value: np.ndarray
    dvalue_dt: np.ndarray
    x: np.ndarray
    a1: np.ndarray  # (N, C)
    d1: np.ndarray  # d a1 / dt
    a2: np.ndarray
    dz2: np.ndarray  # d z2 / dt


def forward(p: MlpParams, t) -> EvalRecord:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    s = 1.0 / p.t_scale
    x = t * s
    a1 = np.tanh(np.multiply.outer(x, p.w1) + p.b1)
    d1 = (1.0 - a1 * a1) * (p.w1 * s)
    # Sums are accumulated in a fixed order rather than through BLAS, so each
    # point's result is bit-identical whatever the batch it is evaluated in.
    z2 = np.broadcast_to(p.b2, a1.shape).copy()
    dz2 = np.zeros_like(a1)
    for j in range(p.width):
        z2 += a1[:, j, None] * p.w2[:, j]
        dz2 += d1[:, j, None] * p.w2[:, j]
    a2 = np.tanh(z2)
    g2 = 1.0 - a2 * a2
    value = np.full(t.shape, p.b3)
    dvalue = np.zeros(t.shape)
    for i in range(p.width):
        value += p.w3[i] * a2[:, i]
        dvalue += p.w3[i] * g2[:, i] * dz2[:, i]
    return EvalRecord(t, value, dvalue, x, a1, d1, a2, dz2)


def grad_wrt_params(p: MlpParams, rec: EvalRecord, coeff_value, coeff_dvalue) -> MlpParams:
    """Gradient of ``sum(coeff_value * N(t) + coeff_dvalue * dN/dt(t))``.

    Coefficients broadcast against ``rec.t``. The returned ``rho`` entry is 0;
    T2 enters only through the loss, which the trainer differentiates.
    """
    n = rec.t.shape[0]
    cv = np.broadcast_to(np.asarray(coeff_value, dtype=np.float64), (n,))
    cd = np.broadcast_to(np.asarray(coeff_dvalue, dtype=np.float64), (n,))
    s = 1.0 / p.t_scale
    a1, d1, a2, dz2 = rec.a1, rec.d1, rec.a2, rec.dz2
    g1 = 1.0 - a1 * a1
    g2 = 1.0 - a2 * a2

    g_b3 = cv.sum()
    g_w3 = cv @ a2 + cd @ (g2 * dz2)
    # adjoints of z2 (value path) and of its tangent dz2
    zb = np.outer(cd, p.w3) * g2
    za = np.outer(cv, p.w3) * g2 - 2.0 * zb * a2 * dz2
    g_w2 = za.T @ a1 + zb.T @ d1
    g_b2 = za.sum(axis=0)
    bar_a1 = za @ p.w2
    bar_d1 = zb @ p.w2
    bar_a1 = bar_a1 - 2.0 * bar_d1 * a1 * (p.w1 * s)
    bar_z1 = bar_a1 * g1
    g_w1 = rec.x @ bar_z1 + s * (bar_d1 * g1).sum(axis=0)
    g_b1 = bar_z1.sum(axis=0)
    return MlpParams(g_w1, g_b1, g_w2, g_b2, g_w3, float(g_b3), 0.0, p.t_scale)


def perturbed(p: MlpParams, index: int, delta: float) -> MlpParams:
    """Copy of ``p`` with flat trainable ``index`` shifted by ``delta``."""
    flat = p.to_flat()
    flat[index] += delta
    return MlpParams.from_flat(flat, p.width, p.t_scale)


def param_names(width: int) -> list[str]:
    names = []
    for f in fields(MlpParams):
        if f.name in ("t_scale",):
            continue
        if f.name in ("b3", "rho"):
            names.append(f.name)
        elif f.name == "w2":
            names += [f"w2[{i},{j}]" for i in range(width) for j in range(width)]
        else:
            names += [f"{f.name}[{i}]" for i in range(width)]
    return names


__all__ = [
    "EvalRecord",
    "MlpParams",
    "forward",
    "grad_wrt_params",
    "init_params",
    "n_params",
    "param_names",
    "perturbed",
    "softplus",
    "softplus_inv",
]
