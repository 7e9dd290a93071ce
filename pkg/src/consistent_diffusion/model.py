"""Small fully connected denoiser with hand-written reverse-mode differentiation.

    h_theta(x, t) = x + sigma_t * core([x, sigma_t, log sigma_t])

``core`` is an MLP with smooth activations; all parameters live in one flat
vector so optimizers and gradient estimators can treat them uniformly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError, UsageError
from .schedule import NoiseSchedule

ACTIVATIONS = ("tanh", "softplus")
CHECKPOINT_MAGIC = b"CDNETCK\x00"
CHECKPOINT_VERSION = 1
TIME_FEATURES = 2


@dataclass
class DenoiserNet:
    dim: int
    widths: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    theta: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.dim < 1 or any(w < 1 for w in self.widths):
            raise ArgumentError("dimension and hidden widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ArgumentError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if self.theta is None:
            self.theta = np.zeros(self.n_params)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.n_params,):
            raise ArgumentError(f"theta has shape {self.theta.shape}, topology needs ({self.n_params},)")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.dim + TIME_FEATURES, *self.widths, self.dim]

    @property
    def n_params(self) -> int:
        sizes = self.layer_sizes
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    def unpack(self, theta: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views (W, b) per layer into the flat parameter vector."""
        theta = self.theta if theta is None else theta
        layers = []
        offset = 0
        sizes = self.layer_sizes
        for a, b in zip(sizes[:-1], sizes[1:]):
            w = theta[offset:offset + a * b].reshape(a, b)
            offset += a * b
            layers.append((w, theta[offset:offset + b]))
            offset += b
        return layers

    def copy(self) -> "DenoiserNet":
        return DenoiserNet(self.dim, self.widths, self.activation, self.theta.copy())

    def bind(self, schedule: NoiseSchedule) -> "BoundDenoiser":
        return BoundDenoiser(self, schedule)


def _act(name: str, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Activation value and its derivative."""
    if name == "tanh":
        a = np.tanh(z)
        return a, 1.0 - a * a
    a = np.logaddexp(0.0, z)
    return a, 0.5 * (1.0 + np.tanh(0.5 * z))


class Tape:
    """Forward intermediates for exactly one backward pass."""

    def __init__(self, net: DenoiserNet, x, sig, inputs, activations, derivs):
        self.net = net
        self.x = x
        self.sig = sig
        self.inputs = inputs
        self.activations = activations
        self.derivs = derivs
        self.consumed = False


def time_features(schedule: NoiseSchedule, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sig = schedule.sigma(t)
    return sig, np.stack([sig, np.log(sig)], axis=-1)


def forward(net: DenoiserNet, schedule: NoiseSchedule, x, t) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.dim:
        raise ArgumentError(f"expected states of shape (N, {net.dim}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ArgumentError("non-finite input state")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    schedule._check_usable(t)
    sig, feats = time_features(schedule, t)
    z = np.concatenate([x, feats], axis=1)
    layers = net.unpack()
    activations = [z]
    derivs = []
    for w, b in layers[:-1]:
        a, da = _act(net.activation, activations[-1] @ w + b)
        activations.append(a)
        derivs.append(da)
    w, b = layers[-1]
    core = activations[-1] @ w + b
    out = x + sig[:, None] * core
    return out, Tape(net, x, sig, z, activations, derivs)


def backward(tape: Tape, u, per_sample: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Pull ``u`` (N, d) back through h: returns (u^T dh/dtheta, u^T dh/dx).

    The parameter gradient is summed over the batch unless ``per_sample``,
    in which case it has shape (N, n_params).
    """
    if tape.consumed:
        raise UsageError("tape already consumed by a backward pass")
    tape.consumed = True
    net = tape.net
    u = np.asarray(u, dtype=np.float64)
    layers = net.unpack()
    n = u.shape[0]
    grads = []
    delta = tape.sig[:, None] * u
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        a_in = tape.activations[li]
        if per_sample:
            gw = (a_in[:, :, None] * delta[:, None, :]).reshape(n, -1)
            gb = delta
            grads.append(np.concatenate([gw, gb], axis=1))
        else:
            grads.append(np.concatenate([(a_in.T @ delta).ravel(), delta.sum(axis=0)]))
        delta = delta @ w.T
        if li > 0:
            delta = delta * tape.derivs[li - 1]
    grads.reverse()
    g_theta = np.concatenate(grads, axis=-1)
    g_x = u + delta[:, : net.dim]
    return g_theta, g_x


def h_theta(net: DenoiserNet, schedule: NoiseSchedule, x, t) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out, _ = forward(net, schedule, np.atleast_2d(x), t)
    return out[0] if single else out


def vjp_params(net: DenoiserNet, schedule: NoiseSchedule, x, t, u, per_sample: bool = False) -> np.ndarray:
    """u^T (d h_theta / d theta), summed over the batch unless ``per_sample``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    _, tape = forward(net, schedule, x, t)
    return backward(tape, u, per_sample)[0]


def jacobian_x(net: DenoiserNet, schedule: NoiseSchedule, x, t) -> np.ndarray:
    """Exact dh/dx via one backward pass per output coordinate; shape (N, d, d) or (d, d)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    rows = []
    for i in range(net.dim):
        u = np.zeros_like(xb)
        u[:, i] = 1.0
        _, tape = forward(net, schedule, xb, t)
        rows.append(backward(tape, u)[1])
    jac = np.stack(rows, axis=1)
    return jac[0] if single else jac


class BoundDenoiser:
    """A network paired with its schedule, callable as h(x, t)."""

    def __init__(self, net: DenoiserNet, schedule: NoiseSchedule):
        self.net = net
        self.schedule = schedule

    def __call__(self, x, t) -> np.ndarray:
        return h_theta(self.net, self.schedule, x, t)

    def jacobian_x(self, x, t) -> np.ndarray:
        return jacobian_x(self.net, self.schedule, x, t)


def init(net: DenoiserNet, rng: np.random.Generator, scale: float = 1.0) -> DenoiserNet:
    """Gaussian fan-in initialization, W ~ N(0, scale^2 / fan_in), zero biases."""
    theta = np.zeros(net.n_params)
    fresh = net.copy()
    fresh.theta = theta
    for w, _ in fresh.unpack():
        w[...] = rng.standard_normal(w.shape) * scale / np.sqrt(w.shape[0])
    return fresh


_HEADER = struct.Struct("<8sIIII")


def _activation_code(name: str) -> int:
    return ACTIVATIONS.index(name)


def to_bytes(net: DenoiserNet) -> bytes:
    head = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, net.dim, _activation_code(net.activation), len(net.widths))
    widths = struct.pack(f"<{len(net.widths)}I", *net.widths)
    count = struct.pack("<Q", net.n_params)
    return head + widths + count + net.theta.astype("<f8").tobytes()


def from_bytes(blob: bytes, dim: int | None = None) -> DenoiserNet:
    try:
        magic, version, d, act, n_layers = _HEADER.unpack_from(blob, 0)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError("not a denoiser checkpoint (bad magic)")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        offset = _HEADER.size
        widths = struct.unpack_from(f"<{n_layers}I", blob, offset)
        offset += 4 * n_layers
        (count,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint header: {exc}") from None
    if act >= len(ACTIVATIONS):
        raise FormatError(f"unknown activation code {act}")
    if dim is not None and d != dim:
        raise FormatError(f"checkpoint has dimension {d}, expected {dim}")
    payload = blob[offset:]
    if len(payload) != 8 * count:
        raise FormatError(f"parameter block has {len(payload)} bytes, header declares {8 * count}")
    theta = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    try:
        net = DenoiserNet(d, widths, ACTIVATIONS[act], theta)
    except ArgumentError as exc:
        raise FormatError(f"checkpoint topology mismatch: {exc}") from None
    if not np.all(np.isfinite(net.theta)):
        raise FormatError("checkpoint contains non-finite parameters")
    return net


def save(net: DenoiserNet, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(net))
    tmp.replace(path)


def load(path, dim: int | None = None) -> DenoiserNet:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(blob, dim)
