"""Policy network, Gaussian action distribution and snapshot serialization.

Networks are plain tanh MLPs whose parameters live in one flat float64
vector; per-layer weights ``(fan_in, fan_out)`` and biases are views into it,
laid out layer by layer as ``W0, b0, W1, b1, ...`` (row-major). The same
layout is used by the ``.pol`` snapshot payload, so a flat vector, a
snapshot and its bytes are interchangeable.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import ConfigError

MAX_VELOCITY = 50.0  # %/s
INITIAL_LOG_STD = math.log(0.5)
TANH_GAIN = 5.0 / 3.0


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Immutable tanh-MLP parameters (tanh on hidden layers, linear output)."""

    sizes: tuple[int, ...]
    flat: np.ndarray

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ConfigError(f"bad layer sizes {sizes}")
        flat = np.asarray(self.flat)
        if flat.ndim != 1 or flat.size != param_count(sizes):
            raise ConfigError(
                f"flat parameter vector has {flat.size} entries, layers {sizes} need {param_count(sizes)}"
            )
        flat = flat.view()
        flat.flags.writeable = False
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "flat", flat)
        weights, biases = [], []
        offset = 0
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            weights.append(flat[offset : offset + n_in * n_out].reshape(n_in, n_out))
            offset += n_in * n_out
            biases.append(flat[offset : offset + n_out])
            offset += n_out
        object.__setattr__(self, "weights", tuple(weights))
        object.__setattr__(self, "biases", tuple(biases))

    def __eq__(self, other):
        if not isinstance(other, MlpParams):
            return NotImplemented
        return (
            self.sizes == other.sizes
            and self.flat.dtype == other.flat.dtype
            and self.flat.tobytes() == other.flat.tobytes()
        )

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(self.sizes, self.flat.astype(dtype))

    def with_flat(self, flat: np.ndarray) -> "MlpParams":
        return MlpParams(self.sizes, flat)


def param_count(sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, final_scale: float = 0.01) -> MlpParams:
    """Glorot-uniform init with tanh gain; zero biases; output layer shrunk."""
    sizes = tuple(sizes)
    parts = []
    n_layers = len(sizes) - 1
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = TANH_GAIN * math.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_in, n_out))
        if i == n_layers - 1:
            w *= final_scale
        parts.append(w.ravel())
        parts.append(np.zeros(n_out))
    return MlpParams(sizes, np.concatenate(parts))


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batch forward pass. ``x`` is (N, fan_in); returns (N, fan_out) and a cache."""
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = z if i == last else np.tanh(z)
        acts.append(h)
    return h, acts


def mlp_backward(params: MlpParams, acts: list[np.ndarray], dout: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-mode pass: returns (d loss / d flat params, d loss / d input)."""
    grads: list[np.ndarray] = []
    delta = dout
    last = len(params.weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            delta = delta * (1.0 - acts[i + 1] ** 2)
        grads.append(delta.sum(axis=0))
        grads.append((acts[i].T @ delta).ravel())
        delta = delta @ params.weights[i].T
    grads.reverse()  # now W0, b0, W1, b1, ...
    return np.concatenate(grads), delta


def forward(params: MlpParams, state: np.ndarray) -> float:
    """Scalar pre-squash output for a single observation."""
    if state.shape != (params.sizes[0],):
        raise ConfigError(f"state has shape {state.shape}, network expects ({params.sizes[0]},)")
    h = state
    ws, bs = params.weights, params.biases
    for w, b in zip(ws[:-1], bs[:-1]):
        h = np.tanh(h @ w + b)
    return float((h @ ws[-1] + bs[-1])[0])


@dataclass(frozen=True)
class ActionDistribution:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"std must be > 0, got {self.std}")

    @property
    def entropy(self) -> float:
        return gaussian_entropy(math.log(self.std))

    def log_prob(self, action: float) -> float:
        z = (action - self.mean) / self.std
        return -0.5 * z * z - math.log(self.std) - 0.5 * math.log(2 * math.pi)


def gaussian_entropy(log_std: float) -> float:
    return 0.5 * math.log(2 * math.pi * math.e) + log_std


def gaussian_log_prob(actions: np.ndarray, means: np.ndarray, log_std: float) -> np.ndarray:
    z = (actions - means) * math.exp(-log_std)
    return -0.5 * z * z - log_std - 0.5 * math.log(2 * math.pi)


def sample_action(dist: ActionDistribution, rng: int | np.random.Generator) -> float:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return dist.mean + dist.std * float(rng.standard_normal())


def mean_action(dist: ActionDistribution) -> float:
    return dist.mean


def scale_action(raw_action: float) -> float:
    """Squash a pre-activation into an EGR valve velocity in %/s."""
    return MAX_VELOCITY * math.tanh(raw_action)


# --- snapshots -------------------------------------------------------------

SNAPSHOT_MAGIC = b"XPOL"
SNAPSHOT_VERSION = 1
ALGORITHMS = ("PPO", "DDPG")
_HEADER = struct.Struct("<4sHBBI")  # magic, version, algorithm, n_sizes, training_cycle


class SnapshotError(ValueError):
    pass


class BadMagicError(SnapshotError):
    pass


class VersionMismatchError(SnapshotError):
    pass


class ChecksumError(SnapshotError):
    pass


@dataclass(frozen=True, eq=False)
class PolicySnapshot:
    """Actor parameters in float32, the unit of transfer and checkpointing."""

    algorithm: str
    mlp: MlpParams
    log_std: float
    training_cycle: int = 0
    format_version: int = SNAPSHOT_VERSION

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        mlp = self.mlp if self.mlp.flat.dtype == np.float32 else self.mlp.astype(np.float32)
        if not np.all(np.isfinite(mlp.flat)):
            raise SnapshotError("non-finite policy parameters")
        object.__setattr__(self, "mlp", mlp)
        object.__setattr__(self, "log_std", float(np.float32(self.log_std)))

    def __eq__(self, other):
        if not isinstance(other, PolicySnapshot):
            return NotImplemented
        return serialize(self) == serialize(other)

    @property
    def checksum(self) -> int:
        return struct.unpack("<I", serialize(self)[-4:])[0]

    def actor64(self) -> MlpParams:
        """Exact float64 copy for computation."""
        return self.mlp.astype(np.float64)


def serialize(snapshot: PolicySnapshot) -> bytes:
    sizes = snapshot.mlp.sizes
    header = _HEADER.pack(
        SNAPSHOT_MAGIC,
        snapshot.format_version,
        ALGORITHMS.index(snapshot.algorithm),
        len(sizes),
        snapshot.training_cycle,
    )
    body = (
        header
        + struct.pack(f"<{len(sizes)}I", *sizes)
        + snapshot.mlp.flat.astype("<f4").tobytes()
        + struct.pack("<f", snapshot.log_std)
    )
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize(data: bytes) -> PolicySnapshot:
    data = bytes(data)
    if len(data) < _HEADER.size + 4 or data[:4] != SNAPSHOT_MAGIC:
        raise BadMagicError("not a policy snapshot")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("snapshot checksum mismatch")
    _, version, algo, n_sizes, cycle = _HEADER.unpack_from(body)
    if version != SNAPSHOT_VERSION:
        raise VersionMismatchError(f"snapshot format {version}, expected {SNAPSHOT_VERSION}")
    if algo >= len(ALGORITHMS):
        raise SnapshotError(f"unknown algorithm tag {algo}")
    offset = _HEADER.size
    if len(body) < offset + 4 * n_sizes:
        raise SnapshotError("truncated snapshot header")
    sizes = struct.unpack_from(f"<{n_sizes}I", body, offset)
    offset += 4 * n_sizes
    n = param_count(sizes) if n_sizes >= 2 else -1
    if n < 0 or len(body) != offset + 4 * n + 4:
        raise SnapshotError("snapshot payload length does not match layer sizes")
    flat = np.frombuffer(body, dtype="<f4", count=n, offset=offset).astype(np.float32)
    (log_std,) = struct.unpack_from("<f", body, offset + 4 * n)
    return PolicySnapshot(
        algorithm=ALGORITHMS[algo],
        mlp=MlpParams(sizes, flat),
        log_std=log_std,
        training_cycle=cycle,
        format_version=version,
    )


def header_size(n_sizes: int) -> int:
    return _HEADER.size + 4 * n_sizes
