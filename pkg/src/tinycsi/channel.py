"""Synthetic multipath channel data for training and evaluation.

Spatial-frequency channel matrices are generated as sums of discrete
propagation paths (complex gain x array steering vector x delay phase
ramp), transformed to the angular-delay domain with unitary 2-D DFTs,
truncated to the leading delay rows, and min/max normalized into [0, 1]
datasets. An import/export path in a small binary format allows externally
produced datasets to be used instead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

DATASET_MAGIC = b"CSID"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sHHHIff")


@dataclass(frozen=True)
class ScenarioConfig:
    """Parameters of the synthetic multipath generator.

    A scenario describes one propagation environment: the path geometry
    (angles and delays) is drawn once from the scenario seed, while each
    sample redraws the complex path gains and applies small angle/delay
    jitter. Delays are measured in delay bins; ``delay_max`` must stay
    below the truncation length ``n_delay`` so that nearly all energy
    survives truncation (the premise that justifies it).
    """

    environment: str      # "indoor" | "outdoor"
    n_paths: int          # number of propagation paths
    n_tx: int             # transmit antennas
    n_sub: int            # subcarriers
    n_delay: int          # delay rows kept after truncation
    delay_spread: float   # mean of the (truncated) exponential delay law
    delay_max: float      # hard upper bound on path delay
    angle_jitter: float = 0.05   # per-sample sin-domain angle wobble
    delay_jitter: float = 0.25   # per-sample delay wobble, in bins
    seed: int = 0

    def validate(self) -> None:
        if self.n_paths < 1:
            raise ConfigError(f"n_paths must be >= 1, got {self.n_paths}")
        if min(self.n_tx, self.n_sub, self.n_delay) < 1:
            raise ConfigError("antenna/subcarrier/delay counts must be positive")
        if self.n_delay > self.n_sub:
            raise ConfigError(
                f"n_delay {self.n_delay} exceeds subcarrier count {self.n_sub}"
            )
        if not 0 < self.delay_spread:
            raise ConfigError("delay_spread must be positive")
        if not 0 < self.delay_max < self.n_delay:
            raise ConfigError(
                f"delay_max must lie in (0, n_delay={self.n_delay}), got {self.delay_max}"
            )
        if self.angle_jitter < 0 or self.delay_jitter < 0:
            raise ConfigError("jitter amounts must be non-negative")


PROFILES = {
    "desk": {"n_tx": 16, "n_sub": 64, "n_delay": 16},
    "full": {"n_tx": 32, "n_sub": 256, "n_delay": 32},
}


def scenario(environment: str, profile: str = "desk", seed: int = 0) -> ScenarioConfig:
    """Default indoor-like / outdoor-like scenario for a size profile."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    dims = PROFILES[profile]
    nd = dims["n_delay"]
    if environment == "indoor":
        env = {"n_paths": 6, "delay_spread": nd / 8.0, "delay_max": 0.45 * nd}
    elif environment == "outdoor":
        env = {"n_paths": 12, "delay_spread": nd / 4.0, "delay_max": 0.6 * nd}
    else:
        raise ConfigError(f"unknown environment {environment!r}; use 'indoor' or 'outdoor'")
    return ScenarioConfig(environment=environment, seed=seed, **dims, **env)


def synth_channel(gains: np.ndarray, sin_angles: np.ndarray, delays: np.ndarray,
                  n_sub: int, n_tx: int) -> np.ndarray:
    """Sum of paths: gain * delay phase ramp (subcarriers) x steering (antennas)."""
    gains = np.asarray(gains, dtype=np.complex128)
    sin_angles = np.asarray(sin_angles, dtype=np.float64)
    delays = np.asarray(delays, dtype=np.float64)
    if not gains.shape == sin_angles.shape == delays.shape:
        raise ShapeError("per-path parameter arrays must share one shape")
    sub = np.arange(n_sub)[:, None]       # [n_sub, 1]
    ant = np.arange(n_tx)[None, :]        # [1, n_tx]
    # ramp sign chosen so the forward delay DFT places a path of delay tau
    # at delay row ~tau, i.e. inside the truncated leading rows
    ramps = np.exp(2j * np.pi * sub * (delays[None, :] / n_sub))       # [n_sub, L]
    steering = np.exp(2j * np.pi * (sin_angles[:, None] / 2.0) * ant)  # [L, n_tx]
    return (ramps * gains[None, :]) @ steering


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def scenario_geometry(config: ScenarioConfig) -> tuple[np.ndarray, np.ndarray]:
    """The environment's path angles and delays, fixed by the scenario seed.

    Angles are uniform in the sin domain; delays follow an exponential law
    truncated at ``delay_max`` (inverse-CDF sampling, so no atom at the cap).
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x6E0]))
    sin_angles = rng.uniform(-1.0, 1.0, config.n_paths)
    u = rng.uniform(0.0, 1.0, config.n_paths)
    cap = 1.0 - np.exp(-config.delay_max / config.delay_spread)
    delays = -config.delay_spread * np.log1p(-u * cap)
    # snap the environment's delay taps to bin centers; per-sample jitter
    # restores fractional delays while keeping DFT sidelobe leakage small
    delays = np.clip(np.round(delays), 0.0, config.delay_max)
    return sin_angles, delays


def generate(config: ScenarioConfig, count: int, start_index: int = 0) -> np.ndarray:
    """Draw ``count`` spatial-frequency channels, shape [count, n_sub, n_tx].

    Sample ``i`` depends only on (config, seed, start_index + i), so
    generation is reproducible, safe to parallelize across indices, and
    disjoint train/test splits come from disjoint index ranges.
    """
    config.validate()
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    base_angles, base_delays = scenario_geometry(config)
    ln = config.n_paths
    out = np.empty((count, config.n_sub, config.n_tx), dtype=np.complex128)
    for i in range(count):
        rng = _sample_rng(config.seed, start_index + i)
        gains = (rng.standard_normal(ln) + 1j * rng.standard_normal(ln)) / np.sqrt(2.0 * ln)
        sin_angles = base_angles + rng.uniform(-config.angle_jitter, config.angle_jitter, ln)
        sin_angles = (sin_angles + 1.0) % 2.0 - 1.0
        delays = base_delays + rng.uniform(-config.delay_jitter, config.delay_jitter, ln)
        delays = np.clip(delays, 0.0, config.delay_max)
        out[i] = synth_channel(gains, sin_angles, delays, config.n_sub, config.n_tx)
    return out


def dft_matrix(n: int) -> np.ndarray:
    """Unitary DFT matrix (1/sqrt(n) normalization)."""
    idx = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(idx, idx) / n) / np.sqrt(n)


def to_angular_delay(spatial_freq: np.ndarray) -> np.ndarray:
    """2-D unitary DFT: delay transform over rows, angular over columns.

    Norm-preserving, so reconstruction error is identical in both domains.
    Accepts one matrix [n_sub, n_tx] or a batch [S, n_sub, n_tx].
    """
    h = np.asarray(spatial_freq, dtype=np.complex128)
    single = h.ndim == 2
    if single:
        h = h[None]
    fd = dft_matrix(h.shape[1])
    fa = dft_matrix(h.shape[2])
    out = np.einsum("dk,skt,at->sda", fd, h, fa.conj(), optimize=True)
    return out[0] if single else out


def from_angular_delay(angular_delay: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`to_angular_delay`."""
    h = np.asarray(angular_delay, dtype=np.complex128)
    single = h.ndim == 2
    if single:
        h = h[None]
    fd = dft_matrix(h.shape[1])
    fa = dft_matrix(h.shape[2])
    out = np.einsum("dk,skt,at->sda", fd.conj().T, h, fa.T, optimize=True)
    return out[0] if single else out


@dataclass
class Dataset:
    """Normalized, truncated channel samples plus the affine map used.

    ``planes`` has shape [S, 2, n_delay, n_tx] (real plane then imaginary
    plane), all values in [0, 1]. Physical values are recovered as
    ``planes * scale + offset``.
    """

    planes: np.ndarray
    offset: float
    scale: float

    def __post_init__(self):
        self.planes = np.ascontiguousarray(self.planes, dtype=np.float32)
        if self.planes.ndim != 4 or self.planes.shape[1] != 2:
            raise ShapeError(f"planes must be [S, 2, n_delay, n_tx], got {self.planes.shape}")
        self.offset = float(self.offset)
        self.scale = float(self.scale)

    @property
    def count(self) -> int:
        return self.planes.shape[0]

    @property
    def n_delay(self) -> int:
        return self.planes.shape[2]

    @property
    def n_tx(self) -> int:
        return self.planes.shape[3]

    def denormalize(self, planes: np.ndarray | None = None) -> np.ndarray:
        """Map normalized planes back to complex matrices [S, n_delay, n_tx]."""
        p = self.planes if planes is None else np.asarray(planes)
        phys = p.astype(np.float64) * self.scale + self.offset
        return phys[:, 0] + 1j * phys[:, 1]

    def subset(self, count: int) -> "Dataset":
        return replace(self, planes=self.planes[:count])

    def slice(self, start: int, stop: int) -> "Dataset":
        """A view-dataset over a sample range, sharing the affine map."""
        return replace(self, planes=self.planes[start:stop])


def truncate_and_normalize(angular_delay: np.ndarray, n_delay: int) -> Dataset:
    """Keep the first ``n_delay`` delay rows and normalize into [0, 1].

    The affine map uses the global min/max over the whole batch; an
    all-constant batch maps to 0.5 with scale 1 (degenerate rule) so the
    inverse map is always defined.
    """
    h = np.asarray(angular_delay, dtype=np.complex128)
    if h.ndim == 2:
        h = h[None]
    if n_delay > h.shape[1]:
        raise ShapeError(
            f"cannot keep {n_delay} delay rows from a {h.shape[1]}-row matrix"
        )
    kept = h[:, :n_delay, :]
    planes = np.stack([kept.real, kept.imag], axis=1)
    lo = float(planes.min())
    hi = float(planes.max())
    if hi > lo:
        offset, scale = lo, hi - lo
    else:
        offset, scale = lo - 0.5, 1.0
    norm = ((planes - offset) / scale).astype(np.float32)
    return Dataset(planes=norm, offset=offset, scale=scale)


def delay_energy_outside(angular_delay: np.ndarray, n_delay: int) -> float:
    """Fraction of squared magnitude falling outside the first delay rows."""
    h = np.asarray(angular_delay)
    if h.ndim == 2:
        h = h[None]
    total = float(np.sum(np.abs(h) ** 2))
    inside = float(np.sum(np.abs(h[:, :n_delay, :]) ** 2))
    if total == 0:
        raise ConfigError("cannot measure energy of an all-zero batch")
    return 1.0 - inside / total


def make_dataset(config: ScenarioConfig, count: int) -> Dataset:
    """Full pipeline: generate, transform, truncate, normalize."""
    spatial = generate(config, count)
    return truncate_and_normalize(to_angular_delay(spatial), config.n_delay)


def export_dataset(dataset: Dataset, path) -> int:
    """Write the dataset file and return the number of bytes written."""
    header = _HEADER.pack(
        DATASET_MAGIC,
        DATASET_VERSION,
        dataset.n_tx,
        dataset.n_delay,
        dataset.count,
        np.float32(dataset.offset),
        np.float32(dataset.scale),
    )
    payload = np.ascontiguousarray(dataset.planes, dtype="<f4").tobytes()
    blob = header + payload
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def import_dataset(path) -> Dataset:
    """Read a dataset file; rejects corrupt headers and short payloads."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"dataset file truncated: {len(blob)} bytes", offset=len(blob))
    magic, version, n_tx, n_delay, count, offset, scale = _HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}", offset=0)
    if version != DATASET_VERSION:
        raise FormatError(
            f"unsupported dataset format version {version} (expected {DATASET_VERSION})",
            offset=4,
        )
    expected = count * 2 * n_delay * n_tx * 4
    payload = blob[_HEADER.size :]
    if len(payload) != expected:
        raise FormatError(
            f"payload holds {len(payload)} bytes but header declares {expected}",
            offset=_HEADER.size + min(len(payload), expected),
        )
    planes = np.frombuffer(payload, dtype="<f4").reshape(count, 2, n_delay, n_tx)
    return Dataset(planes=planes.copy(), offset=offset, scale=scale)
