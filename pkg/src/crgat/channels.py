"""MU-MISO channel generation, dataset persistence and CSI perturbation.

Channels are stored already divided by the noise amplitude, so every rate
formula downstream uses a per-user noise power of exactly 1.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

RNG_ALGORITHM = "numpy-philox4x64-seedseq(seed,index)/v1"
DATASET_MAGIC = b"CRGD"
DATASET_VERSION = 1
PATHLOSS_INTERCEPT_DB = 140.7
PATHLOSS_SLOPE_DB = 36.7


@dataclass(frozen=True)
class ScenarioConfig:
    n_t: int
    k_users: int
    p_max: float = 1.0
    r_req: float = 1.0
    noise_psd_dbm_hz: float = -162.0
    bandwidth_hz: float = 1e7
    mean_plnr_db: float = 10.0
    seed: int = 0
    # user distances are uniform on [d_min_km, d_max_km]
    d_min_km: float = 0.1
    d_max_km: float = 0.3

    def __post_init__(self):
        if self.n_t < 1 or self.k_users < 1:
            raise ContractError("n_t and k_users must be at least 1")
        if self.p_max <= 0:
            raise ContractError("p_max must be positive")
        if self.r_req < 0:
            raise ContractError("r_req must be non-negative")
        if self.bandwidth_hz <= 0:
            raise ContractError("bandwidth_hz must be positive")
        if not 0 < self.d_min_km <= self.d_max_km:
            raise ContractError("need 0 < d_min_km <= d_max_km")

    def replace(self, **changes) -> ScenarioConfig:
        return ScenarioConfig(**{**asdict(self), **changes})


@dataclass
class ChannelSample:
    h: np.ndarray  # K x N_T complex, noise-normalized
    sigma2: float = 1.0


@dataclass
class Dataset:
    config: ScenarioConfig
    h: np.ndarray  # count x K x N_T complex128
    split: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]
    kind: str = "A"
    sigma2: float = field(default=1.0)

    def __post_init__(self):
        self.h = np.ascontiguousarray(self.h, dtype=np.complex128)
        ranges = sorted(self.split)
        if ranges[0][0] != 0 or ranges[-1][1] != len(self.h):
            raise ContractError("split ranges must cover all samples")
        for (_, stop), (start, _) in zip(ranges, ranges[1:]):
            if stop != start:
                raise ContractError("split ranges must be contiguous and disjoint")

    def __len__(self) -> int:
        return self.h.shape[0]

    def __getitem__(self, i: int) -> ChannelSample:
        return ChannelSample(self.h[i], self.sigma2)

    @property
    def samples(self) -> list[ChannelSample]:
        return [self[i] for i in range(len(self))]

    def part(self, name: str) -> np.ndarray:
        start, stop = self.split[("train", "val", "test").index(name)]
        return self.h[start:stop]

    @property
    def train(self) -> np.ndarray:
        return self.part("train")

    @property
    def val(self) -> np.ndarray:
        return self.part("val")

    @property
    def test(self) -> np.ndarray:
        return self.part("test")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.config == other.config
            and self.split == other.split
            and self.kind == other.kind
            and self.h.shape == other.h.shape
            and self.h.tobytes() == other.h.tobytes()
        )


# ---------------------------------------------------------------------------
# large-scale model


def path_loss_db(d_km) -> np.ndarray:
    """Path-loss attenuation in dB at distance ``d_km`` (kilometres)."""
    return PATHLOSS_INTERCEPT_DB + PATHLOSS_SLOPE_DB * np.log10(d_km)


def noise_power_dbm(psd_dbm_hz: float, bandwidth_hz: float) -> float:
    return psd_dbm_hz + 10.0 * np.log10(bandwidth_hz)


def _gain_scale(config: ScenarioConfig) -> float:
    """Constant that makes E[PL(d)/P_noise] equal ``mean_plnr_db`` for uniform d."""
    n = PATHLOSS_SLOPE_DB / 10.0
    a, b = config.d_min_km, config.d_max_km
    if b == a:
        mean_d = a ** (-n)
    else:
        mean_d = (a ** (1 - n) - b ** (1 - n)) / ((n - 1) * (b - a))
    noise_mw = 10 ** (noise_power_dbm(config.noise_psd_dbm_hz, config.bandwidth_hz) / 10)
    mean_ratio = 10 ** (-PATHLOSS_INTERCEPT_DB / 10) * mean_d / noise_mw
    return 10 ** (config.mean_plnr_db / 10) / mean_ratio


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent counter-based substream for sample ``index``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def sample_channel(config: ScenarioConfig, rng: np.random.Generator) -> ChannelSample:
    k, n = config.k_users, config.n_t
    d = rng.uniform(config.d_min_km, config.d_max_km, size=k)
    ratio = _gain_scale(config) * 10 ** (-path_loss_db(d) / 10) / 10 ** (
        noise_power_dbm(config.noise_psd_dbm_hz, config.bandwidth_hz) / 10
    )
    g = (rng.standard_normal((k, n)) + 1j * rng.standard_normal((k, n))) / np.sqrt(2.0)
    return ChannelSample(np.sqrt(ratio)[:, None] * g, 1.0)


def split_sizes(count: int, kind: str = "A") -> tuple[int, int, int]:
    """Train/validation/test sizes: 9:1:1 for kind A, test only for kind B."""
    if kind == "B":
        return 0, 0, count
    if kind != "A":
        raise ContractError(f"unknown dataset kind {kind!r}")
    n_val = count // 11
    n_test = count // 11
    return count - n_val - n_test, n_val, n_test


def _ranges(sizes):
    a, b, _ = sizes
    total = sum(sizes)
    return ((0, a), (a, a + b), (a + b, total))


def generate_dataset(config: ScenarioConfig, count: int, kind: str = "A", sizes=None) -> Dataset:
    """Draw ``count`` i.i.d. samples; sample ``i`` uses substream ``(seed, i)``.

    ``sizes`` overrides the default split with explicit (train, val, test) sizes.
    """
    if count < 1:
        raise ContractError("count must be at least 1")
    if sizes is None:
        sizes = split_sizes(count, kind)
    elif sum(sizes) != count:
        raise ContractError("split sizes must add up to count")
    h = np.empty((count, config.k_users, config.n_t), dtype=np.complex128)
    for i in range(count):
        h[i] = sample_channel(config, sample_rng(config.seed, i)).h
    return Dataset(config, h, _ranges(tuple(sizes)), kind)


def apply_csi_error(sample: ChannelSample | np.ndarray, rel_var: float, rng: np.random.Generator):
    """Return ``H + E`` with ``E[k] ~ CN(0, rel_var * ||H[k]||^2 I)``.

    Accepts a single sample or a stacked ``(..., K, N_T)`` array.
    """
    if rel_var < 0:
        raise ContractError("rel_var must be non-negative")
    h = sample.h if isinstance(sample, ChannelSample) else np.asarray(sample)
    if rel_var == 0:
        out = h.copy()
    else:
        var = rel_var * np.sum(np.abs(h) ** 2, axis=-1, keepdims=True)
        noise = (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape)) * np.sqrt(var / 2)
        out = h + noise
    if isinstance(sample, ChannelSample):
        return ChannelSample(out, sample.sigma2)
    return out


# ---------------------------------------------------------------------------
# persistence


def _header(d: Dataset) -> bytes:
    meta = {
        "config": asdict(d.config),
        "count": len(d),
        "kind": d.kind,
        "split": [list(r) for r in d.split],
        "rng": RNG_ALGORITHM,
        "sigma2": d.sigma2,
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dataset_bytes(d: Dataset) -> bytes:
    header = _header(d)
    payload = np.ascontiguousarray(d.h).astype("<c16").tobytes()
    return DATASET_MAGIC + struct.pack("<IQ", DATASET_VERSION, len(header)) + header + payload


def save_dataset(d: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(d))


def parse_dataset(buf: bytes) -> Dataset:
    if len(buf) < 16:
        raise FormatError("file shorter than the fixed preamble", len(buf))
    if buf[:4] != DATASET_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    version, hlen = struct.unpack_from("<IQ", buf, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if 16 + hlen > len(buf):
        raise FormatError("header runs past end of file", len(buf))
    try:
        meta = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
        known = {f.name for f in fields(ScenarioConfig)}
        config = ScenarioConfig(**{k: v for k, v in meta["config"].items() if k in known})
        count = int(meta["count"])
        split = tuple(tuple(int(x) for x in r) for r in meta["split"])
        kind = meta["kind"]
    except (ValueError, KeyError, TypeError, ContractError) as exc:
        raise FormatError(f"malformed header: {exc}", 16) from None
    start = 16 + hlen
    expected = count * config.k_users * config.n_t * 16
    if len(buf) - start != expected:
        raise FormatError(
            f"payload is {len(buf) - start} bytes, header (count={count}, K={config.k_users}, "
            f"N_T={config.n_t}) implies {expected}",
            start + min(len(buf) - start, expected),
        )
    h = np.frombuffer(buf, dtype="<c16", offset=start).reshape(count, config.k_users, config.n_t)
    try:
        return Dataset(config, h.astype(np.complex128), split, kind, float(meta.get("sigma2", 1.0)))
    except ContractError as exc:
        raise FormatError(f"inconsistent split: {exc}", 16) from None


def load_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())
