"""Synthetic street-canyon multipath channel generator.

Stands in for a ray-tracing dataset: every environment is a rectangular
street segment with a base station at a fixed relative position, point
scatterers along the two building facades, and a deterministic per-cell
line-of-sight blockage mask. Propagation is LOS plus one single-bounce
path per scatterer; antenna responses are narrowband at the carrier.

Everything is a pure function of its inputs: the same (environment, UE
position, radio config, noise seed) reproduces bit-identical channels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GeometryError

SPEED_OF_LIGHT = 299_792_458.0

# rng stream tags, kept distinct so derived seeds never collide
_STREAM_SCATTER = 1
_STREAM_NOISE = 3


@dataclass(frozen=True)
class RadioConfig:
    """OFDM-MIMO radio parameters; defaults follow the evaluation setup."""

    carrier_freq_hz: float = 3.5e9
    bandwidth_hz: float = 100e6
    total_subcarriers: int = 1024
    comb_factor: int = 10
    num_pilot_subcarriers: int = 52
    n_rx: int = 8
    n_tx: int = 4
    tx_power_dbm_per_antenna: float = 23.0
    noise_floor_dbm_hz: float = -174.0
    noise_figure_db: float = 2.0
    element_spacing: float = 0.5

    def __post_init__(self):
        if self.num_pilot_subcarriers < 1:
            raise ConfigError("need at least one pilot subcarrier")
        if self.num_pilot_subcarriers * self.comb_factor > self.total_subcarriers:
            raise ConfigError(
                f"{self.num_pilot_subcarriers} pilots at comb {self.comb_factor} "
                f"exceed {self.total_subcarriers} subcarriers"
            )
        if self.n_rx < 1 or self.n_tx < 1:
            raise ConfigError("antenna counts must be >= 1")
        if self.bandwidth_hz <= 0:
            raise ConfigError("bandwidth must be positive")

    @property
    def n_antenna_pairs(self) -> int:
        return self.n_rx * self.n_tx

    @property
    def subcarrier_spacing_hz(self) -> float:
        return self.bandwidth_hz / self.total_subcarriers

    def pilot_frequencies_hz(self) -> np.ndarray:
        """Absolute frequency of each pilot: carrier plus comb offset."""
        idx = np.arange(self.num_pilot_subcarriers) * self.comb_factor
        return self.carrier_freq_hz + idx * self.subcarrier_spacing_hz

    def noise_variance(self) -> float:
        """E[|n|^2] of the channel-estimate noise, relative to TX power.

        Noise PSD (floor + figure) integrated over one subcarrier bandwidth,
        divided by the per-antenna transmit power used as signal scaling.
        """
        noise_mw = 10.0 ** ((self.noise_floor_dbm_hz + self.noise_figure_db) / 10.0)
        per_subcarrier_bw = self.bandwidth_hz / self.total_subcarriers
        tx_mw = 10.0 ** (self.tx_power_dbm_per_antenna / 10.0)
        return noise_mw * per_subcarrier_bw / tx_mw


@dataclass(frozen=True)
class Rect:
    """Axis-aligned area in meters."""

    x_min: float
    y_min: float
    width: float
    height: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise GeometryError(f"degenerate area {self.width} x {self.height}")

    def contains(self, p) -> bool:
        x, y = float(p[0]), float(p[1])
        return (
            self.x_min <= x <= self.x_min + self.width
            and self.y_min <= y <= self.y_min + self.height
        )


@dataclass(frozen=True)
class Geometry:
    """Area plus the BS placement shared by all environments."""

    area: Rect = Rect(-50.0, -10.0, 100.0, 20.0)
    bs_relative: tuple = (0.1, 0.5)
    bs_array_orientation: float = 0.0  # array axis angle; 0 = parallel to the street

    @property
    def bs_position(self) -> np.ndarray:
        return np.array(
            [
                self.area.x_min + self.bs_relative[0] * self.area.width,
                self.area.y_min + self.bs_relative[1] * self.area.height,
            ]
        )


@dataclass(frozen=True)
class Scatterer:
    position: np.ndarray
    reflection: complex  # |reflection| <= 1


@dataclass(frozen=True)
class Environment:
    env_id: str
    seed: int
    geometry: Geometry
    scatterers: tuple
    blockage_fraction: float = 0.2

    @property
    def area(self) -> Rect:
        return self.geometry.area

    @property
    def bs_position(self) -> np.ndarray:
        return self.geometry.bs_position


@dataclass(frozen=True)
class Path:
    """One propagation path resolved at a UE position."""

    delay_s: float
    complex_gain: complex
    aoa: float  # at the BS, from array broadside
    aod_azimuth: float  # at the UE, world frame
    aod_elevation: float = 0.0


@dataclass
class RawCsi:
    """Complex channel matrix, one row per (rx, tx) antenna pair.

    Row k * n_tx + m holds receive antenna k, transmit antenna m.
    """

    entries: np.ndarray  # (n_rx * n_tx, num_pilots) complex128
    ue_position: np.ndarray
    env_id: str
    all_paths_blocked: bool = False


def _splitmix64(x: int) -> int:
    """Deterministic 64-bit mix, stable across platforms and runs."""
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def _cell_hash(seed: int, cx: int, cy: int) -> int:
    h = _splitmix64(seed & 0xFFFFFFFFFFFFFFFF)
    h = _splitmix64(h ^ (cx & 0xFFFFFFFFFFFFFFFF))
    h = _splitmix64(h ^ (cy & 0xFFFFFFFFFFFFFFFF))
    return h


def los_blocked(env: Environment, p) -> bool:
    """Deterministic blockage: ~blockage_fraction of 1 m grid cells are NLOS."""
    cx = math.floor(float(p[0]))
    cy = math.floor(float(p[1]))
    h = _cell_hash(env.seed, cx, cy)
    return (h % 10_000) < int(env.blockage_fraction * 10_000)


def build_environment(
    env_id: str,
    seed: int,
    geometry: Geometry,
    num_scatterers: int,
    blockage_fraction: float = 0.2,
) -> Environment:
    """Place scatterers along the two long edges of the area (the facades).

    Scatterer positions and complex reflection coefficients are drawn
    deterministically from `seed`; magnitudes stay within (0, 1].
    """
    if num_scatterers < 0:
        raise ConfigError("num_scatterers must be >= 0")
    area = geometry.area
    rng = np.random.default_rng([int(seed), _STREAM_SCATTER])
    along_x = area.width >= area.height
    scatterers = []
    for _ in range(num_scatterers):
        t = rng.uniform()
        side = rng.integers(0, 2)
        mag = rng.uniform(0.3, 0.95)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        if along_x:
            pos = np.array(
                [area.x_min + t * area.width, area.y_min + (side * area.height)]
            )
        else:
            pos = np.array(
                [area.x_min + (side * area.width), area.y_min + t * area.height]
            )
        scatterers.append(Scatterer(pos, mag * complex(math.cos(phase), math.sin(phase))))
    return Environment(
        env_id=str(env_id),
        seed=int(seed),
        geometry=geometry,
        scatterers=tuple(scatterers),
        blockage_fraction=blockage_fraction,
    )


def _bs_frame_aoa(env: Environment, toward: np.ndarray) -> float:
    """Angle from array broadside of the direction BS -> `toward`."""
    d = toward - env.bs_position
    dist = float(np.hypot(d[0], d[1]))
    if dist == 0.0:
        return 0.0
    ca = math.cos(env.geometry.bs_array_orientation)
    sa = math.sin(env.geometry.bs_array_orientation)
    along = (d[0] * ca + d[1] * sa) / dist  # component along the array axis
    return math.asin(max(-1.0, min(1.0, along)))


_REFERENCE_WAVELENGTH = SPEED_OF_LIGHT / 3.5e9


def enumerate_paths(env: Environment, p, wavelength: float = _REFERENCE_WAVELENGTH) -> list:
    """LOS (unless blocked) plus one single-bounce path per scatterer."""
    p = np.asarray(p, dtype=float)
    if not env.area.contains(p):
        raise GeometryError(f"UE position {p.tolist()} outside the environment area")
    bs = env.bs_position
    paths = []
    d_los = float(np.hypot(*(p - bs)))
    if d_los > 0.0 and not los_blocked(env, p):
        paths.append(
            Path(
                delay_s=d_los / SPEED_OF_LIGHT,
                complex_gain=_free_space_amplitude(d_los, wavelength),
                aoa=_bs_frame_aoa(env, p),
                aod_azimuth=_world_azimuth(p, bs),
            )
        )
    for sc in env.scatterers:
        d1 = float(np.hypot(*(p - sc.position)))
        d2 = float(np.hypot(*(sc.position - bs)))
        total = d1 + d2
        if total == 0.0:
            continue
        paths.append(
            Path(
                delay_s=total / SPEED_OF_LIGHT,
                complex_gain=_free_space_amplitude(total, wavelength) * sc.reflection,
                aoa=_bs_frame_aoa(env, sc.position),
                aod_azimuth=_world_azimuth(p, sc.position),
            )
        )
    return paths


def _free_space_amplitude(dist: float, wavelength: float) -> float:
    return wavelength / (4.0 * math.pi * dist)


def _world_azimuth(frm: np.ndarray, to: np.ndarray) -> float:
    d = to - frm
    return math.atan2(d[1], d[0])


def ula_response(n_elements: int, spacing_wavelengths: float, aoa: float) -> np.ndarray:
    """Narrowband steering vector; adjacent-element phase step -2*pi*d*sin(aoa)."""
    k = np.arange(n_elements)
    return np.exp(-2j * math.pi * spacing_wavelengths * k * math.sin(aoa))


def _ura_dims(n: int) -> tuple:
    """Factor n into the most square grid (rows x cols)."""
    best = (1, n)
    for a in range(1, int(math.isqrt(n)) + 1):
        if n % a == 0:
            best = (a, n // a)
    return best


def ura_response(
    n_elements: int, spacing_wavelengths: float, azimuth: float, elevation: float = 0.0
) -> np.ndarray:
    """Planar-array steering vector for an array lying in the azimuth plane."""
    rows, cols = _ura_dims(n_elements)
    u = math.cos(elevation) * math.cos(azimuth)
    v = math.cos(elevation) * math.sin(azimuth)
    i = np.arange(rows)[:, None]
    j = np.arange(cols)[None, :]
    phase = -2j * math.pi * spacing_wavelengths * (i * u + j * v)
    return np.exp(phase).reshape(-1)


def synth_from_paths(paths, radio: RadioConfig) -> np.ndarray:
    """Sum per-path rank-1 contributions into an (N_A, N_C) channel matrix.

    Entry (k*n_tx + m, c) = sum over paths of
    gain * a_k(AoA) * b_m(AoD) * exp(-2j*pi*f_c(c)*delay).
    """
    n_a = radio.n_antenna_pairs
    freqs = radio.pilot_frequencies_hz()
    h = np.zeros((n_a, radio.num_pilot_subcarriers), dtype=np.complex128)
    for path in paths:
        a = ula_response(radio.n_rx, radio.element_spacing, path.aoa)
        b = ura_response(radio.n_tx, radio.element_spacing, path.aod_azimuth, path.aod_elevation)
        sweep = np.exp(-2j * math.pi * freqs * path.delay_s)
        pair = np.kron(a, b)  # index k*n_tx + m
        h += path.complex_gain * np.outer(pair, sweep)
    return h


def synth_channel(env: Environment, p, radio: RadioConfig) -> RawCsi:
    """Noiseless channel matrix at a UE position; all-zero when fully blocked."""
    p = np.asarray(p, dtype=float)
    paths = enumerate_paths(env, p, wavelength=SPEED_OF_LIGHT / radio.carrier_freq_hz)
    h = synth_from_paths(paths, radio)
    return RawCsi(
        entries=h,
        ue_position=p,
        env_id=env.env_id,
        all_paths_blocked=(len(paths) == 0),
    )


def apply_noise(csi: RawCsi, radio: RadioConfig, rng_seed: int) -> RawCsi:
    """Add circularly-symmetric complex Gaussian noise to the channel estimate."""
    sigma2 = radio.noise_variance()
    if sigma2 == 0.0:
        return RawCsi(csi.entries.copy(), csi.ue_position, csi.env_id, csi.all_paths_blocked)
    rng = np.random.default_rng([int(rng_seed), _STREAM_NOISE])
    shape = csi.entries.shape
    scale = math.sqrt(sigma2 / 2.0)
    noise = rng.normal(0.0, scale, shape) + 1j * rng.normal(0.0, scale, shape)
    return RawCsi(csi.entries + noise, csi.ue_position, csi.env_id, csi.all_paths_blocked)


def environment_to_json(env: Environment) -> str:
    doc = {
        "env_id": env.env_id,
        "seed": env.seed,
        "geometry": {
            "area": {
                "x_min": env.area.x_min,
                "y_min": env.area.y_min,
                "width": env.area.width,
                "height": env.area.height,
            },
            "bs_relative": list(env.geometry.bs_relative),
            "bs_array_orientation": env.geometry.bs_array_orientation,
        },
        "blockage_fraction": env.blockage_fraction,
        "scatterers": [
            {
                "position": sc.position.tolist(),
                "reflection": [sc.reflection.real, sc.reflection.imag],
            }
            for sc in env.scatterers
        ],
    }
    return json.dumps(doc, indent=2)


def environment_from_json(text: str) -> Environment:
    doc = json.loads(text)
    g = doc["geometry"]
    geometry = Geometry(
        area=Rect(
            g["area"]["x_min"], g["area"]["y_min"], g["area"]["width"], g["area"]["height"]
        ),
        bs_relative=tuple(g["bs_relative"]),
        bs_array_orientation=g["bs_array_orientation"],
    )
    scatterers = tuple(
        Scatterer(np.array(sc["position"]), complex(sc["reflection"][0], sc["reflection"][1]))
        for sc in doc["scatterers"]
    )
    return Environment(
        env_id=doc["env_id"],
        seed=doc["seed"],
        geometry=geometry,
        scatterers=scatterers,
        blockage_fraction=doc["blockage_fraction"],
    )
