"""Attributed scattering center (ASC) responses and first-layer kernel banks.

The radar grid is frequency (rows) by aspect angle (columns). Kernels are
made by evaluating the simplified single-scatterer response on that grid,
forming its image with a unitary 2-D FFT, cropping the center r x r window
and normalizing.
"""

from __future__ import annotations

import csv
import io
import os
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text
from .errors import ArgumentError, ConfigError, NumericalError, ParseError, ShapeError, TruncationError, VersionError
from .kvconfig import coerce_fields, parse_float_list, read_kv_file

SPEED_OF_LIGHT = 299_792_458.0

BANK_MAGIC = b"ASCB"
BANK_VERSION = 1
BANK_META_NAME = "bank_meta.csv"

NORMALIZE_MODES = ("raw_magnitude", "zero_mean_unit_l2")


@dataclass(frozen=True)
class RadarParams:
    """Imaging parameters of the frequency-aspect grid (MSTAR X-band defaults)."""

    carrier_freq: float = 9.6e9
    bandwidth: float = 0.49e9
    freq_min: float = 9.36e9
    freq_max: float = 9.85e9
    n_freq_samples: int = 189
    zero_pad_each_end: int = 19
    aspect_span_deg: float = 2.8
    n_aspect_samples: int = 227
    light_speed: float = SPEED_OF_LIGHT
    spatial_resolution: float = 0.3
    # Stated in the MSTAR imaging notes; recorded only, never used to derive counts.
    stated_sampling_freq: float = 0.591e9

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        if not self.freq_min < self.carrier_freq < self.freq_max:
            problems.append("carrier_freq: must satisfy freq_min < carrier_freq < freq_max")
        span = self.freq_max - self.freq_min
        if self.bandwidth <= 0 or abs(span - self.bandwidth) > 1e-6 * self.bandwidth:
            problems.append(f"bandwidth: {self.bandwidth} does not equal freq_max - freq_min = {span}")
        for name in ("n_freq_samples", "n_aspect_samples"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name}: must be >= 1")
        if self.zero_pad_each_end < 0:
            problems.append("zero_pad_each_end: must be >= 0")
        if self.n_freq_samples + 2 * self.zero_pad_each_end != self.n_aspect_samples:
            problems.append(
                "n_aspect_samples: must equal n_freq_samples + 2*zero_pad_each_end "
                f"({self.n_freq_samples} + 2*{self.zero_pad_each_end} != {self.n_aspect_samples})"
            )
        if not self.aspect_span_deg > 0:
            problems.append("aspect_span_deg: must be > 0")
        if not self.light_speed > 0:
            problems.append("light_speed: must be > 0")
        if not self.spatial_resolution > 0:
            problems.append("spatial_resolution: must be > 0")
        if problems:
            raise ConfigError("invalid radar parameters: " + "; ".join(problems))

    @property
    def grid_size(self) -> int:
        return self.n_aspect_samples

    @classmethod
    def from_mapping(cls, values) -> "RadarParams":
        conv = {}
        for f in fields(cls):
            conv[f.name] = int if f.type in ("int", int) else float
        kw = coerce_fields(values, conv, section="radar")
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "RadarParams":
        return cls.from_mapping(read_kv_file(path))


@dataclass(frozen=True)
class ScatteringCenter:
    amplitude: float = 1.0
    alpha: float = 0.0
    x: float = 0.0
    y: float = 0.0
    length: float = 0.0
    phi_bar: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ConfigError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.length < 0:
            raise ConfigError(f"length must be >= 0, got {self.length}")

    @property
    def is_localized(self) -> bool:
        return self.length == 0 and self.phi_bar == 0


@dataclass(frozen=True)
class FrequencyAspectGrid:
    freqs: np.ndarray  # Hz, includes the zero-pad slots
    mask: np.ndarray  # True on measured frequency slots
    aspect_deg: np.ndarray
    params: RadarParams

    @property
    def shape(self) -> tuple[int, int]:
        return (self.freqs.size, self.aspect_deg.size)

    @property
    def freq_step(self) -> float:
        n = self.params.n_freq_samples
        return (self.params.freq_max - self.params.freq_min) / (n - 1) if n > 1 else 0.0


def make_radar_grid(params: RadarParams) -> FrequencyAspectGrid:
    params.validate()
    n, pad = params.n_freq_samples, params.zero_pad_each_end
    step = (params.freq_max - params.freq_min) / (n - 1) if n > 1 else 0.0
    idx = np.arange(n + 2 * pad, dtype=np.float64) - pad
    freqs = params.freq_min + idx * step
    mask = np.zeros(n + 2 * pad, dtype=bool)
    mask[pad : pad + n] = True
    na = params.n_aspect_samples
    if na == 1:
        aspect = np.zeros(1)
    else:
        # integer numerator keeps the axis exactly symmetric about zero
        aspect = (params.aspect_span_deg / 2.0) * (2.0 * np.arange(na) - (na - 1)) / (na - 1)
    freqs.setflags(write=False)
    mask.setflags(write=False)
    aspect.setflags(write=False)
    return FrequencyAspectGrid(freqs=freqs, mask=mask, aspect_deg=aspect, params=params)


def asc_response(theta: ScatteringCenter, grid: FrequencyAspectGrid, mode: str = "full") -> np.ndarray:
    """Complex response of one scattering center over the (frequency, aspect) grid.

    ``full`` evaluates all seven parameters. ``simplified`` drops the
    frequency and aspect dependence, puts the center at the origin and
    fixes the amplitude at 1, leaving only the length/orientation sinc.
    The sinc is the normalized one, ``sin(pi x) / (pi x)``. Zero-pad slots
    are exactly zero.
    """
    c = grid.params.light_speed
    f = grid.freqs[:, None]
    phi = np.deg2rad(grid.aspect_deg)[None, :]
    phi_bar = np.deg2rad(theta.phi_bar)
    sinc = np.sinc(2.0 * f / c * theta.length * np.sin(phi - phi_bar))
    if mode == "simplified":
        out = sinc.astype(np.complex128)
    elif mode == "full":
        fc = grid.params.carrier_freq
        freq_term = (1j * f / fc) ** theta.alpha if theta.alpha != 0 else 1.0
        position = np.exp(-1j * 4.0 * np.pi * f / c * (theta.x * np.cos(phi) + theta.y * np.sin(phi)))
        aspect_term = np.exp(-2.0 * np.pi * f * theta.gamma * np.sin(phi)) if theta.gamma != 0 else 1.0
        out = theta.amplitude * freq_term * position * sinc * aspect_term
        out = np.asarray(out, dtype=np.complex128)
    else:
        raise ConfigError(f"unknown response mode {mode!r}; expected 'full' or 'simplified'")
    out = np.broadcast_to(out, grid.shape).copy()
    out[~grid.mask, :] = 0.0
    return out


def length_from_pixels(p: int, resolution: float, r: int | None = None) -> float:
    """Physical scatterer length spanning ``p`` pixels of size ``resolution``."""
    if int(p) != p or p < 1:
        raise ConfigError(f"pixel count must be an integer >= 1, got {p}")
    if r is not None and p > r:
        raise ConfigError(f"pixel count {p} exceeds kernel size {r}")
    return p * resolution


def scene_spectrum(
    centers: Sequence[ScatteringCenter],
    grid: FrequencyAspectGrid,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Superpose full-mode responses and add circular complex Gaussian noise."""
    if len(centers) == 0:
        raise ArgumentError("scene needs at least one scattering center")
    if noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be >= 0, got {noise_sigma}")
    total = np.zeros(grid.shape, dtype=np.complex128)
    for center in centers:
        total += asc_response(center, grid, mode="full")
    if noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng()
        n_meas = int(grid.mask.sum())
        scale = noise_sigma / np.sqrt(2.0)
        noise = scale * (rng.standard_normal((n_meas, grid.shape[1])) + 1j * rng.standard_normal((n_meas, grid.shape[1])))
        total[grid.mask, :] += noise
    return total


def spectrum_to_complex_image(spectrum: np.ndarray) -> np.ndarray:
    spectrum = np.asarray(spectrum)
    if spectrum.ndim != 2 or spectrum.shape[0] != spectrum.shape[1]:
        raise ShapeError(f"spectrum must be a square matrix, got shape {spectrum.shape}")
    return np.fft.fftshift(np.fft.fft2(spectrum, norm="ortho"))


def spectrum_to_image(spectrum: np.ndarray) -> np.ndarray:
    """Magnitude image with the zero-frequency bin moved to the center."""
    return np.abs(spectrum_to_complex_image(spectrum))


def crop_center(image: np.ndarray, r: int) -> np.ndarray:
    image = np.asarray(image)
    if r < 1 or r % 2 == 0:
        raise ShapeError(f"crop size must be odd and positive, got {r}")
    rows, cols = image.shape[-2:]
    if r > rows or r > cols:
        raise ShapeError(f"crop size {r} exceeds image shape {image.shape}")
    r0 = (rows - 1) // 2 - r // 2
    c0 = (cols - 1) // 2 - r // 2
    return image[..., r0 : r0 + r, c0 : c0 + r].copy()


@dataclass(frozen=True)
class AscKernelSpec:
    kernel_size: int
    length_grid: tuple[float, ...]
    orientation_grid: tuple[float, ...]
    normalize_mode: str = "zero_mean_unit_l2"

    def validate(self, params: RadarParams) -> None:
        problems = []
        r = self.kernel_size
        if r < 1 or r % 2 == 0:
            problems.append(f"kernel_size: must be odd and >= 1, got {r}")
        if r > params.grid_size:
            problems.append(f"kernel_size: {r} exceeds grid size {params.grid_size}")
        if not self.length_grid:
            problems.append("length_grid: empty")
        if not self.orientation_grid:
            problems.append("orientation_grid: empty")
        m = params.spatial_resolution
        for L in self.length_grid:
            p = L / m
            if abs(p - round(p)) > 1e-6 or round(p) < 1 or round(p) > r:
                problems.append(f"length_grid: {L} m is not p*{m} with integer 1 <= p <= {r}")
        for phi in self.orientation_grid:
            if not 0.0 <= phi <= 90.0:
                problems.append(f"orientation_grid: {phi} deg outside [0, 90]")
        if self.normalize_mode not in NORMALIZE_MODES:
            problems.append(f"normalize_mode: {self.normalize_mode!r} not in {NORMALIZE_MODES}")
        if problems:
            raise ConfigError("invalid ASC kernel spec: " + "; ".join(problems))

    @property
    def count(self) -> int:
        return len(self.length_grid) * len(self.orientation_grid)

    @classmethod
    def from_file(cls, path) -> "AscKernelSpec":
        values = read_kv_file(path)
        conv = {
            "kernel_size": int,
            "length_grid": lambda s: tuple(parse_float_list(s)),
            "orientation_grid": lambda s: tuple(parse_float_list(s)),
            "normalize_mode": str,
        }
        kw = coerce_fields(values, conv, section="kernel spec")
        missing = [k for k in ("kernel_size", "length_grid", "orientation_grid") if k not in kw]
        if missing:
            raise ConfigError("kernel spec missing keys: " + ", ".join(missing))
        return cls(**kw)


def table_iii_spec(size: int, normalize_mode: str = "zero_mean_unit_l2", resolution: float = 0.3) -> AscKernelSpec:
    """Published length/orientation grids for the 11, 21 and 31 pixel kernels."""
    if size not in (11, 21, 31):
        raise ConfigError(f"no published kernel grid for size {size}; expected 11, 21 or 31")
    n_len = 10 if size == 11 else size
    n_ang = n_len
    lengths = tuple(round(p * resolution, 10) for p in range(1, n_len + 1))
    step = 90.0 / (n_ang - 1)
    angles = tuple(round(i * step, 10) for i in range(n_ang))
    return AscKernelSpec(size, lengths, angles, normalize_mode)


@dataclass
class KernelBank:
    kernel_size: int
    kernels: np.ndarray  # (count, r, r)
    metadata: list[tuple[float, float]] = field(default_factory=list)  # (L_m, phi_bar_deg)

    @property
    def count(self) -> int:
        return int(self.kernels.shape[0])

    def to_bytes(self) -> bytes:
        header = BANK_MAGIC + struct.pack("<III", BANK_VERSION, self.kernel_size, self.count)
        return header + self.kernels.astype("<f4").tobytes(order="C")

    def meta_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "L_m", "phi_bar_deg"])
        for i, (L, phi) in enumerate(self.metadata):
            w.writerow([i, repr(float(L)), repr(float(phi))])
        return buf.getvalue()

    def save(self, path: str | os.PathLike) -> Path:
        """Write the binary bank and its ``bank_meta.csv`` sidecar; returns the sidecar path."""
        path = Path(path)
        atomic_write_bytes(path, self.to_bytes())
        meta_path = path.parent / BANK_META_NAME
        atomic_write_text(meta_path, self.meta_csv())
        return meta_path

    @classmethod
    def from_bytes(cls, data: bytes) -> "KernelBank":
        if len(data) < 16:
            raise TruncationError("kernel bank shorter than its 16-byte header", offset=len(data))
        if data[:4] != BANK_MAGIC:
            raise ParseError(f"bad kernel bank magic {data[:4]!r}", offset=0)
        version, r, count = struct.unpack_from("<III", data, 4)
        if version != BANK_VERSION:
            raise VersionError(f"unsupported kernel bank version {version}")
        need = 16 + 4 * r * r * count
        if len(data) < need:
            raise TruncationError(f"kernel bank payload needs {need} bytes, file has {len(data)}", offset=len(data))
        if len(data) > need:
            raise ParseError(f"{len(data) - need} trailing bytes after kernel bank payload", offset=need)
        kernels = np.frombuffer(data, dtype="<f4", count=r * r * count, offset=16).astype(np.float64)
        return cls(r, kernels.reshape(count, r, r))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "KernelBank":
        path = Path(path)
        bank = cls.from_bytes(path.read_bytes())
        meta_path = path.parent / BANK_META_NAME
        if meta_path.exists():
            with open(meta_path, newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            if len(rows) == bank.count:
                bank.metadata = [(float(r["L_m"]), float(r["phi_bar_deg"])) for r in rows]
        return bank


def normalize_kernel(kernel: np.ndarray, mode: str) -> np.ndarray:
    if mode == "raw_magnitude":
        return kernel
    if mode == "zero_mean_unit_l2":
        k = kernel - kernel.mean()
        norm = np.sqrt(np.sum(k * k))
        if not norm > 1e-300:
            raise NumericalError("kernel is constant; cannot normalize to unit L2 norm")
        k = k / norm
        # second pass removes the rounding left by the first
        k = k - k.mean()
        return k / np.sqrt(np.sum(k * k))
    raise ConfigError(f"unknown normalize_mode {mode!r}")


def asc_kernel(length: float, phi_bar: float, r: int, grid: FrequencyAspectGrid, normalize_mode: str) -> np.ndarray:
    response = asc_response(ScatteringCenter(length=length, phi_bar=phi_bar), grid, mode="simplified")
    return normalize_kernel(crop_center(spectrum_to_image(response), r), normalize_mode)


def build_kernel_bank(spec: AscKernelSpec, params: RadarParams) -> KernelBank:
    """Kernels for every (L, phi_bar) pair, lengths in the outer loop."""
    spec.validate(params)
    grid = make_radar_grid(params)
    pairs = list(iter_pairs(spec))
    kernels = np.empty((len(pairs), spec.kernel_size, spec.kernel_size))
    for i, (L, phi) in enumerate(pairs):
        kernels[i] = asc_kernel(L, phi, spec.kernel_size, grid, spec.normalize_mode)
    if not np.all(np.isfinite(kernels)):
        raise NumericalError("non-finite value in kernel bank")
    return KernelBank(spec.kernel_size, kernels, [(float(L), float(p)) for L, p in pairs])


def iter_pairs(spec: AscKernelSpec) -> Iterable[tuple[float, float]]:
    for L in sorted(spec.length_grid):
        for phi in sorted(spec.orientation_grid):
            yield L, phi
