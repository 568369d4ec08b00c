"""SAR sample ingestion, SOC splits, synthetic scatterer datasets and preprocessing."""

from __future__ import annotations

import csv
import io
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text
from .asc import RadarParams, ScatteringCenter, make_radar_grid, scene_spectrum, spectrum_to_image
from .errors import ArgumentError, ConfigError, DataError, MissingKeyError, ParseError, TruncationError

log = logging.getLogger(__name__)

UNKNOWN_LABEL = None

PHOENIX_START = b"PhoenixHeaderVer"
PHOENIX_END = b"[EndofPhoenixHeader]"

# class: (serial number, train count at 17 deg, test count at 15 deg)
TABLE_II = {
    "BMP2": ("9563", 233, 195),
    "BTR70": ("c71", 233, 196),
    "T72": ("132", 232, 196),
    "T62": ("A51", 299, 273),
    "BRDM2": ("E71", 298, 274),
    "BTR60": ("7532", 256, 195),
    "ZSU23/4": ("d08", 299, 274),
    "D7": ("13015", 299, 274),
    "ZIL131": ("E12", 299, 274),
    "2S1": ("B01", 299, 274),
}
OPEN_SET_KNOWN = ("2S1", "BRDM2", "BTR60", "D7", "T62", "ZIL131", "ZSU23/4")
OPEN_SET_UNKNOWN = ("BMP2", "BTR70", "T72")


@dataclass
class SarSample:
    magnitude: np.ndarray
    label: str | None = None
    phase: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.magnitude = np.asarray(self.magnitude, dtype=np.float64)
        if not np.all(np.isfinite(self.magnitude)) or np.any(self.magnitude < 0):
            raise DataError("magnitude must be finite and non-negative")
        if self.phase is not None and np.shape(self.phase) != self.magnitude.shape:
            raise DataError(f"phase shape {np.shape(self.phase)} differs from magnitude shape {self.magnitude.shape}")


# ---------------------------------------------------------------------------
# MSTAR


def parse_mstar_bytes(data: bytes, source: str = "<bytes>") -> SarSample:
    first_nl = data.find(b"\n")
    first_line = data[: first_nl if first_nl >= 0 else len(data)]
    if PHOENIX_START not in first_line:
        raise ParseError(f"{source}: first line does not contain {PHOENIX_START.decode()}", offset=0)
    end = data.find(PHOENIX_END)
    if end < 0:
        raise ParseError(f"{source}: header terminator {PHOENIX_END.decode()} not found", offset=len(data))
    nl = data.find(b"\n", end)
    payload_start = len(data) if nl < 0 else nl + 1
    header = {}
    for line in data[:end].decode("latin-1").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()
    dims = {}
    for key in ("NumberOfRows", "NumberOfColumns"):
        if key not in header:
            raise MissingKeyError(f"{source}: header lacks {key}", offset=end)
        try:
            dims[key] = int(header[key])
        except ValueError:
            raise ParseError(f"{source}: {key} is not an integer: {header[key]!r}", offset=end) from None
    rows, cols = dims["NumberOfRows"], dims["NumberOfColumns"]
    need = 2 * rows * cols * 4
    have = len(data) - payload_start
    if have < need:
        raise TruncationError(
            f"{source}: payload has {have} bytes, {rows}x{cols} magnitude+phase needs {need}",
            offset=len(data),
        )
    if have > need:
        raise ParseError(f"{source}: {have - need} unexpected bytes after payload", offset=payload_start + need)
    values = np.frombuffer(data, dtype=">f4", count=2 * rows * cols, offset=payload_start).astype(np.float64)
    magnitude = values[: rows * cols].reshape(rows, cols)
    phase = values[rows * cols :].reshape(rows, cols)
    meta = {"format": "mstar", "header": header}
    if "TargetAz" in header:
        meta["azimuth_deg"] = float(header["TargetAz"])
    if "DesiredDepression" in header:
        meta["depression_deg"] = float(header["DesiredDepression"])
    if "TargetSerNum" in header:
        meta["serial"] = header["TargetSerNum"]
    return SarSample(magnitude, header.get("TargetType"), phase, meta)


def parse_mstar(path: str | os.PathLike) -> SarSample:
    path = Path(path)
    return parse_mstar_bytes(path.read_bytes(), source=str(path))


def encode_mstar(magnitude, phase, header: dict | None = None) -> bytes:
    """Phoenix-format bytes for the given blocks (used for fixtures and round trips)."""
    magnitude = np.asarray(magnitude)
    rows, cols = magnitude.shape
    lines = ["[PhoenixHeaderVer01.5]", "PhoenixHeaderLength= 0", f"NumberOfColumns= {cols}", f"NumberOfRows= {rows}"]
    lines += [f"{k}= {v}" for k, v in (header or {}).items()]
    lines.append(PHOENIX_END.decode())
    text = "\n".join(lines) + "\n"
    payload = np.asarray(magnitude, dtype=">f4").tobytes() + np.asarray(phase, dtype=">f4").tobytes()
    return text.encode("latin-1") + payload


def _looks_like_mstar(path: Path) -> bool:
    try:
        with open(path, "rb") as fh:
            return PHOENIX_START in fh.read(64)
    except OSError:
        return False


# ---------------------------------------------------------------------------
# directories


def read_png(path: str | os.PathLike) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr


def load_sample_file(path: Path) -> SarSample | None:
    suffix = path.suffix.lower()
    if suffix == ".png":
        return SarSample(read_png(path), metadata={"format": "png"})
    if suffix == ".npy":
        return SarSample(np.load(path, allow_pickle=False), metadata={"format": "npy"})
    if _looks_like_mstar(path):
        return parse_mstar(path)
    return None


def read_manifest(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"path", "label"} <= set(rows[0]):
        raise DataError(f"manifest {path} must have at least path,label columns")
    return rows


def load_dataset_dir(
    root: str | os.PathLike, manifest: str | os.PathLike | None = None, strict: bool = False
) -> list[SarSample]:
    """Load MSTAR, PNG and .npy chips below ``root``, sorted by relative path.

    Labels come from the parent directory name unless a manifest CSV
    (``path,label,split[,depression_deg,azimuth_deg]``) is given, in which
    case only the listed files are read and the manifest columns win.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    if manifest is None and (root / "manifest.csv").exists():
        manifest = root / "manifest.csv"
    entries: list[tuple[Path, dict]] = []
    if manifest is not None:
        for row in read_manifest(manifest):
            entries.append((root / row["path"], row))
    else:
        for dirpath, _, files in os.walk(root):
            for name in files:
                entries.append((Path(dirpath) / name, {}))
    entries.sort(key=lambda e: e[0].relative_to(root).as_posix())

    samples = []
    for path, row in entries:
        try:
            sample = load_sample_file(path)
        except (OSError, DataError, ValueError) as exc:
            if strict:
                raise DataError(f"cannot read {path}: {exc}") from exc
            log.warning("skipping unreadable file %s: %s", path, exc)
            continue
        if sample is None:
            if manifest is not None:
                msg = f"unsupported file format: {path}"
                if strict:
                    raise DataError(msg)
                log.warning(msg)
            continue
        rel = path.relative_to(root).as_posix()
        sample.metadata["path"] = rel
        if row:
            sample.label = row["label"] or None
            for key in ("split",):
                if row.get(key):
                    sample.metadata[key] = row[key]
            for key in ("depression_deg", "azimuth_deg"):
                if row.get(key):
                    sample.metadata[key] = float(row[key])
        else:
            if sample.label is not None:
                sample.metadata["target_type"] = sample.label
            sample.label = path.parent.name
        samples.append(sample)
    if not samples:
        raise DataError(f"no readable samples found under {root}")
    return samples


def select_soc_serials(samples: Sequence[SarSample]) -> list[SarSample]:
    """Drop MSTAR chips whose serial differs from the standard one for their class.

    Only chips carrying both a known class label and a serial number are
    filtered; everything else passes through.
    """
    kept = []
    for s in samples:
        entry = TABLE_II.get(s.label or "")
        serial = s.metadata.get("serial")
        if entry is not None and serial is not None and str(serial).lower() != entry[0].lower():
            continue
        kept.append(s)
    if len(kept) < len(samples):
        log.info("dropped %d chips with non-standard serial numbers", len(samples) - len(kept))
    return kept


def soc_count_mismatches(samples: Sequence[SarSample]) -> dict[str, tuple[int, int, int, int]]:
    """Classes whose 17/15 deg chip counts differ from the standard table.

    Returns ``{class: (train_found, train_expected, test_found, test_expected)}``.
    """
    out = {}
    for cls, (_, n_train, n_test) in TABLE_II.items():
        members = [s for s in samples if s.label == cls]
        if not members:
            continue
        dep = [s.metadata.get("depression_deg") for s in members]
        found_train = sum(d is not None and abs(d - 17.0) < 1e-6 for d in dep)
        found_test = sum(d is not None and abs(d - 15.0) < 1e-6 for d in dep)
        if (found_train, found_test) != (n_train, n_test):
            out[cls] = (found_train, n_train, found_test, n_test)
    return out


# ---------------------------------------------------------------------------
# splits


@dataclass
class SocSplit:
    known: list[str]
    unknown: list[str]
    train: list[SarSample]
    test: list[SarSample]

    @property
    def classes(self) -> list[str]:
        return self.known + self.unknown


def make_soc_split(
    samples: Sequence[SarSample],
    known: Sequence[str],
    unknown: Sequence[str] = (),
    test_fraction: float = 0.3,
    seed: int = 0,
    train_depression: float = 17.0,
    test_depression: float = 15.0,
) -> SocSplit:
    """Partition samples into train (known classes only) and test (known + unknown).

    Precedence: explicit ``split`` metadata, then depression angle (17 deg
    train / 15 deg test), then a seeded stratified split.
    """
    known, unknown = list(known), list(unknown)
    overlap = set(known) & set(unknown)
    if overlap:
        raise ConfigError(f"classes listed as both known and unknown: {sorted(overlap)}")
    present = {s.label for s in samples}
    missing = [c for c in known + unknown if c not in present]
    if missing:
        raise ConfigError(f"classes not present in the sample set: {missing}")
    wanted = [s for s in samples if s.label in set(known) | set(unknown)]

    if all("split" in s.metadata for s in wanted):
        part = {id(s): s.metadata["split"] for s in wanted}
    elif all("depression_deg" in s.metadata for s in wanted):
        part = {}
        for s in wanted:
            dep = s.metadata["depression_deg"]
            if abs(dep - train_depression) < 1e-6:
                part[id(s)] = "train"
            elif abs(dep - test_depression) < 1e-6:
                part[id(s)] = "test"
    else:
        if not 0 < test_fraction < 1:
            raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
        rng = np.random.default_rng(seed)
        part = {}
        for cls in known + unknown:
            members = [s for s in wanted if s.label == cls]
            order = rng.permutation(len(members))
            n_test = max(1, int(round(test_fraction * len(members))))
            for rank, i in enumerate(order):
                part[id(members[i])] = "test" if rank < n_test else "train"

    known_set = set(known)
    train = [s for s in wanted if part.get(id(s)) == "train" and s.label in known_set]
    test = [s for s in wanted if part.get(id(s)) == "test"]
    return SocSplit(known, unknown, train, test)


# ---------------------------------------------------------------------------
# preprocessing


def center_window(image: np.ndarray, size: int) -> np.ndarray:
    """Crop or zero-pad to ``size`` x ``size`` keeping pixel ``(n-1)//2`` at the center."""
    image = np.asarray(image, dtype=np.float64)
    out = np.zeros((size, size))
    src_c = [(n - 1) // 2 for n in image.shape]
    dst_c = (size - 1) // 2
    sl_src, sl_dst = [], []
    for n, c in zip(image.shape, src_c):
        lo = c - dst_c  # source index landing on output index 0
        s0, s1 = max(lo, 0), min(lo + size, n)
        sl_src.append(slice(s0, s1))
        sl_dst.append(slice(s0 - lo, s1 - lo))
    out[tuple(sl_dst)] = image[tuple(sl_src)]
    return out


def preprocess(sample: SarSample | np.ndarray, target_size: int, mode: str = "pad", log_magnitude: bool = False) -> np.ndarray:
    """Return a (1, target, target) array scaled by the image maximum into [0, 1].

    ``pad`` first zero-pads a non-square image to its longer side,
    ``center_crop`` first crops it to its shorter side; the square is then
    center-cropped or zero-padded to ``target_size``.
    """
    mag = sample.magnitude if isinstance(sample, SarSample) else np.asarray(sample, dtype=np.float64)
    if mode not in ("pad", "center_crop"):
        raise ArgumentError(f"mode must be 'pad' or 'center_crop', got {mode!r}")
    side = max(mag.shape) if mode == "pad" else min(mag.shape)
    img = center_window(mag, side) if mag.shape[0] != mag.shape[1] else mag
    img = center_window(img, target_size)
    if log_magnitude:
        img = np.log1p(img)
    peak = img.max()
    if peak > 0:
        img = img / peak
    return img[None, :, :]


def to_arrays(
    samples: Sequence[SarSample], class_names: Sequence[str], target_size: int, mode: str = "pad", log_magnitude=False
) -> tuple[np.ndarray, np.ndarray]:
    """Stack preprocessed images; labels outside ``class_names`` map to -1 (unknown)."""
    index = {c: i for i, c in enumerate(class_names)}
    x = np.stack([preprocess(s, target_size, mode, log_magnitude) for s in samples]) if samples else np.zeros(
        (0, 1, target_size, target_size)
    )
    y = np.array([index.get(s.label, -1) for s in samples], dtype=np.int64)
    return x, y


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 5
    per_class_train: int = 200
    per_class_test: int = 100
    scatterers_min: int = 3
    scatterers_max: int = 6
    extent_m: float = 4.0
    jitter_position_m: float = 0.15
    jitter_amplitude: float = 0.1  # relative
    jitter_length_m: float = 0.1
    jitter_orientation_deg: float = 3.0
    noise_sigma: float = 0.02
    azimuth_span_deg: float = 0.0  # per-sample target rotation drawn from [-span/2, span/2]
    image_size: int = 64
    seed: int = 0

    def validate(self, radar: RadarParams) -> None:
        problems = []
        for name in ("n_classes", "per_class_train", "scatterers_min", "image_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be >= 1")
        if self.per_class_test < 0:
            problems.append("per_class_test: must be >= 0")
        if self.scatterers_max < self.scatterers_min:
            problems.append("scatterers_max: must be >= scatterers_min")
        if self.image_size > radar.grid_size:
            problems.append(f"image_size: {self.image_size} exceeds radar grid size {radar.grid_size}")
        if self.noise_sigma < 0:
            problems.append("noise_sigma: must be >= 0")
        if problems:
            raise ConfigError("invalid synthetic data configuration: " + "; ".join(problems))

    @classmethod
    def from_mapping(cls, values) -> "SynthConfig":
        from dataclasses import fields as dc_fields

        from .kvconfig import coerce_fields

        conv = {f.name: (int if f.type == "int" else float) for f in dc_fields(cls)}
        return cls(**coerce_fields(values, conv, section="synthetic data"))


def class_template(cfg: SynthConfig, class_index: int) -> list[ScatteringCenter]:
    rng = np.random.default_rng([cfg.seed, class_index, 7919])
    q = int(rng.integers(cfg.scatterers_min, cfg.scatterers_max + 1))
    centers = []
    for _ in range(q):
        amp = float(rng.uniform(0.5, 1.5))
        x, y = (float(v) for v in rng.uniform(-cfg.extent_m, cfg.extent_m, size=2))
        if rng.random() < 0.5:
            centers.append(ScatteringCenter(amplitude=amp, x=x, y=y))
        else:
            length = float(rng.uniform(0.6, 3.0))
            phi = float(rng.uniform(0.0, 90.0))
            centers.append(ScatteringCenter(amplitude=amp, x=x, y=y, length=length, phi_bar=phi))
    return centers


def jitter_template(
    template: Sequence[ScatteringCenter], cfg: SynthConfig, rng: np.random.Generator, azimuth_deg: float = 0.0
):
    """Perturb every center, then rotate the whole target by ``azimuth_deg``."""
    ca, sa = np.cos(np.deg2rad(azimuth_deg)), np.sin(np.deg2rad(azimuth_deg))
    out = []
    for c in template:
        amp = max(0.0, c.amplitude * (1.0 + cfg.jitter_amplitude * rng.standard_normal()))
        x0 = c.x + cfg.jitter_position_m * rng.standard_normal()
        y0 = c.y + cfg.jitter_position_m * rng.standard_normal()
        x, y = ca * x0 - sa * y0, sa * x0 + ca * y0
        if c.length > 0:
            length = max(0.0, c.length + cfg.jitter_length_m * rng.standard_normal())
            phi = c.phi_bar + cfg.jitter_orientation_deg * rng.standard_normal() + azimuth_deg
        else:
            length, phi = 0.0, 0.0
        out.append(ScatteringCenter(amp, c.alpha, x, y, length, phi, c.gamma))
    return out


def render_scene(centers, grid, image_size, noise_sigma=0.0, rng=None) -> np.ndarray:
    image = spectrum_to_image(scene_spectrum(centers, grid, noise_sigma, rng))
    return center_window(image, image_size)


def class_name(i: int) -> str:
    return f"C{i}"


def synth_dataset(
    cfg: SynthConfig,
    radar: RadarParams | None = None,
    templates: Sequence[Sequence[ScatteringCenter]] | None = None,
) -> list[SarSample]:
    """Balanced labeled scenes: per class, a fixed scatterer template perturbed per sample.

    Every sample draws from its own generator seeded by (seed, class,
    split, index), so any subset can be regenerated independently.
    """
    radar = radar or RadarParams()
    cfg.validate(radar)
    if templates is not None and len(templates) != cfg.n_classes:
        raise ConfigError(f"got {len(templates)} templates for {cfg.n_classes} classes")
    grid = make_radar_grid(radar)
    samples = []
    for k in range(cfg.n_classes):
        template = list(templates[k]) if templates is not None else class_template(cfg, k)
        for split_code, (split, count) in enumerate((("train", cfg.per_class_train), ("test", cfg.per_class_test))):
            for i in range(count):
                rng = np.random.default_rng([cfg.seed, k, split_code, i])
                azimuth = float(rng.uniform(-0.5, 0.5) * cfg.azimuth_span_deg) if cfg.azimuth_span_deg else 0.0
                centers = jitter_template(template, cfg, rng, azimuth)
                image = render_scene(centers, grid, cfg.image_size, cfg.noise_sigma, rng)
                sid = f"{class_name(k)}_{split}_{i:05d}"
                meta = {"split": split, "sample_id": sid, "azimuth_deg": azimuth}
                samples.append(SarSample(image, class_name(k), metadata=meta))
    return samples


def save_samples(samples: Iterable[SarSample], out_dir: str | os.PathLike) -> Path:
    """One ``.npy`` per sample plus ``manifest.csv`` (path,label,split,depression_deg,azimuth_deg)."""
    out_dir = Path(out_dir)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "label", "split", "depression_deg", "azimuth_deg"])
    for n, s in enumerate(samples):
        sid = s.metadata.get("sample_id", f"sample_{n:06d}")
        rel = f"{_safe(s.label or 'unknown')}/{sid}.npy"
        path = out_dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(path, npy_bytes(s.magnitude))
        w.writerow([rel, s.label or "", s.metadata.get("split", ""),
                    s.metadata.get("depression_deg", ""), s.metadata.get("azimuth_deg", "")])
    manifest = out_dir / "manifest.csv"
    atomic_write_text(manifest, buf.getvalue())
    return manifest


def npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.asarray(array), allow_pickle=False)
    return buf.getvalue()


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)
