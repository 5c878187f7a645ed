"""Dataset files, manifests, preprocessing, crop samplers and synthetic data.

T4DF container (all integers little-endian)::

    b"T4DF" | u8 version (=1) | u8 dtype (0=f32, 1=f64) | u8 rank | rank x u64 extents | payload

The payload is the C-order element buffer in little-endian byte order.
Subject images are stored as rank-4 ``[X, Y, Z, T]`` files and loaded as
``[1, 1, X, Y, Z, T]`` tensors.

Manifest: UTF-8 text, one ``path<TAB>id<TAB>label<TAB>split`` line per
record. Lines starting with ``#@`` carry ``key=value`` header fields
(``shape``, ``sampling_period``); any other ``#`` line is a comment. Paths
are relative to the manifest's directory unless absolute.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .tensor import Rng, ShapeError, Tensor, window, wrap

MAGIC = b"T4DF"
VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k.newbyteorder("<") for k, v in DTYPE_CODES.items()}
SPLITS = ("train", "val", "test")
DEFAULT_PERIOD = 2.0
DEFAULT_STRIDE = 8


# -- T4DF ----------------------------------------------------------------------

class T4dfError(ValueError):
    """Malformed T4DF data."""


class BadMagic(T4dfError):
    pass


class BadVersion(T4dfError):
    pass


class BadDtype(T4dfError):
    pass


class Truncated(T4dfError):
    pass


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise Truncated(f"truncated {what}: expected {n} bytes, got {len(b)}")
    return b


def write_tensor(f: BinaryIO, t: Tensor) -> int:
    """Write one T4DF record to an open binary stream; returns bytes written."""
    head = MAGIC + struct.pack("<BBB", VERSION, DTYPE_CODES[t.dtype], t.rank)
    head += struct.pack(f"<{t.rank}Q", *t.shape)
    body = t.data.astype(t.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    f.write(head)
    f.write(body)
    return len(head) + len(body)


def read_header(f: BinaryIO) -> tuple[np.dtype, tuple[int, ...]]:
    magic = f.read(4)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, code, rank = struct.unpack("<BBB", _read_exact(f, 3, "header"))
    if version != VERSION:
        raise BadVersion(f"unsupported T4DF version {version} (reader supports {VERSION})")
    if code not in _CODE_DTYPES:
        raise BadDtype(f"unknown dtype code {code}")
    if rank > 6:
        raise T4dfError(f"rank {rank} exceeds 6")
    shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "extents"))
    return _CODE_DTYPES[code], tuple(shape)


def read_tensor(f: BinaryIO) -> Tensor:
    dtype, shape = read_header(f)
    count = math.prod(shape)
    raw = _read_exact(f, count * dtype.itemsize, f"payload of {count} elements")
    a = np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="))
    return wrap(a.reshape(shape))


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as f:
        write_tensor(f, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        t = read_tensor(f)
        if f.read(1):
            raise T4dfError(f"{path}: trailing bytes after payload")
    return t


def tensor_bytes(t: Tensor) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


# -- manifest ------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    subject_id: str
    label: int
    split: str


@dataclass
class FmriRecord:
    subject_id: str
    image: Tensor  # [1, 1, X, Y, Z, T]
    label: int
    split: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"{self.subject_id}: label must be 0 or 1, got {self.label}")
        if self.image.rank != 6 or self.image.shape[:2] != (1, 1):
            raise ShapeError(f"{self.subject_id}: image must be [1, 1, X, Y, Z, T], got {list(self.image.shape)}")
        if not np.isfinite(self.image.data).all():
            raise ValueError(f"{self.subject_id}: image has non-finite values")

    @property
    def length(self) -> int:
        return self.image.shape[5]


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    shape: tuple[int, ...] | None = None  # expected [X, Y, Z, T]
    sampling_period: float = DEFAULT_PERIOD
    root: Path = Path(".")

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.subject_id in seen:
                raise ValueError(f"duplicate subject id {e.subject_id!r}")
            if e.split not in SPLITS:
                raise ValueError(f"{e.subject_id}: unknown split {e.split!r}")
            if e.label not in (0, 1):
                raise ValueError(f"{e.subject_id}: label must be 0 or 1")
            seen.add(e.subject_id)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict[str, tuple[int, int]]:
        """``split -> (controls, ASD)``."""
        return {s: (sum(e.label == 0 for e in self.split(s)), sum(e.label == 1 for e in self.split(s)))
                for s in SPLITS}

    def check_balanced(self, splits: Iterable[str] = ("val", "test")) -> None:
        for s in splits:
            c0, c1 = self.counts()[s]
            if c0 != c1:
                raise ValueError(f"split {s} is unbalanced: {c0} controls vs {c1} ASD")

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def load(self, split: str) -> list[FmriRecord]:
        return load_records(self, split)

    def dumps(self) -> str:
        lines = []
        if self.shape is not None:
            lines.append("#@ shape=" + ",".join(str(s) for s in self.shape))
        lines.append(f"#@ sampling_period={self.sampling_period!r}")
        lines.append("# path\tid\tlabel\tsplit")
        lines += [f"{e.path}\t{e.subject_id}\t{e.label}\t{e.split}" for e in self.entries]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def parse(cls, text: str, root=".") -> Manifest:
        entries, header = [], {}
        for no, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#@"):
                key, sep, value = line[2:].strip().partition("=")
                if not sep:
                    raise ValueError(f"manifest line {no}: header must be key=value")
                header[key.strip()] = value.strip()
                continue
            if line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"manifest line {no}: expected 4 tab-separated fields, got {len(parts)}")
            path, sid, label, split = parts
            try:
                label = int(label)
            except ValueError:
                raise ValueError(f"manifest line {no}: label {label!r} is not an integer") from None
            entries.append(ManifestEntry(path, sid, label, split))
        unknown = set(header) - {"shape", "sampling_period"}
        if unknown:
            raise ValueError(f"unknown manifest header keys: {sorted(unknown)}")
        shape = tuple(int(v) for v in header["shape"].split(",")) if "shape" in header else None
        period = float(header.get("sampling_period", DEFAULT_PERIOD))
        if period <= 0:
            raise ValueError("sampling_period must be > 0")
        return cls(entries, shape, period, Path(root))

    @classmethod
    def read(cls, path) -> Manifest:
        path = Path(path)
        return cls.parse(path.read_text(encoding="utf-8"), path.parent)


def load_image(path) -> Tensor:
    t = load_tensor(path)
    if t.rank == 4:
        t = t.reshape(1, 1, *t.shape)
    if t.rank != 6 or t.shape[:2] != (1, 1):
        raise ShapeError(f"{path}: expected an [X, Y, Z, T] image, got shape {list(t.shape)}")
    return t


def load_records(manifest: Manifest, split: str | None = None) -> list[FmriRecord]:
    out = []
    for e in manifest.entries:
        if split is not None and e.split != split:
            continue
        image = load_image(manifest.resolve(e))
        if manifest.shape is not None and image.shape[2:] != manifest.shape:
            raise ShapeError(f"{e.subject_id}: image {list(image.shape[2:])} != manifest shape {list(manifest.shape)}")
        out.append(FmriRecord(e.subject_id, image, e.label, e.split))
    return out


# -- preprocessing -------------------------------------------------------------

def bandpass_filter(image: Tensor, sampling_period: float = DEFAULT_PERIOD, lo: float = 0.01,
                    hi: float = 0.1) -> Tensor:
    """Ideal Fourier bandpass along the last (time) axis.

    Bin ``k`` has frequency ``k / (T * sampling_period)``; bins with
    ``lo <= f <= hi`` are kept and all others zeroed, then the real signal
    is rebuilt from the one-sided spectrum.
    """
    if sampling_period <= 0:
        raise ValueError("sampling_period must be > 0")
    n = image.shape[-1]
    if n < 4:
        raise ShapeError(f"need at least 4 time points, got {n}")
    nyquist = 0.5 / sampling_period
    if not lo < hi:
        raise ValueError(f"need lo < hi, got lo={lo} hi={hi}")
    if hi > nyquist:
        raise ValueError(f"hi={hi} Hz exceeds the Nyquist frequency {nyquist} Hz")
    spectrum = np.fft.rfft(image.data.astype(np.float64), axis=-1)
    freqs = np.fft.rfftfreq(n, d=sampling_period)
    spectrum[..., ~((freqs >= lo) & (freqs <= hi))] = 0
    return wrap(np.fft.irfft(spectrum, n=n, axis=-1).astype(image.dtype))


def downsample_spatial(image: Tensor, factor) -> Tensor:
    """Block-average the three spatial axes (the ones before the last axis).

    ``factor`` is an int or three ints. Extents that are not divisible are
    first edge-padded (last slice repeated) up to the next multiple.
    """
    if image.rank < 4:
        raise ShapeError(f"need at least [X, Y, Z, T], got rank {image.rank}")
    factors = (factor,) * 3 if isinstance(factor, int) else tuple(factor)
    if len(factors) != 3 or any(int(f) != f or f < 1 for f in factors):
        raise ValueError(f"factor must be integers >= 1, got {factor}")
    a = image.data
    lead = a.shape[:-4]
    spatial = a.shape[-4:-1]
    pads = [(0, 0)] * len(lead) + [(0, -n % f) for n, f in zip(spatial, factors)] + [(0, 0)]
    if any(hi for _, hi in pads):
        a = np.pad(a, pads, mode="edge")
    shape = list(lead)
    for n, f in zip(a.shape[-4:-1], factors):
        shape += [n // f, f]
    shape.append(a.shape[-1])
    k = len(lead)
    blocks = a.reshape(shape)
    return wrap(blocks.mean(axis=(k + 1, k + 3, k + 5)).astype(image.dtype))


# -- crops ---------------------------------------------------------------------

def _length(image: Tensor, w: int) -> int:
    n = image.shape[-1]
    if w < 1:
        raise ValueError("crop length must be >= 1")
    if n < w:
        raise ShapeError(f"sequence length {n} is shorter than the crop length {w}")
    return n


def _image(x) -> Tensor:
    return x.image if isinstance(x, FmriRecord) else x


def random_temporal_crop(record, rng: Rng, w: int = 15) -> Tensor:
    """Crop ``w`` consecutive steps starting uniformly in ``[0, T - w]``."""
    image = _image(record)
    n = _length(image, w)
    start = int(rng.integers(0, n - w + 1))
    return window(image, image.rank - 1, start, w)


def sliding_window_starts(length: int, w: int = 15, stride: int = DEFAULT_STRIDE) -> list[int]:
    if stride < 1 or w < 1:
        raise ValueError("window length and stride must be >= 1")
    if length < w:
        raise ShapeError(f"sequence length {length} is shorter than the window {w}")
    return list(range(0, length - w + 1, stride))


def sliding_window_crops(record, w: int = 15, stride: int = DEFAULT_STRIDE) -> list[Tensor]:
    image = _image(record)
    return [window(image, image.rank - 1, s, w) for s in sliding_window_starts(image.shape[-1], w, stride)]


def stack(crops: Sequence[Tensor]) -> Tensor:
    """Concatenate ``[1, ...]`` crops along the batch axis."""
    return wrap(np.concatenate([c.data for c in crops], axis=0))


# -- synthetic data ------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Synthetic 4D dataset.

    ``mode="amplitude"``: class 1 gets ``A sin(2 pi f t + phi)`` inside a
    centred ellipsoid, class 0 gets nothing. ``mode="phase"``: both classes
    get a travelling wave ``A sin(2 pi f t - d k x + phi)`` in the ellipsoid,
    moving towards +x (class 1, d=+1) or -x (class 0, d=-1). Mirroring the
    direction is the same as reversing time, so voxel-wise temporal moments
    carry no class information; only the space-time structure does.
    """

    train_per_class: int = 8
    val_per_class: int = 4
    test_per_class: int = 4
    shape: tuple[int, int, int, int] = (16, 16, 16, 64)
    sampling_period: float = DEFAULT_PERIOD
    mode: str = "amplitude"
    amplitude: float = 1.0
    noise_std: float = 1.0
    freq_lo: float = 0.03
    freq_hi: float = 0.08
    region_fraction: float = 0.3  # ellipsoid semi-axis as a fraction of each extent
    wavelength: float = 8.0  # voxels, phase mode only
    margin: float = 0.5  # self-check: class-1 variance excess >= margin * A^2 / 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        for name in ("train_per_class", "val_per_class", "test_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if len(self.shape) != 4 or min(self.shape) < 1:
            raise ValueError(f"shape must be four positive extents, got {self.shape}")
        if self.mode not in ("amplitude", "phase"):
            raise ValueError(f"mode must be 'amplitude' or 'phase', got {self.mode!r}")
        if self.sampling_period <= 0 or self.noise_std < 0 or self.amplitude < 0:
            raise ValueError("sampling_period must be > 0; amplitude and noise_std >= 0")
        if not 0 < self.freq_lo <= self.freq_hi:
            raise ValueError("need 0 < freq_lo <= freq_hi")
        if self.region_fraction <= 0 or self.wavelength <= 0:
            raise ValueError("region_fraction and wavelength must be > 0")

    def per_split(self) -> dict[str, int]:
        return {"train": self.train_per_class, "val": self.val_per_class, "test": self.test_per_class}


def region_mask(shape: Sequence[int], fraction: float = 0.3) -> np.ndarray:
    """Boolean ``[X, Y, Z]`` mask of the centred ellipsoid."""
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape[:3]], indexing="ij")
    r2 = sum(((g - (n - 1) / 2) / max(fraction * n, 0.5)) ** 2 for g, n in zip(grids, shape[:3]))
    return r2 <= 1.0


def synth_subject(cfg: SynthConfig, label: int, rng: Rng, mask: np.ndarray | None = None) -> np.ndarray:
    """One ``[X, Y, Z, T]`` float32 image; draws noise, then frequency and phase."""
    X, Y, Z, T = cfg.shape
    if mask is None:
        mask = region_mask(cfg.shape, cfg.region_fraction)
    img = cfg.noise_std * rng.standard_normal(cfg.shape)
    f = float(rng.uniform(cfg.freq_lo, cfg.freq_hi))
    phi = float(rng.uniform(0.0, 2 * math.pi))
    t = np.arange(T) * cfg.sampling_period
    if cfg.mode == "amplitude":
        if label == 1:
            img[mask] += cfg.amplitude * np.sin(2 * math.pi * f * t + phi)
    else:
        d = 1.0 if label == 1 else -1.0
        kx = d * 2 * math.pi / cfg.wavelength * np.arange(X)
        wave = cfg.amplitude * np.sin(2 * math.pi * f * t[None, :] - kx[:, None] + phi)  # [X, T]
        ix = np.nonzero(mask)[0]
        img[mask] += wave[ix]
    return img.astype(np.float32)


@dataclass
class SynthReport:
    counts: dict[str, tuple[int, int]]
    region_variance: tuple[float, float]  # mean in-region temporal variance, class 0 / class 1
    expected_excess: float
    passed: bool

    def lines(self) -> list[str]:
        out = [f"split={s} controls={c0} asd={c1}" for s, (c0, c1) in self.counts.items()]
        v0, v1 = self.region_variance
        out.append(f"check=region_variance class0={v0:.6f} class1={v1:.6f} "
                   f"expected_excess={self.expected_excess:.6f} passed={int(self.passed)}")
        return out


def generate_synthetic(cfg: SynthConfig, out_dir) -> tuple[Manifest, SynthReport]:
    """Write ``manifest.tsv`` plus one T4DF file per subject into ``out_dir``.

    Subjects are generated split by split, alternating control/ASD, from a
    single :class:`Rng` stream, so the output is a pure function of ``cfg``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(cfg.seed)
    mask = region_mask(cfg.shape, cfg.region_fraction)
    entries = []
    var_sum, var_n = [0.0, 0.0], [0, 0]
    k = 0
    for split, n in cfg.per_split().items():
        for i in range(2 * n):
            label = i % 2
            img = synth_subject(cfg, label, rng, mask)
            sid = f"sub-{k:04d}"
            save_tensor(out / f"{sid}.t4df", wrap(img))
            entries.append(ManifestEntry(f"{sid}.t4df", sid, label, split))
            var_sum[label] += float(img[mask].astype(np.float64).var(axis=-1).mean())
            var_n[label] += 1
            k += 1
    manifest = Manifest(entries, cfg.shape, cfg.sampling_period, out)
    manifest.save(out / "manifest.tsv")
    v0, v1 = var_sum[0] / var_n[0], var_sum[1] / var_n[1]
    if cfg.mode == "amplitude":
        expected = cfg.amplitude ** 2 / 2
        passed = v1 - v0 >= cfg.margin * expected if expected > 0 else True
    else:
        # both classes carry the same signal power
        expected = 0.0
        passed = True
    return manifest, SynthReport(manifest.counts(), (v0, v1), expected, passed)
