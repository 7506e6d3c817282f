"""Window assembly and the amplitude preprocessing chain.

frames -> 256 x T amplitude matrix -> drop pilot/null tones (234 x T)
-> causal moving average -> per-image min-max scaling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from ..errors import ConfigurationError, DataError, ParameterError
from ..labels import check_labels
from .pcap import N_SUBCARRIERS, CsiFrame

WINDOW = 300
KEPT_SUBCARRIERS = 234
DEFAULT_MA_WINDOW = 5

# VHT-80 tone plan in fft-shifted order (index 128 is DC):
# edge guards -128..-123 and +123..+127, DC and its neighbours, pilots at +-11, +-39, +-75, +-103.
VHT80_NULLS = (0, 1, 2, 3, 4, 5, 127, 128, 129, 251, 252, 253, 254, 255)
VHT80_PILOTS = (25, 53, 89, 117, 139, 167, 203, 231)


@dataclass(frozen=True)
class CsiMatrix:
    amplitudes: np.ndarray
    start_us: int = 0
    end_us: int = 0

    def __post_init__(self):
        a = self.amplitudes
        if a.ndim != 2 or a.shape[0] != N_SUBCARRIERS:
            raise DataError(f"CSI matrix must have {N_SUBCARRIERS} rows, got shape {a.shape}")
        if a.size and a.min() < 0:
            raise DataError("amplitudes must be nonnegative")

    @property
    def shape(self) -> tuple:
        return self.amplitudes.shape


@dataclass(frozen=True)
class SubcarrierMask:
    nulls: tuple = VHT80_NULLS
    pilots: tuple = VHT80_PILOTS
    n_tones: int = N_SUBCARRIERS

    def __post_init__(self):
        nulls, pilots = set(self.nulls), set(self.pilots)
        if len(nulls) != 14 or len(pilots) != 8:
            raise ConfigurationError(f"mask needs 14 null and 8 pilot tones, got {len(nulls)} and {len(pilots)}")
        if nulls & pilots:
            raise ConfigurationError(f"null and pilot tones overlap: {sorted(nulls & pilots)}")
        if not all(0 <= i < self.n_tones for i in nulls | pilots):
            raise ConfigurationError(f"mask index outside 0..{self.n_tones - 1}")
        if self.n_tones - len(nulls) - len(pilots) != KEPT_SUBCARRIERS:
            raise ConfigurationError(f"mask must keep {KEPT_SUBCARRIERS} tones")

    @property
    def keep(self) -> np.ndarray:
        drop = set(self.nulls) | set(self.pilots)
        return np.array([i for i in range(self.n_tones) if i not in drop], dtype=np.intp)

    @classmethod
    def from_file(cls, path) -> "SubcarrierMask":
        raw = json.loads(Path(path).read_text())
        try:
            return cls(tuple(raw["nulls"]), tuple(raw["pilots"]))
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"mask file {path} needs 'nulls' and 'pilots' lists") from exc


@dataclass
class AssemblyStats:
    frames: int = 0
    windows: int = 0
    dropped_frames: int = 0


def amplitude_column(frame: CsiFrame) -> np.ndarray:
    return np.abs(frame.csi.astype(np.complex128))


def assemble_matrix(frames: Iterable[CsiFrame], window: int = WINDOW,
                    stats: Optional[AssemblyStats] = None) -> Iterator[CsiMatrix]:
    """Group consecutive frames into non-overlapping ``window``-packet amplitude matrices.

    A partial window left at the end of the stream is discarded and its frames
    are counted in ``stats.dropped_frames``.
    """
    if window < 1:
        raise ParameterError(f"window must be >= 1, got {window}")
    stats = stats if stats is not None else AssemblyStats()
    columns: list[np.ndarray] = []
    start = 0
    for frame in frames:
        stats.frames += 1
        if not columns:
            start = frame.timestamp_us
        columns.append(amplitude_column(frame))
        if len(columns) == window:
            stats.windows += 1
            yield CsiMatrix(np.stack(columns, axis=1), start, frame.timestamp_us)
            columns = []
    stats.dropped_frames += len(columns)


def filter_subcarriers(m, mask: Optional[SubcarrierMask] = None) -> np.ndarray:
    """Remove pilot and null rows, keeping the order of the rest."""
    mask = mask or SubcarrierMask()
    a = m.amplitudes if isinstance(m, CsiMatrix) else np.asarray(m)
    if a.ndim != 2 or a.shape[0] != mask.n_tones:
        raise ConfigurationError(f"mask covers {mask.n_tones} tones but matrix has shape {a.shape}")
    return a[mask.keep]


def moving_average(m: np.ndarray, w: int = DEFAULT_MA_WINDOW) -> np.ndarray:
    """Trailing mean along the time axis: column t averages columns max(0, t-w+1)..t."""
    if w < 1:
        raise ParameterError(f"moving-average window must be >= 1, got {w}")
    a = np.asarray(m, dtype=np.float64)
    if w == 1:
        return a.copy()
    c = np.cumsum(a, axis=-1)
    out = c.copy()
    out[..., w:] -= c[..., :-w]
    counts = np.minimum(np.arange(1, a.shape[-1] + 1), w)
    return out / counts


@dataclass
class RadioImage:
    values: np.ndarray
    rod_label: Optional[int] = None
    har_label: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != KEPT_SUBCARRIERS:
            raise DataError(f"radio image must have {KEPT_SUBCARRIERS} rows, got shape {v.shape}")
        if v.size and (v.min() < 0 or v.max() > 1):
            raise DataError("radio image values must lie in [0, 1]")
        check_labels(self.rod_label, self.har_label)

    @property
    def shape(self) -> tuple:
        return self.values.shape


def normalize(m: np.ndarray) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if not np.isfinite(a).all():
        raise DataError("matrix contains NaN or Inf")
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.float32)
    return ((a - lo) / (hi - lo)).astype(np.float32)


def to_radio_image(m: np.ndarray, rod_label: Optional[int] = None, har_label: Optional[int] = None,
                   meta: Optional[dict] = None) -> RadioImage:
    """Per-image min-max scaling to [0, 1]; a constant matrix maps to zeros."""
    return RadioImage(normalize(m), rod_label, har_label, dict(meta or {}))


def preprocess(m, mask: Optional[SubcarrierMask] = None, ma_window: int = DEFAULT_MA_WINDOW) -> np.ndarray:
    """Full chain from a 256 x T amplitude matrix to a normalized 234 x T float32 array."""
    return normalize(moving_average(filter_subcarriers(m, mask), ma_window))


def frames_to_images(frames: Iterable[CsiFrame], window: int = WINDOW, mask: Optional[SubcarrierMask] = None,
                     ma_window: int = DEFAULT_MA_WINDOW, stats: Optional[AssemblyStats] = None,
                     labels: Sequence = (None, None)) -> Iterator[RadioImage]:
    for matrix in assemble_matrix(frames, window, stats):
        meta = {"start_us": matrix.start_us, "end_us": matrix.end_us}
        yield RadioImage(preprocess(matrix, mask, ma_window), labels[0], labels[1], meta)
