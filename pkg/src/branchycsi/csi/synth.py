"""Synthetic CSI for desk-scale experiments.

A fixed room is modelled as a handful of static propagation paths. Each
occupant adds a reflected path whose length follows the activity (breathing
micro-motion for sitting, sway for standing, a back-and-forth walk, a posture
transition for standing up / sitting down) and shadows one static path: the
first occupant the line of sight, the second a wall reflection. The channel
frequency response over the 256 VHT-80 tones is evaluated per packet,
perturbed by gain jitter and receiver noise, and quantized to int16 like the
radio's reports, so the same samples can be emitted as pcap captures.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from ..errors import ParameterError
from ..labels import HAR_CLASSES, ROD_CLASSES, check_labels
from .pcap import N_SUBCARRIERS, CsiFrame
from .preprocess import DEFAULT_MA_WINDOW, VHT80_NULLS, WINDOW, RadioImage, SubcarrierMask, preprocess

GENERATOR_VERSION = "synth-v1"
SAMPLE_RATE_HZ = 100.0
CENTER_HZ = 5.21e9          # channel 42: the 80 MHz block holding primary channel 36
TONE_SPACING_HZ = 312.5e3
LIGHT_SPEED = 299_792_458.0
ROOM_SEED = 36
FULL_SCALE = 900.0          # mean static amplitude in int16 units

TONES = np.arange(-N_SUBCARRIERS // 2, N_SUBCARRIERS // 2)
FREQS = CENTER_HZ + TONES * TONE_SPACING_HZ

# per-posture reflection strength and shadowing of the blocked static path
_POSTURE = {"sit": (0.08, 0.25), "stand": (0.20, 0.60)}
# shadowing a second occupant casts on the line of sight and on the strongest wall path
_SECOND_SHADOW = (0.15, 0.7)
_DEFAULT_SOURCE = bytes.fromhex("a0b1c2d3e4f5")


@dataclass(frozen=True)
class Scenario:
    rod_label: int
    har_label: Optional[int] = None

    def __post_init__(self):
        try:
            check_labels(self.rod_label, self.har_label)
        except ValueError as exc:
            raise ParameterError(str(exc)) from None
        if self.rod_label is None:
            raise ParameterError("scenario needs a rod_label")

    @property
    def name(self) -> str:
        rod = ROD_CLASSES[self.rod_label]
        return rod if self.har_label is None else f"{rod}/{HAR_CLASSES[self.har_label]}"


SCENARIOS = (
    Scenario(0),
    *(Scenario(1, h) for h in range(len(HAR_CLASSES))),
    Scenario(2),
)


def _room(seed: int = ROOM_SEED):
    rng = np.random.default_rng(seed)
    delays = np.concatenate([[12e-9], np.sort(rng.uniform(18e-9, 70e-9, 5))])
    gains = np.concatenate([[1.0, 0.75], rng.uniform(0.3, 0.6, 4) * np.exp(-np.arange(4) / 4)])
    phases = rng.uniform(0, 2 * np.pi, 6)
    return delays, gains, phases


_ROOM = _room()
_EDGE_ROLLOFF = 1.0 - 0.3 * (np.abs(TONES) / 128.0) ** 4
_NULL_GAIN = np.ones(N_SUBCARRIERS)
_NULL_GAIN[list(VHT80_NULLS)] = 0.03


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _colored(rng, n, width=20):
    """Roughly unit-variance low-pass noise: slow, band-limited fluctuation."""
    taps = np.hanning(width + 2)[1:-1]
    taps /= np.sqrt(np.sum(taps * taps))
    return np.convolve(rng.normal(size=n + width - 1), taps, mode="valid")


def _occupant(activity: str, rng, t: np.ndarray):
    """Reflection amplitude, extra path length (m) and shadowing over time."""
    n = t.size
    base_len = rng.uniform(4.0, 9.0)
    if activity in ("sit", "stand"):
        rho, block = _POSTURE[activity]
        rho, block = np.full(n, rho), np.full(n, block)
        if activity == "sit":
            motion = 0.004 * np.sin(2 * np.pi * rng.uniform(0.2, 0.33) * t + rng.uniform(0, 2 * np.pi))
        else:
            motion = 0.012 * np.sin(2 * np.pi * rng.uniform(0.3, 0.6) * t + rng.uniform(0, 2 * np.pi))
    elif activity == "walk":
        speed = rng.uniform(0.3, 0.6)
        span = rng.uniform(0.8, 1.4)
        travel = (speed * t + rng.uniform(0, span)) % (2 * span)
        motion = np.where(travel < span, travel, 2 * span - travel)
        gait = np.sin(2 * np.pi * rng.uniform(1.6, 2.0) * t + rng.uniform(0, 2 * np.pi))
        rho = 0.2 + 0.05 * gait
        block = 0.40 + 0.15 * np.cos(np.pi * motion / span)
    elif activity in ("stand_up", "sit_down"):
        start = rng.uniform(0.35, 0.6) * t[-1]
        duration = rng.uniform(0.9, 1.4)
        s = _smoothstep((t - start) / duration)
        if activity == "sit_down":
            s = 1.0 - s
        (r0, b0), (r1, b1) = _POSTURE["sit"], _POSTURE["stand"]
        rho = r0 + (r1 - r0) * s
        block = b0 + (b1 - b0) * s
        lean = rng.uniform(0.25, 0.4)
        motion = lean * (s if activity == "stand_up" else 1.0 - s)
        motion = motion + 0.004 * np.sin(2 * np.pi * 0.25 * t)
    else:
        raise ParameterError(f"unknown activity {activity!r}")
    rho = rho * (1.0 + 0.08 * _colored(rng, n))
    return rho, base_len + motion, block


def synth_window(scenario: Scenario, rng: np.random.Generator, n_packets: int = WINDOW) -> np.ndarray:
    """Complex CSI (256 x n_packets, fft-shifted tone order, int16-valued) for one scenario."""
    if n_packets < 1:
        raise ParameterError(f"n_packets must be >= 1, got {n_packets}")
    t = np.arange(n_packets) / SAMPLE_RATE_HZ
    delays, gains, phases = _ROOM
    gains = gains * rng.uniform(0.97, 1.03, gains.size)
    phases = phases + rng.normal(0.0, 0.05, phases.size)
    static = np.exp(-2j * np.pi * np.outer(FREQS, delays) + 1j * phases)      # tones x paths

    shadow = np.ones((gains.size, n_packets))
    dynamic = np.zeros((N_SUBCARRIERS, n_packets), dtype=np.complex128)
    if scenario.rod_label == 1:
        occupants = [HAR_CLASSES[scenario.har_label] if scenario.har_label is not None
                     else str(rng.choice(HAR_CLASSES))]
    elif scenario.rod_label == 2:
        occupants = [str(rng.choice(("sit", "stand", "walk"))) for _ in range(2)]
    else:
        occupants = []
    for k, activity in enumerate(occupants):
        rho, length, block = _occupant(activity, rng, t)
        if k == 0:
            shadow[0] *= 1.0 - block
        else:
            shadow[0] *= 1.0 - _SECOND_SHADOW[0]
            shadow[1] *= 1.0 - _SECOND_SHADOW[1] * block / _POSTURE["stand"][1]
        phase = -2j * np.pi * np.outer(FREQS, length / LIGHT_SPEED) + 1j * rng.uniform(0, 2 * np.pi)
        dynamic += rho * np.exp(phase)

    h = static @ (gains[:, None] * shadow) + dynamic
    h *= (_EDGE_ROLLOFF * _NULL_GAIN)[:, None]
    agc = 1.0 + 0.01 * rng.normal(size=n_packets)
    sigma = 0.012 * (1.0 + 0.5 * len(occupants))
    noise = rng.normal(0.0, sigma, h.shape) + 1j * rng.normal(0.0, sigma, h.shape)
    h = (h * agc + noise) * FULL_SCALE
    return np.rint(h.real) + 1j * np.rint(h.imag)


def _sample_seed(seed: int, scenario: Scenario, index: int) -> np.random.Generator:
    har = -1 if scenario.har_label is None else scenario.har_label
    return np.random.default_rng(np.random.SeedSequence([seed, scenario.rod_label, har + 1, index]))


def synth_generate(scenario, seed: int, count: int, window: int = WINDOW,
                   mask: Optional[SubcarrierMask] = None, ma_window: int = DEFAULT_MA_WINDOW) -> list[RadioImage]:
    """``count`` preprocessed radio images of one scenario; deterministic per seed."""
    if not isinstance(scenario, Scenario):
        scenario = Scenario(*scenario)
    if count < 0:
        raise ParameterError(f"count must be >= 0, got {count}")
    images = []
    for i in range(count):
        raw = synth_window(scenario, _sample_seed(seed, scenario, i), window)
        meta = {"generator": GENERATOR_VERSION, "seed": seed, "index": i, "scenario": scenario.name}
        images.append(RadioImage(preprocess(np.abs(raw), mask, ma_window),
                                 scenario.rod_label, scenario.har_label, meta))
    return images


def label_schedule(count: int) -> list[Scenario]:
    """Scenario per sample for a mixed dataset: occupancy 1:2:1, activities balanced."""
    cycle = []
    for h in range(len(HAR_CLASSES)):
        cycle += [Scenario(0), Scenario(1, h), Scenario(2), Scenario(1, (h + 2) % len(HAR_CLASSES))]
    return [cycle[i % len(cycle)] for i in range(count)]


def synth_dataset(count: int, seed: int, window: int = WINDOW, mask: Optional[SubcarrierMask] = None,
                  ma_window: int = DEFAULT_MA_WINDOW) -> list[RadioImage]:
    if count < 0:
        raise ParameterError(f"count must be >= 0, got {count}")
    images = []
    for i, scenario in enumerate(label_schedule(count)):
        raw = synth_window(scenario, _sample_seed(seed, scenario, i), window)
        meta = {"generator": GENERATOR_VERSION, "seed": seed, "index": i, "scenario": scenario.name}
        images.append(RadioImage(preprocess(np.abs(raw), mask, ma_window),
                                 scenario.rod_label, scenario.har_label, meta))
    return images


def synth_capture(segments: Sequence[tuple], seed: int, start_us: int = 1_600_000_000_000_000,
                  source: bytes = _DEFAULT_SOURCE, chanspec: int = 0xE02A) -> list[CsiFrame]:
    """Frames for a scripted timeline of ``(scenario, n_packets)`` segments at 100 Hz."""
    frames = []
    period_us = int(round(1e6 / SAMPLE_RATE_HZ))
    seq = 0
    for k, (scenario, n) in enumerate(segments):
        if not isinstance(scenario, Scenario):
            scenario = Scenario(*scenario)
        raw = synth_window(scenario, _sample_seed(seed, scenario, 1_000_000 + k), n)
        csi = raw.astype(np.complex64)
        level = np.mean(np.abs(raw)) / FULL_SCALE
        rssi = int(np.clip(-50 + 20 * np.log10(max(level, 1e-3)), -100, 0))
        for j in range(n):
            frames.append(CsiFrame(start_us + seq * period_us, source, seq & 0xFFFF, rssi, chanspec,
                                   np.ascontiguousarray(csi[:, j]), 0x08, 0, 0x4345))
            seq += 1
    return frames


def timeline_labels(segments: Iterable[tuple]) -> list[Scenario]:
    """Per-frame scenario labels of a capture timeline."""
    out = []
    for scenario, n in segments:
        out += [scenario if isinstance(scenario, Scenario) else Scenario(*scenario)] * n
    return out
