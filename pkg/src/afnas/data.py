"""ECG windows: synthesis, augmentation, file I/O and proband-level splits.

The synthetic generator is a stand-in for a private clinical dataset. Beats are
sums of Gaussian bumps (P, Q, R, S, T) on two leads:

* NORMAL -- regular rhythm, RR jitter of about 1 % (never more than 3 %).
* AF     -- i.i.d. RR intervals (coefficient of variation around 0.25) and the
            P wave replaced by a 4-9 Hz fibrillatory oscillation.
* NOISE  -- an attenuated regular rhythm buried under band-limited artifact
            bursts and strong baseline wander.

Everything is a pure function of its arguments and an integer seed.
"""

from __future__ import annotations

import configparser
import csv
import enum
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, ParseError

__all__ = [
    "WINDOW_SECONDS",
    "DEFAULT_SAMPLE_RATE_HZ",
    "DESK_SAMPLE_RATE_HZ",
    "Label",
    "LabeledWindow",
    "DatasetSplit",
    "AugmentConfig",
    "synthesize_record",
    "synthesize_dataset",
    "bandlimited_noise",
    "resample_time",
    "augment",
    "window_label",
    "read_csv_record",
    "read_raw_record",
    "write_csv_record",
    "write_raw_record",
    "make_split",
    "rr_intervals",
    "rr_cv",
]

WINDOW_SECONDS = 120.0
DEFAULT_SAMPLE_RATE_HZ = 128.0
DESK_SAMPLE_RATE_HZ = 32.0


class Label(str, enum.Enum):
    AF = "AF"
    NORMAL = "NORMAL"
    NOISE = "NOISE"


@dataclass
class LabeledWindow:
    samples: np.ndarray  # (H, 2) millivolts
    sample_rate: float
    label: Label
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.label = Label(self.label)
        if self.samples.ndim != 2 or self.samples.shape[1] != 2:
            raise ContractError(f"window samples must be (H, 2), got {self.samples.shape}")
        if not self.sample_rate > 0:
            raise ContractError("sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ContractError("window contains non-finite samples")

    @property
    def length(self):
        return self.samples.shape[0]

    @property
    def canonical(self):
        return self.length == round(WINDOW_SECONDS * self.sample_rate)

    @property
    def is_af(self):
        return self.label is Label.AF


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def sources(self, part):
        return {w.source_id for w in getattr(self, part)}


@dataclass(frozen=True)
class AugmentConfig:
    noise_band: tuple = (25.0, 100.0)
    noise_amplitude_frac: float = 0.05
    baseline_shift_frac: float = 0.10
    amplitude_scale_frac: float = 0.20
    frequency_shift_frac: float = 0.10
    seed: int = 0

    def __post_init__(self):
        for name in ("noise_amplitude_frac", "baseline_shift_frac", "amplitude_scale_frac", "frequency_shift_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.noise_band
        if not 0 <= lo < hi:
            raise ContractError(f"bad noise band {self.noise_band}")

    @classmethod
    def identity(cls, seed=0):
        return cls(noise_amplitude_frac=0.0, baseline_shift_frac=0.0, amplitude_scale_frac=0.0,
                   frequency_shift_frac=0.0, seed=seed)


# --- synthesis ---------------------------------------------------------------

# (offset from R in s, width in s, lead-1 amplitude, lead-2 amplitude)
_QRS_T = (
    (-0.035, 0.012, -0.12, -0.06),
    (0.0, 0.018, 1.00, 0.65),
    (0.035, 0.014, -0.25, -0.15),
    (0.26, 0.045, 0.30, 0.22),
)
_P_WAVE = (-0.18, 0.025, 0.15, 0.10)
_CLASS_CODE = {Label.AF: 1, Label.NORMAL: 2, Label.NOISE: 3}


def _add_bumps(sig, fs, centers, width, amps):
    """Add Gaussian bumps at ``centers`` (seconds) to ``sig`` in place."""
    if len(centers) == 0:
        return
    half = max(1, int(math.ceil(4 * width * fs)))
    offs = np.arange(-half, half + 1)
    idx0 = np.rint(np.asarray(centers) * fs).astype(np.int64)
    idx = idx0[:, None] + offs[None, :]
    t = idx / fs - np.asarray(centers)[:, None]
    shape = np.exp(-0.5 * (t / width) ** 2)
    ok = (idx >= 0) & (idx < sig.shape[0])
    for lead, amp in enumerate(amps):
        np.add.at(sig[:, lead], idx[ok], (amp * shape)[ok])


def _beat_times(rng, label, duration):
    if label is Label.AF:
        mean_rr = rng.uniform(0.5, 0.85)
        rr = mean_rr * rng.uniform(0.55, 1.45, size=int(duration / (0.55 * mean_rr)) + 4)
    else:
        mean_rr = 60.0 / rng.uniform(55.0, 95.0)
        jitter = np.clip(rng.normal(0.0, 0.01, size=int(duration / (0.97 * mean_rr)) + 4), -0.03, 0.03)
        rr = mean_rr * (1.0 + jitter)
    t = rng.uniform(0.0, mean_rr) + np.concatenate([[0.0], np.cumsum(rr)])
    return t[t < duration + 0.5]


def bandlimited_noise(rng, n, fs, band, amplitude=1.0, channels=2):
    """Gaussian noise restricted to ``band`` Hz, scaled to peak ``amplitude``.

    The band is clipped at Nyquist; an empty band yields zeros.
    """
    lo, hi = band
    hi = min(hi, fs / 2.0)
    out = np.zeros((n, channels))
    if n < 2 or lo >= hi:
        return out
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    keep = (freqs >= lo) & (freqs <= hi)
    if not keep.any():
        return out
    for c in range(channels):
        spec = np.fft.rfft(rng.standard_normal(n))
        spec[~keep] = 0.0
        x = np.fft.irfft(spec, n)
        peak = np.max(np.abs(x))
        if peak > 0:
            out[:, c] = x / peak * amplitude
    return out


def _synth_window(rng, label, fs, n):
    duration = n / fs
    t = np.arange(n) / fs
    sig = np.zeros((n, 2))
    beats = _beat_times(rng, label, duration)
    for off, width, a1, a2 in _QRS_T:
        _add_bumps(sig, fs, beats + off, width, (a1, a2))
    if label is Label.AF:
        for _ in range(3):
            f = rng.uniform(4.0, 9.0)
            amp = rng.uniform(0.05, 0.10)
            ph = rng.uniform(0, 2 * np.pi, size=2)
            mod = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.05, 0.2) * t)[:, None]
            sig += amp * mod * np.sin(2 * np.pi * f * t[:, None] + ph[None, :])
    else:
        off, width, a1, a2 = _P_WAVE
        _add_bumps(sig, fs, beats + off, width, (a1, a2))
    wander_f = rng.uniform(0.15, 0.35)
    sig += 0.05 * np.sin(2 * np.pi * wander_f * t + rng.uniform(0, 2 * np.pi))[:, None]
    sig += rng.normal(0.0, 0.01, size=sig.shape)
    if label is Label.NOISE:
        sig *= 0.4
        band = (1.0, min(40.0, 0.45 * fs))
        covered = 0.0
        while covered < 0.7 * duration:
            length = rng.uniform(3.0, 15.0)
            start = rng.uniform(0.0, max(duration - length, 0.0))
            i0, i1 = int(start * fs), min(n, int((start + length) * fs))
            burst = bandlimited_noise(rng, i1 - i0, fs, band, rng.uniform(0.5, 2.0))
            sig[i0:i1] += burst * np.hanning(i1 - i0)[:, None] ** 0.25
            covered += length
        for _ in range(2):
            f = rng.uniform(0.1, 0.8)
            sig += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * f * t[:, None] + rng.uniform(0, 2 * np.pi, size=2))
    return sig


def synthesize_record(label, duration_s, sample_rate, seed, source_id=None):
    """Yield consecutive 120 s windows of a synthetic record of one class."""
    label = Label(label)
    if not sample_rate > 0 or not duration_s > 0:
        raise ContractError("sample rate and duration must be positive")
    n_windows = int(duration_s // WINDOW_SECONDS)
    if n_windows < 1:
        raise ContractError(f"duration {duration_s} s is shorter than one {WINDOW_SECONDS:g} s window")
    n = int(round(WINDOW_SECONDS * sample_rate))
    sid = source_id if source_id is not None else f"synth-{label.value}-{seed}"
    for i in range(n_windows):
        rng = np.random.default_rng([int(seed), _CLASS_CODE[label], i])
        yield LabeledWindow(_synth_window(rng, label, sample_rate, n), sample_rate, label, sid)


def synthesize_dataset(n_probands, windows_per_proband, sample_rate, seed,
                       class_fractions=(("AF", 0.4), ("NORMAL", 0.4), ("NOISE", 0.2))):
    """Windows for ``n_probands`` synthetic probands with a fixed class mix."""
    out = []
    for p in range(n_probands):
        sid = f"P{p:03d}"
        counts = _largest_remainder(windows_per_proband, [f for _, f in class_fractions])
        for (lab, _), cnt in zip(class_fractions, counts):
            if cnt == 0:
                continue
            rec_seed = int(np.random.SeedSequence([int(seed), p, _CLASS_CODE[Label(lab)]]).generate_state(1)[0])
            out.extend(synthesize_record(lab, cnt * WINDOW_SECONDS, sample_rate, rec_seed, sid))
    return out


def _largest_remainder(total, fracs):
    raw = [total * f / sum(fracs) for f in fracs]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (counts[i] - raw[i], i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def rr_intervals(window: LabeledWindow, lead=0):
    """RR intervals (s) from a simple R-peak detector on one lead."""
    from scipy.signal import find_peaks

    x = window.samples[:, lead]
    x = x - np.median(x)
    height = 0.5 * np.max(x)
    peaks, _ = find_peaks(x, height=height, distance=max(1, int(0.25 * window.sample_rate)))
    return np.diff(peaks) / window.sample_rate


def rr_cv(window: LabeledWindow, lead=0):
    rr = rr_intervals(window, lead)
    if rr.size < 2:
        return float("nan")
    return float(np.std(rr) / np.mean(rr))


# --- augmentation ------------------------------------------------------------


def resample_time(x, factor):
    """Read ``x`` at positions ``i * factor`` by linear interpolation.

    Positions past the end take the last sample, so the length is unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    pos = np.arange(n) * float(factor)
    grid = np.arange(n)
    return np.stack([np.interp(pos, grid, x[:, c]) for c in range(x.shape[1])], axis=1)


def augment(window: LabeledWindow, cfg: AugmentConfig, rng=None) -> LabeledWindow:
    """Random time stretch, gain, baseline offset and band-limited noise.

    ``rng`` overrides ``cfg.seed`` (the training loop passes its own stream).
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    x = window.samples
    fs = window.sample_rate
    factor = 1.0 + rng.uniform(-cfg.frequency_shift_frac, cfg.frequency_shift_frac)
    gain = 1.0 + rng.uniform(-cfg.amplitude_scale_frac, cfg.amplitude_scale_frac)
    shift_u = rng.uniform(-1.0, 1.0, size=x.shape[1])
    noise_u = rng.uniform(0.0, 1.0)
    noise_rng = np.random.default_rng(rng.integers(2**63))

    y = resample_time(x, factor) if cfg.frequency_shift_frac > 0 else x.copy()
    y = y * gain
    ptp = np.ptp(x, axis=0)
    y = y + shift_u * cfg.baseline_shift_frac * ptp
    if cfg.noise_amplitude_frac > 0:
        amp = noise_u * cfg.noise_amplitude_frac * ptp
        y = y + bandlimited_noise(noise_rng, y.shape[0], fs, cfg.noise_band, 1.0, y.shape[1]) * amp
    return LabeledWindow(y, fs, window.label, window.source_id)


# --- file formats ------------------------------------------------------------


def window_label(sample_labels, default=Label.NORMAL):
    """NOISE if at least half the samples are noise, else AF if any AF."""
    labs = [default if s is None else Label(s) for s in sample_labels]
    if not labs:
        return Label(default)
    noise = sum(1 for s in labs if s is Label.NOISE)
    if 2 * noise >= len(labs):
        return Label.NOISE
    if any(s is Label.AF for s in labs):
        return Label.AF
    return Label.NORMAL


def _windows_from(samples, labels, fs, source_id, default):
    n = int(round(WINDOW_SECONDS * fs))
    out = []
    for i in range(samples.shape[0] // n if n else 0):
        sl = slice(i * n, (i + 1) * n)
        lab = window_label(labels[sl], default) if labels is not None else Label(default)
        out.append(LabeledWindow(samples[sl], fs, lab, source_id))
    return out


def _is_float(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_csv_record(path, sample_rate_hz, source_id=None, default_label=Label.NORMAL):
    """Windows from a CSV of ``ch1,ch2[,...][,label]`` rows (header optional)."""
    if not sample_rate_hz > 0:
        raise ConfigError("sample_rate_hz must be positive")
    sid = source_id or os.path.splitext(os.path.basename(str(path)))[0]
    rows, labels = [], []
    label_col = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            row = [c.strip() for c in row]
            if not row or all(c == "" for c in row):
                continue
            if lineno == 1 and not _is_float(row[0]):
                names = [c.lower() for c in row]
                label_col = names.index("label") if "label" in names else None
                continue
            lab = None
            if label_col is not None:
                if label_col >= len(row):
                    raise ParseError("missing label column", line=lineno)
                lab = row[label_col]
                vals = row[:label_col] + row[label_col + 1 :]
            elif not _is_float(row[-1]):
                lab, vals = row[-1], row[:-1]
            else:
                vals = row
            if len(vals) < 2:
                raise ParseError(f"expected at least 2 channel columns, got {len(vals)}", line=lineno)
            try:
                rows.append((float(vals[0]), float(vals[1])))
            except ValueError:
                raise ParseError("non-numeric channel value", line=lineno) from None
            if lab is not None:
                try:
                    lab = Label(lab.upper())
                except ValueError:
                    raise ParseError(f"unknown label {lab!r}", line=lineno) from None
            labels.append(lab)
    samples = np.array(rows, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(samples)):
        raise ParseError("non-finite channel value")
    has_labels = any(lab is not None for lab in labels)
    return _windows_from(samples, labels if has_labels else None, float(sample_rate_hz), sid, default_label)


def _read_meta(meta):
    if isinstance(meta, dict):
        return {str(k): str(v) for k, v in meta.items()}
    if meta is None or not os.path.exists(meta):
        raise ConfigError(f"metadata file not found: {meta}")
    parser = configparser.ConfigParser(interpolation=None)
    with open(meta) as fh:
        parser.read_string("[meta]\n" + fh.read())
    return dict(parser["meta"])


def _parse_intervals(text):
    out = []
    for item in filter(None, (s.strip() for s in str(text).split(","))):
        try:
            start, end, lab = item.split(":")
            out.append((float(start), float(end), Label(lab.strip().upper())))
        except ValueError:
            raise ConfigError(f"bad label interval {item!r}; expected start:end:LABEL") from None
    return out


def read_raw_record(path, meta=None, source_id=None, default_label=Label.NORMAL):
    """Windows from interleaved little-endian int16 samples plus a sidecar.

    ``meta`` is a dict or a path (default ``<path>.meta``) with keys
    ``sample_rate_hz``, ``gain_uv_per_lsb``, optional ``channels`` (default 2)
    and optional ``labels`` as ``start:end:LABEL`` intervals in seconds.
    """
    meta = _read_meta(meta if meta is not None else f"{path}.meta")
    try:
        fs = float(meta["sample_rate_hz"])
        gain = float(meta["gain_uv_per_lsb"])
    except KeyError as e:
        raise ConfigError(f"metadata is missing key {e.args[0]!r}") from None
    channels = int(meta.get("channels", 2))
    if fs <= 0 or channels < 2:
        raise ConfigError("metadata needs sample_rate_hz > 0 and channels >= 2")
    raw = open(path, "rb").read()
    frame = 2 * channels
    if len(raw) % frame:
        raise ParseError("truncated sample frame", offset=len(raw) - len(raw) % frame)
    data = np.frombuffer(raw, dtype="<i2").reshape(-1, channels)[:, :2]
    samples = data.astype(np.float64) * gain / 1000.0
    labels = None
    if "labels" in meta and meta["labels"].strip():
        labels = [None] * samples.shape[0]
        for start, end, lab in _parse_intervals(meta["labels"]):
            for i in range(max(0, int(round(start * fs))), min(samples.shape[0], int(round(end * fs)))):
                labels[i] = lab
    sid = source_id or os.path.splitext(os.path.basename(str(path)))[0]
    return _windows_from(samples, labels, fs, sid, default_label)


def write_csv_record(path, windows):
    """Concatenate windows into one CSV with a ``ch1,ch2,label`` header."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ch1", "ch2", "label"])
        for win in windows:
            for a, b in win.samples:
                w.writerow([repr(float(a)), repr(float(b)), win.label.value])


def write_raw_record(path, windows, gain_uv_per_lsb=1.0):
    """Write int16 samples plus ``<path>.meta``; values saturate at int16."""
    windows = list(windows)
    if not windows:
        raise ContractError("no windows to write")
    fs = windows[0].sample_rate
    data = np.concatenate([w.samples for w in windows]) * 1000.0 / gain_uv_per_lsb
    codes = np.clip(np.rint(data), -32768, 32767).astype("<i2")
    with open(path, "wb") as fh:
        fh.write(codes.tobytes())
    intervals, t = [], 0.0
    for w in windows:
        dur = w.length / fs
        intervals.append(f"{t:g}:{t + dur:g}:{w.label.value}")
        t += dur
    with open(f"{path}.meta", "w") as fh:
        fh.write(f"sample_rate_hz = {fs:g}\n")
        fh.write(f"gain_uv_per_lsb = {gain_uv_per_lsb:g}\n")
        fh.write("channels = 2\n")
        fh.write(f"labels = {','.join(intervals)}\n")


# --- splitting ---------------------------------------------------------------


def make_split(records, seed, fractions=(0.70, 0.15, 0.15)) -> DatasetSplit:
    """Partition windows by proband so no ``source_id`` spans two parts.

    Probands are shuffled by ``seed`` and assigned largest-first to the part
    with the largest remaining deficit in window count.
    """
    groups = OrderedDict()
    for w in records:
        groups.setdefault(w.source_id, []).append(w)
    if len(groups) < 3:
        raise ContractError(f"need at least 3 distinct probands, got {len(groups)}")
    ids = sorted(groups)
    rng = np.random.default_rng(seed)
    ids = [ids[i] for i in rng.permutation(len(ids))]
    ids.sort(key=lambda s: -len(groups[s]))  # stable: shuffled order breaks ties
    total = sum(len(g) for g in groups.values())
    targets = [f * total for f in fractions]
    sizes = [0, 0, 0]
    parts = [[], [], []]
    for sid in ids:
        j = max(range(3), key=lambda k: (targets[k] - sizes[k], -k))
        parts[j].append(sid)
        sizes[j] += len(groups[sid])
    for j in range(3):
        if not parts[j]:
            donor = max(range(3), key=lambda k: len(parts[k]))
            smallest = min(parts[donor], key=lambda s: len(groups[s]))
            parts[donor].remove(smallest)
            parts[j].append(smallest)
    out = [[w for sid in sorted(p, key=ids.index) for w in groups[sid]] for p in parts]
    return DatasetSplit(*out)
