"""Request traces: arrival processes, length distributions, and trace files."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, FileError
from .types import US_PER_S, Request

TRACE_HEADER = ["arrival_us", "model_id", "prompt_len", "output_len"]


# ---- arrival processes -----------------------------------------------------
@dataclass(frozen=True)
class Poisson:
    rate: float  # requests per second


@dataclass(frozen=True)
class BurstyFile:
    """Unitless inter-arrival gaps (mean 1) stretched to ``rate`` requests/s."""

    path: str
    rate: float


@dataclass(frozen=True)
class Piecewise:
    """Poisson arrivals whose rate changes in steps: ``((rate, duration_s), ...)``."""

    segments: tuple


@dataclass(frozen=True)
class Closed:
    concurrency: int


# ---- length distributions ----------------------------------------------------
@dataclass(frozen=True)
class Fixed:
    prompt: int
    output: int


@dataclass(frozen=True)
class Lognormal:
    """Independent lognormal prompt and output lengths with the given means."""

    prompt_mean: float
    output_mean: float
    sigma: float = 0.4


@dataclass(frozen=True)
class Histogram:
    prompt_path: str
    output_path: str


# Synthetic fits; the dataset means are approximations, not shipped data.
LENGTH_PRESETS = {
    "synthetic-long": Lognormal(1334, 400, 0.4),
    "synthetic-short": Lognormal(434, 200, 0.4),
    "sharegpt": Lognormal(161, 338, 0.9),
    "alpaca": Lognormal(19.3, 58.5, 0.6),
}


@dataclass(frozen=True)
class ModelWorkload:
    model_id: str
    arrival: object
    lengths: object
    n_requests: int | None = None
    start_s: float = 0.0
    max_seq_len: int = 4096


@dataclass(frozen=True)
class TraceSpec:
    models: tuple
    duration_s: float = 60.0
    seed: int = 0

    def __post_init__(self):
        for w in self.models:
            a = w.arrival
            if isinstance(a, (Poisson, BurstyFile)) and a.rate <= 0:
                raise ConfigError(f"{w.model_id}: arrival rate must be > 0")
            if isinstance(a, Piecewise) and (
                    not any(r > 0 for r, _ in a.segments)
                    or any(r < 0 or d <= 0 for r, d in a.segments)):
                raise ConfigError(f"{w.model_id}: piecewise segments need rate >= 0, "
                                  "duration > 0 and at least one positive rate")
            if isinstance(a, Closed) and a.concurrency < 1:
                raise ConfigError(f"{w.model_id}: concurrency must be >= 1")


@dataclass
class Trace:
    requests: list
    spec: TraceSpec | None = None
    closed_loop: dict = field(default_factory=dict)

    @property
    def seed(self):
        return self.spec.seed if self.spec else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in self.requests:
            w.writerow([r.arrival_time, r.model_id, r.prompt_len, r.output_len])
        return buf.getvalue()

    @property
    def sha256(self) -> str:
        h = hashlib.sha256(self.to_csv().encode())
        if self.closed_loop:
            h.update(repr(sorted(self.closed_loop.items())).encode())
        return h.hexdigest()


# ---- file formats --------------------------------------------------------------
def read_histogram(path) -> tuple[np.ndarray, np.ndarray]:
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        lengths = np.array([int(r["length"]) for r in rows])
        probs = np.array([float(r["probability"]) for r in rows])
    except (OSError, KeyError, ValueError) as e:
        raise FileError(f"cannot read histogram {path}: {e}") from None
    if abs(probs.sum() - 1) > 1e-9 or (probs < 0).any() or (lengths < 1).any():
        raise ConfigError(f"histogram {path} must have lengths >= 1 and probabilities summing to 1")
    return lengths, probs


def write_histogram(path, lengths, probs):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["length", "probability"])
        w.writerows(zip(lengths, probs))


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("remapsim") / "data" / name))


def read_gaps(path) -> np.ndarray:
    p = Path(path)
    if not p.exists() and not p.is_absolute():
        p = bundled_path(str(path))
    try:
        with open(p, newline="") as f:
            rows = list(csv.reader(f))
        vals = [float(r[0]) for r in rows if r and not r[0].startswith("#") and r[0] != "gap"]
    except (OSError, ValueError) as e:
        raise FileError(f"cannot read inter-arrival file {path}: {e}") from None
    gaps = np.array(vals)
    if len(gaps) == 0 or (gaps < 0).any() or gaps.sum() <= 0:
        raise FileError(f"inter-arrival file {path} has no usable gaps")
    return gaps / gaps.mean()


def write_trace(path, trace: Trace):
    Path(path).write_text(trace.to_csv())


def read_trace(path) -> Trace:
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise FileError(f"cannot read trace {path}: {e}") from None
    if rows and set(TRACE_HEADER) - set(rows[0]):
        raise FileError(f"trace {path} must have header {','.join(TRACE_HEADER)}")
    try:
        reqs = [Request(i, r["model_id"], int(r["arrival_us"]), int(r["prompt_len"]),
                        int(r["output_len"])) for i, r in enumerate(rows)]
    except ValueError as e:
        raise FileError(f"malformed trace {path}: {e}") from None
    if any(a.arrival_time > b.arrival_time for a, b in zip(reqs, reqs[1:])):
        raise FileError(f"trace {path} arrivals are not sorted")
    return Trace(reqs)


# ---- generation -------------------------------------------------------------------
def mmpp_gaps(n: int, seed: int = 0, high_rate: float = 8.0, low_rate: float = 0.8,
              mean_high_s: float = 4.0, mean_low_s: float = 8.0) -> np.ndarray:
    """Inter-arrival gaps of a two-state Markov-modulated Poisson process, normalized to mean 1."""
    rng = np.random.default_rng(seed)
    gaps, t, last = [], 0.0, 0.0
    state = 0
    while len(gaps) < n:
        rate, mean_stay = (high_rate, mean_high_s) if state == 0 else (low_rate, mean_low_s)
        end = t + rng.exponential(mean_stay)
        while True:
            t += rng.exponential(1 / rate)
            if t > end:
                t = end
                break
            gaps.append(t - last)
            last = t
        state ^= 1
    g = np.array(gaps[:n])
    return g / g.mean()


def cv(values) -> float:
    v = np.asarray(values, dtype=float)
    return float(v.std() / v.mean())


def _sample_lengths(dist, n: int, rng: np.random.Generator, max_seq_len: int):
    if isinstance(dist, str):
        try:
            dist = LENGTH_PRESETS[dist]
        except KeyError:
            raise ConfigError(f"unknown length preset {dist!r}") from None
    if isinstance(dist, Fixed):
        p = np.full(n, dist.prompt)
        o = np.full(n, dist.output)
    elif isinstance(dist, Lognormal):
        s = dist.sigma
        p = np.rint(rng.lognormal(math.log(dist.prompt_mean) - s * s / 2, s, n))
        o = np.rint(rng.lognormal(math.log(dist.output_mean) - s * s / 2, s, n))
    elif isinstance(dist, Histogram):
        pl, pp = read_histogram(dist.prompt_path)
        ol, op = read_histogram(dist.output_path)
        p = rng.choice(pl, size=n, p=pp)
        o = rng.choice(ol, size=n, p=op)
    else:
        raise ConfigError(f"unsupported length distribution {dist!r}")
    p = np.clip(p, 1, max_seq_len - 1).astype(int)
    o = np.clip(o, 1, None).astype(int)
    o = np.minimum(o, max_seq_len - p)
    return p, o


def _arrivals(w: ModelWorkload, duration_s: float, rng: np.random.Generator):
    a = w.arrival
    start = round(w.start_s * US_PER_S)
    if isinstance(a, Poisson):
        n = w.n_requests if w.n_requests is not None else round(a.rate * duration_s)
        span = n / a.rate if w.n_requests is not None else duration_s
        t = np.sort(rng.uniform(0, span * US_PER_S, n))
        return start + np.floor(t).astype(np.int64)
    if isinstance(a, BurstyFile):
        gaps = read_gaps(a.path)
        n = w.n_requests if w.n_requests is not None else round(a.rate * duration_s)
        off = int(rng.integers(len(gaps)))
        idx = (off + np.arange(n)) % len(gaps)
        t = np.cumsum(gaps[idx] * (US_PER_S / a.rate))
        return start + np.floor(t).astype(np.int64)
    if isinstance(a, Piecewise):
        parts, t0 = [], 0.0
        for rate, dur in a.segments:
            n = round(rate * dur)
            parts.append(np.sort(rng.uniform(t0, t0 + dur, n)) * US_PER_S)
            t0 += dur
        return start + np.floor(np.concatenate(parts)).astype(np.int64)
    if isinstance(a, Closed):
        n = w.n_requests if w.n_requests is not None else a.concurrency
        return np.full(n, start, dtype=np.int64)
    raise ConfigError(f"unsupported arrival process {a!r}")


def build_trace(spec: TraceSpec) -> Trace:
    """Deterministic trace for ``spec``; each model draws from its own seeded streams."""
    root = np.random.SeedSequence(spec.seed)
    pending = []
    closed = {}
    for k, (w, child) in enumerate(zip(spec.models, root.spawn(len(spec.models)))):
        len_ss, arr_ss = child.spawn(2)
        times = _arrivals(w, spec.duration_s, np.random.default_rng(arr_ss))
        p, o = _sample_lengths(w.lengths, len(times), np.random.default_rng(len_ss), w.max_seq_len)
        pending.extend((int(t), k, i, w.model_id, int(pi), int(oi))
                       for i, (t, pi, oi) in enumerate(zip(times, p, o)))
        if isinstance(w.arrival, Closed):
            closed[w.model_id] = w.arrival.concurrency
    pending.sort()
    reqs = [Request(rid, m, t, pi, oi) for rid, (t, _, _, m, pi, oi) in enumerate(pending)]
    return Trace(reqs, spec, closed)


def replay(trace: Trace):
    """Arrival events in time order (ties keep trace order)."""
    yield from sorted(trace.requests, key=lambda r: (r.arrival_time, r.request_id))


def rescale(trace: Trace, factor: float) -> Trace:
    """Compress the time axis by ``factor`` (2 doubles the arrival rate)."""
    if factor <= 0:
        raise ConfigError("scale factor must be > 0")
    reqs = [Request(r.request_id, r.model_id, int(r.arrival_time // factor), r.prompt_len,
                    r.output_len) for r in trace.requests]
    return Trace(reqs, trace.spec, dict(trace.closed_loop))
