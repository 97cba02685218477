"""Time-tag streams and the integer-picosecond processing chain.

Every timestamp here is an ``int64`` count of picoseconds; no float time
arithmetic happens in this module.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"QNTTAGS\x00"
FORMAT_VERSION = 1
RECORD_DTYPE = np.dtype([("channel", "<u2"), ("timestamp", "<i8")])


class TagFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TimeTags:
    """Interleaved multi-channel tag record sorted by timestamp.

    ``channel_map`` is only set on merged streams and records, per source
    (``"a"``/``"b"``), how original channel ids were renumbered.
    """

    channels: np.ndarray
    times: np.ndarray
    site: str = ""
    channel_map: dict = field(default_factory=dict)

    def __post_init__(self):
        ch = np.ascontiguousarray(self.channels, dtype=np.uint16)
        t = np.ascontiguousarray(self.times, dtype=np.int64)
        if ch.shape != t.shape or t.ndim != 1:
            raise ValueError("channels and times must be 1-D arrays of equal length")
        if t.size > 1 and np.any(np.diff(t) < 0):
            raise ValueError("timestamps must be nondecreasing")
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "times", t)

    @classmethod
    def from_unsorted(cls, channels, times, site: str = "") -> "TimeTags":
        times = np.asarray(times, dtype=np.int64)
        order = np.argsort(times, kind="stable")
        return cls(np.asarray(channels)[order], times[order], site)

    @classmethod
    def empty(cls, site: str = "") -> "TimeTags":
        return cls(np.zeros(0, np.uint16), np.zeros(0, np.int64), site)

    def __len__(self) -> int:
        return int(self.times.size)

    def channel(self, ch: int) -> np.ndarray:
        return self.times[self.channels == ch]

    def channel_ids(self) -> set[int]:
        return set(int(c) for c in np.unique(self.channels))

    def counts(self) -> dict[int, int]:
        ids, n = np.unique(self.channels, return_counts=True)
        return {int(i): int(k) for i, k in zip(ids, n)}


def to_bytes(tags: TimeTags) -> bytes:
    rec = np.empty(len(tags), dtype=RECORD_DTYPE)
    rec["channel"] = tags.channels
    rec["timestamp"] = tags.times
    return MAGIC + bytes([FORMAT_VERSION]) + rec.tobytes()


def from_bytes(data: bytes, site: str = "") -> TimeTags:
    header = len(MAGIC) + 1
    if len(data) < header or data[: len(MAGIC)] != MAGIC:
        raise TagFormatError("not a time-tag file (bad magic)")
    if data[len(MAGIC)] != FORMAT_VERSION:
        raise TagFormatError(f"unsupported time-tag format version {data[len(MAGIC)]}")
    body = data[header:]
    if len(body) % RECORD_DTYPE.itemsize:
        raise TagFormatError(f"truncated record at byte {header + len(body) - len(body) % RECORD_DTYPE.itemsize}")
    rec = np.frombuffer(body, dtype=RECORD_DTYPE)
    return TimeTags(rec["channel"].copy(), rec["timestamp"].copy(), site)


def write_tags(path, tags: TimeTags) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(tags))


def read_tags(path, site: str = "") -> TimeTags:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), site)


def to_csv(tags: TimeTags) -> str:
    buf = io.StringIO()
    buf.write("channel,timestamp\n")
    for ch, t in zip(tags.channels.tolist(), tags.times.tolist()):
        buf.write(f"{ch},{t}\n")
    return buf.getvalue()


def from_csv(text: str, site: str = "") -> TimeTags:
    lines = text.strip().splitlines()
    if not lines or lines[0].strip() != "channel,timestamp":
        raise TagFormatError("missing 'channel,timestamp' header")
    rows = [line.split(",") for line in lines[1:] if line.strip()]
    ch = np.array([int(r[0]) for r in rows], dtype=np.uint16)
    t = np.array([int(r[1]) for r in rows], dtype=np.int64)
    return TimeTags(ch, t, site)


def extract_pps(stream: TimeTags, pps_channel: int) -> np.ndarray:
    """PPS timestamps on ``pps_channel``; an empty array if the channel is absent."""
    return stream.channel(pps_channel)


def _nearest(sorted_b: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Nearest element of ``sorted_b`` for each value; ties go to the earlier tag."""
    idx = np.searchsorted(sorted_b, values)
    left = np.clip(idx - 1, 0, sorted_b.size - 1)
    right = np.clip(idx, 0, sorted_b.size - 1)
    take_right = np.abs(sorted_b[right] - values) < np.abs(values - sorted_b[left])
    return np.where(take_right, sorted_b[right], sorted_b[left])


def lower_median(values: np.ndarray) -> int:
    v = np.sort(np.asarray(values, dtype=np.int64))
    return int(v[(v.size - 1) // 2])


def estimate_offset(pps_a, pps_b) -> int:
    """Median of ``nearest_b - a`` over every PPS tag in ``a``."""
    a = np.asarray(pps_a, dtype=np.int64)
    b = np.sort(np.asarray(pps_b, dtype=np.int64))
    if a.size == 0 or b.size == 0:
        raise ValueError("offset estimation needs PPS events from both sites")
    return lower_median(_nearest(b, a) - a)


def merge_streams(a: TimeTags, b: TimeTags, offset: int, remap: dict[int, int] | None = None) -> TimeTags:
    """Shift ``b`` by ``-offset`` and interleave it with ``a``.

    ``remap`` renames ``b`` channel ids; unmapped ids are kept.  Any id that
    would collide with an ``a`` channel raises ``ValueError``.
    """
    offset = int(offset)
    remap = dict(remap or {})
    b_ids = b.channel_ids()
    mapping_b = {ch: int(remap.get(ch, ch)) for ch in sorted(b_ids)}
    targets = list(mapping_b.values())
    if len(set(targets)) != len(targets):
        raise ValueError("channel remap is not injective")
    clash = set(targets) & a.channel_ids()
    if clash:
        raise ValueError(f"channel id collision {sorted(clash)}; supply a remap table")
    b_channels = b.channels.copy()
    for src, dst in mapping_b.items():
        b_channels[b.channels == src] = dst
    times = np.concatenate([a.times, b.times - offset])
    channels = np.concatenate([a.channels, b_channels])
    order = np.argsort(times, kind="stable")
    mapping = {"a": {ch: ch for ch in sorted(a.channel_ids())}, "b": mapping_b, "offset": offset}
    return TimeTags(channels[order], times[order], "merged", mapping)


def _require_channels(tags: TimeTags, *channels: int) -> None:
    known = tags.channel_ids() | set(_declared_channels(tags))
    missing = [c for c in channels if c not in known]
    if missing:
        raise ValueError(f"unknown channel(s) {missing}")


def _declared_channels(tags: TimeTags):
    for part in ("a", "b"):
        yield from tags.channel_map.get(part, {}).values()


def count_pairs(signal: np.ndarray, idler: np.ndarray, window: int, delay: int) -> int:
    """Greedy earliest one-to-one pairing of two sorted tag arrays."""
    if window <= 0:
        raise ValueError("coincidence window must be positive")
    if signal.size == 0 or idler.size == 0:
        return 0
    half = int(window) // 2
    centre = signal + int(delay)
    lo = np.searchsorted(idler, centre - half, side="left")
    hi = np.searchsorted(idler, centre + half, side="right")
    cand = np.nonzero(hi > lo)[0]
    if cand.size == 0:
        return 0
    # Candidate windows that can't see any other candidate's idlers are independent.
    lo_c, hi_c = lo[cand], hi[cand]
    overlap = np.zeros(cand.size, dtype=bool)
    overlap[1:] = lo_c[1:] < hi_c[:-1]
    overlap[:-1] |= overlap[1:]
    count = int(np.count_nonzero(~overlap))
    j = 0
    for l, h in zip(lo_c[overlap].tolist(), hi_c[overlap].tolist()):
        if j < l:
            j = l
        if j < h:
            count += 1
            j += 1
    return count


def delayed_window_counts(signal: np.ndarray, idler: np.ndarray, window: int, delays) -> np.ndarray:
    """Signal–idler pairs inside ``[d-w/2, d+w/2]`` for each delay ``d``, in one pass.

    Histogram semantics (every pair counts, no one-to-one matching), which is
    what a delayed-window background estimate wants; at background rates the
    two agree except for events sharing a window.
    """
    if window <= 0:
        raise ValueError("coincidence window must be positive")
    delays = np.asarray(delays, np.int64)
    out = np.zeros(delays.size, np.int64)
    if signal.size == 0 or idler.size == 0 or delays.size == 0:
        return out
    half = int(window) // 2
    order = np.argsort(delays, kind="stable")
    d_sorted = delays[order]
    lo = np.searchsorted(idler, signal + d_sorted[0] - half, side="left")
    hi = np.searchsorted(idler, signal + d_sorted[-1] + half, side="right")
    n = np.maximum(hi - lo, 0)
    total = int(n.sum())
    if total == 0:
        return out
    # expand (signal, idler-range) into the flat list of pair differences
    sig_idx = np.repeat(np.arange(signal.size), n)
    start = np.repeat(lo - np.concatenate(([0], np.cumsum(n)[:-1])), n)
    idl_idx = start + np.arange(total)
    diff = idler[idl_idx] - signal[sig_idx]
    step = int(np.gcd.reduce(np.abs(delays))) if np.any(delays) else 0
    if step > 2 * half:
        # delays on a lattice coarser than the window: each difference hits at most one
        k = np.floor_divide(diff + step // 2, step)
        hit = np.abs(diff - k * step) <= half
        k_min = int(d_sorted[0] // step)
        hist = np.bincount(k[hit] - k_min, minlength=int(d_sorted[-1] // step) - k_min + 1)
        return hist[delays // step - k_min].astype(np.int64)
    # general case: each difference lands in every window whose centre is within ±half
    left = np.searchsorted(d_sorted, diff - half, side="left")
    right = np.searchsorted(d_sorted, diff + half, side="right")
    cover = np.zeros(delays.size + 1, np.int64)
    np.add.at(cover, left, 1)
    np.add.at(cover, right, -1)
    out[order] = np.cumsum(cover[:-1])
    return out


def count_coincidences(merged: TimeTags, ch_signal: int, ch_idler: int, window: int, delay: int = 0) -> int:
    """Signal tags with an unused idler tag inside ``[t+delay-w/2, t+delay+w/2]``."""
    _require_channels(merged, ch_signal, ch_idler)
    return count_pairs(merged.channel(ch_signal), merged.channel(ch_idler), window, delay)


def estimate_accidentals(merged: TimeTags, ch_signal: int, ch_idler: int, window: int,
                         delay_offset: int, delay: int = 0) -> int:
    """Coincidences counted at a deliberately wrong delay."""
    if delay_offset <= window:
        raise ValueError("accidental delay offset must exceed the coincidence window")
    return count_coincidences(merged, ch_signal, ch_idler, window, delay + delay_offset)


@dataclass(frozen=True)
class CorrelationHistogram:
    bin_width: int
    offsets: np.ndarray
    counts: np.ndarray

    @property
    def is_empty(self) -> bool:
        return int(self.counts.sum()) == 0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def peak(self) -> int:
        if self.is_empty:
            raise ValueError("empty histogram")
        return int(self.offsets[int(np.argmax(self.counts))])


def correlation_histogram(merged: TimeTags, ch_a: int, ch_b: int, bin_width: int, span: int) -> CorrelationHistogram:
    """Histogram of ``t_b - t_a`` for all pairs within ``±span/2`` of the dominant offset.

    Bin centres sit on integer multiples of ``bin_width``.
    """
    bin_width, span = int(bin_width), int(span)
    if bin_width <= 0 or span <= bin_width:
        raise ValueError("need bin_width > 0 and span > bin_width")
    _require_channels(merged, ch_a, ch_b)
    ta, tb = merged.channel(ch_a), merged.channel(ch_b)
    empty = CorrelationHistogram(bin_width, np.zeros(0, np.int64), np.zeros(0, np.int64))
    if ta.size == 0 or tb.size == 0:
        return empty
    dominant = lower_median(_nearest(tb, ta) - ta)
    half = span // 2
    lo = np.searchsorted(tb, ta + dominant - half, side="left")
    hi = np.searchsorted(tb, ta + dominant + half, side="right")
    n = hi - lo
    if n.sum() == 0:
        return empty
    a_rep = np.repeat(ta, n)
    starts = np.repeat(lo - np.concatenate([[0], np.cumsum(n)[:-1]]), n)
    b_idx = starts + np.arange(n.sum())
    diffs = tb[b_idx] - a_rep
    k = np.floor_divide(2 * diffs + bin_width, 2 * bin_width)
    kmin = (2 * (dominant - half) + bin_width) // (2 * bin_width)
    kmax = (2 * (dominant + half) + bin_width) // (2 * bin_width)
    counts = np.bincount(k - kmin, minlength=kmax - kmin + 1).astype(np.int64)
    offsets = (np.arange(kmin, kmax + 1, dtype=np.int64)) * bin_width
    return CorrelationHistogram(bin_width, offsets, counts)


def rms_jitter(h: CorrelationHistogram) -> float:
    """Count-weighted standard deviation of bin centres, in ps."""
    if h.is_empty:
        raise ValueError("rms jitter of an empty histogram")
    w = h.counts.astype(float)
    x = h.offsets.astype(float)
    mean = np.sum(w * x) / w.sum()
    return float(np.sqrt(np.sum(w * (x - mean) ** 2) / w.sum()))
