"""Event streams: file formats, a frame-to-event simulator, voxelization, and
synthetic motion datasets."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
BINARY_MAGIC = b"CS3DEVT1"
CSV_HEADER = "t_us,x,y,p"
LOG_EPS = 1e-3


class EventFormatError(ValueError):
    pass


@dataclass
class EventStream:
    width: int
    height: int
    events: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=EVENT_DTYPE))
    label: int | None = None

    def __post_init__(self):
        self.events = np.asarray(self.events, dtype=EVENT_DTYPE)
        ev = self.events
        if len(ev):
            if ev["x"].max() >= self.width or ev["y"].max() >= self.height:
                raise EventFormatError(f"event coordinates exceed sensor geometry {self.width}x{self.height}")
            if not np.all(np.isin(ev["p"], (-1, 1))):
                raise EventFormatError("polarity must be +1 or -1")
            if np.any(np.diff(ev["t"].astype(np.int64)) < 0):
                raise EventFormatError("timestamps must be non-decreasing")

    def __len__(self) -> int:
        return len(self.events)

    @classmethod
    def from_arrays(cls, t, x, y, p, width: int, height: int, label=None) -> "EventStream":
        ev = np.zeros(len(t), dtype=EVENT_DTYPE)
        ev["t"], ev["x"], ev["y"], ev["p"] = t, x, y, p
        return cls(width, height, ev, label)


def make_events(t, x, y, p) -> np.ndarray:
    ev = np.zeros(len(t), dtype=EVENT_DTYPE)
    ev["t"], ev["x"], ev["y"], ev["p"] = t, x, y, p
    return ev


# ---------------------------------------------------------------------------
# file formats


def write_events(stream: EventStream, path, fmt: str | None = None) -> None:
    """Write CSV (``t_us,x,y,p``) or packed binary; format from ``fmt`` or the file suffix."""
    path = Path(path)
    fmt = fmt or ("bin" if path.suffix == ".bin" else "csv")
    if fmt == "bin":
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC)
            fh.write(stream.events.astype(EVENT_DTYPE).tobytes())
    elif fmt == "csv":
        ev = stream.events
        with open(path, "w", newline="") as fh:
            fh.write(CSV_HEADER + "\n")
            for t, x, y, p in zip(ev["t"].tolist(), ev["x"].tolist(), ev["y"].tolist(), ev["p"].tolist()):
                fh.write(f"{t},{x},{y},{p}\n")
    else:
        raise ValueError(f"unknown event format {fmt!r}")


def _parse_csv(text: str, path) -> np.ndarray:
    lines = text.splitlines()
    if not lines:
        return np.zeros(0, dtype=EVENT_DTYPE)
    if lines[0].strip() != CSV_HEADER:
        raise EventFormatError(f"{path}:1: expected header {CSV_HEADER!r}, got {lines[0]!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            if len(parts) != 4:
                raise ValueError
            t, x, y, p = (int(v) for v in parts)
        except ValueError:
            raise EventFormatError(f"{path}:{lineno}: malformed record {line!r}") from None
        if t < 0 or x < 0 or y < 0 or p not in (-1, 1):
            raise EventFormatError(f"{path}:{lineno}: invalid values in {line!r}")
        rows.append((t, x, y, p))
    return np.array(rows, dtype=EVENT_DTYPE) if rows else np.zeros(0, dtype=EVENT_DTYPE)


def _parse_bin(raw: bytes, path) -> np.ndarray:
    body = raw[len(BINARY_MAGIC):]
    if len(body) % EVENT_DTYPE.itemsize:
        whole = len(body) // EVENT_DTYPE.itemsize
        raise EventFormatError(f"{path}: truncated record at byte offset {len(BINARY_MAGIC) + whole * EVENT_DTYPE.itemsize}")
    ev = np.frombuffer(body, dtype=EVENT_DTYPE).copy()
    bad = np.flatnonzero(~np.isin(ev["p"], (-1, 1)))
    if bad.size:
        raise EventFormatError(f"{path}: invalid polarity at byte offset {len(BINARY_MAGIC) + bad[0] * EVENT_DTYPE.itemsize}")
    return ev


def parse_events(path, width: int | None = None, height: int | None = None, label: int | None = None) -> EventStream:
    """Read a CSV or binary event file (format detected from the content).

    Geometry defaults to the bounding box of the events.  Out-of-order
    timestamps are stably sorted with a warning.
    """
    raw = Path(path).read_bytes()
    ev = _parse_bin(raw, path) if raw.startswith(BINARY_MAGIC) else _parse_csv(raw.decode("utf-8"), path)
    if len(ev) and np.any(np.diff(ev["t"].astype(np.int64)) < 0):
        warnings.warn(f"{path}: timestamps out of order, sorting")
        ev = ev[np.argsort(ev["t"], kind="stable")]
    w = width if width is not None else (int(ev["x"].max()) + 1 if len(ev) else 1)
    h = height if height is not None else (int(ev["y"].max()) + 1 if len(ev) else 1)
    if len(ev) and (ev["x"].max() >= w or ev["y"].max() >= h):
        i = int(np.flatnonzero((ev["x"] >= w) | (ev["y"] >= h))[0])
        raise EventFormatError(f"{path}: event {i} at ({ev['x'][i]}, {ev['y'][i]}) lies outside {w}x{h}")
    return EventStream(w, h, ev, label)


# ---------------------------------------------------------------------------
# frame-to-event simulation


def frames_to_events(frames, threshold: float, frame_interval_us: float = 1e6 / 30, eps: float = LOG_EPS) -> EventStream:
    """Log-intensity contrast events from a frame sequence.

    Each pixel keeps a reference log intensity ``L_ref``.  At every new frame
    the pixel emits ``floor(|L - L_ref| / threshold)`` events of the sign of
    the change, timestamped where the straight line between the previous and
    current frame's log intensity crosses each threshold level, and moves
    ``L_ref`` by the emitted multiples.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise ValueError(f"need at least 2 frames shaped (N, H, W), got {frames.shape}")
    if not threshold > 0:
        raise ValueError("threshold must be > 0")
    if not np.all(np.isfinite(frames)):
        raise ValueError("frames contain non-finite pixels")
    n_frames, h, w = frames.shape
    logs = np.log(frames + eps)
    ref = logs[0].copy()
    times = np.round(np.arange(n_frames) * frame_interval_us).astype(np.int64)
    ys, xs = np.mgrid[0:h, 0:w]
    ys, xs = ys.ravel(), xs.ravel()
    chunks = []
    for k in range(1, n_frames):
        prev, cur = logs[k - 1].ravel(), logs[k].ravel()
        delta = cur - ref.ravel()
        # tolerance absorbs roundoff when the change is an exact multiple of the threshold
        count = np.floor(np.abs(delta) / threshold + 1e-9).astype(np.int64)
        sign = np.where(delta > 0, 1, -1)
        span = cur - prev
        t0, t1 = times[k - 1], times[k]
        for j in range(1, int(count.max(initial=0)) + 1):
            idx = np.flatnonzero(count >= j)
            level = ref.ravel()[idx] + sign[idx] * j * threshold
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(span[idx] != 0, (level - prev[idx]) / span[idx], 1.0)
            frac = np.clip(frac, 0.0, 1.0)
            ts = np.round(t0 + frac * (t1 - t0)).astype(np.int64)
            chunks.append(make_events(ts, xs[idx], ys[idx], sign[idx]))
        ref = (ref.ravel() + sign * count * threshold).reshape(h, w)
    ev = np.concatenate(chunks) if chunks else np.zeros(0, dtype=EVENT_DTYPE)
    ev = ev[np.argsort(ev["t"], kind="stable")]
    return EventStream(w, h, ev)


# ---------------------------------------------------------------------------
# voxelization


@dataclass
class VoxelGrid:
    data: np.ndarray  # (2, T, H, W); channel 0 ON, channel 1 OFF
    bin_us: float


def voxelize(s: EventStream, bins: int, height: int, width: int, policy: str = "count") -> VoxelGrid:
    """Accumulate events into (2, bins, height, width).

    The window [t_first, t_last] is split into equal bins with the last bin
    closed.  ``bilinear-time`` shares each event between the two nearest bin
    centres, so total mass matches ``count``.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if policy not in ("count", "binary", "bilinear-time"):
        raise ValueError(f"unknown voxel policy {policy!r}")
    grid = np.zeros((2, bins, height, width))
    ev = s.events
    if len(ev) == 0:
        return VoxelGrid(grid, 0.0)
    t = ev["t"].astype(np.int64)
    t0, t1 = int(t[0]), int(t[-1])
    duration = t1 - t0
    xi = ev["x"].astype(np.int64) * width // s.width
    yi = ev["y"].astype(np.int64) * height // s.height
    ch = np.where(ev["p"] > 0, 0, 1)
    if duration == 0:
        if len(ev) > 1:
            warnings.warn("zero-duration event stream: every event lands in bin 0")
        b = np.zeros(len(ev), dtype=np.int64)
    else:
        b = np.minimum((t - t0) * bins // duration, bins - 1)
    if policy == "bilinear-time" and duration > 0:
        u = (t - t0) / duration * bins - 0.5
        lo = np.floor(u)
        frac = u - lo
        lo = lo.astype(np.int64)
        np.add.at(grid, (ch, np.clip(lo, 0, bins - 1), yi, xi), 1.0 - frac)
        np.add.at(grid, (ch, np.clip(lo + 1, 0, bins - 1), yi, xi), frac)
    else:
        np.add.at(grid, (ch, b, yi, xi), 1.0)
        if policy == "binary":
            np.minimum(grid, 1.0, out=grid)
    return VoxelGrid(grid, duration / bins)


def normalize_max(grid: np.ndarray) -> np.ndarray:
    m = grid.max()
    return grid / m if m > 0 else grid.copy()


# ---------------------------------------------------------------------------
# frame preprocessing


def to_gray(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    return frame[..., 0] * 0.299 + frame[..., 1] * 0.587 + frame[..., 2] * 0.114


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize with edge clamping."""
    h, w = img.shape

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(height, h)
    x0, x1, fx = coords(width, w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def preprocess_frames(frames, crop_box: tuple[int, int, int, int] | None, target: tuple[int, int]) -> np.ndarray:
    """Crop ``(top, left, height, width)``, convert to luma, bilinear-resize to ``target``."""
    out = []
    for f in frames:
        f = np.asarray(f, dtype=np.float64)
        if crop_box is not None:
            top, left, ch, cw = crop_box
            if top < 0 or left < 0 or top + ch > f.shape[0] or left + cw > f.shape[1] or ch < 1 or cw < 1:
                raise ValueError(f"crop box {crop_box} outside frame of shape {f.shape[:2]}")
            f = f[top : top + ch, left : left + cw]
        out.append(resize_bilinear(to_gray(f), *target))
    return np.stack(out)


def load_frames_dir(path) -> np.ndarray:
    """Sorted ``*.png``/``*.jpg``/``*.npy`` frames from a directory as floats in [0, 1]."""
    from PIL import Image

    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".npy"))
    if not files:
        raise ValueError(f"no frames found in {path}")
    frames = []
    for p in files:
        if p.suffix.lower() == ".npy":
            frames.append(to_gray(np.load(p)))
        else:
            with Image.open(p) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            frames.append(to_gray(arr))
    return np.stack(frames)


def load_video_csv(path) -> np.ndarray:
    """Frames from long-format CSV with header ``frame,y,x,intensity``."""
    text = Path(path).read_text()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["frame", "y", "x", "intensity"]:
        raise ValueError(f"{path}: expected header 'frame,y,x,intensity'")
    rows = np.array([[float(v) for v in r] for r in reader if r], dtype=np.float64)
    if rows.size == 0:
        raise ValueError(f"{path}: no pixels")
    f, y, x = (rows[:, i].astype(np.int64) for i in range(3))
    frames = np.zeros((f.max() + 1, y.max() + 1, x.max() + 1))
    frames[f, y, x] = rows[:, 3]
    return frames


# ---------------------------------------------------------------------------
# synthetic datasets


@dataclass
class Dataset:
    x: np.ndarray  # (N, 2, T, H, W)
    y: np.ndarray  # (N,)
    class_count: int
    class_names: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.class_count, self.class_names)

    def split(self, test_fraction: float = 0.2, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Seeded stratified split into (train, test)."""
        rng = np.random.default_rng(seed)
        train, test = [], []
        for c in range(self.class_count):
            idx = np.flatnonzero(self.y == c)
            idx = idx[rng.permutation(len(idx))]
            k = int(round(len(idx) * test_fraction))
            test += idx[:k].tolist()
            train += idx[k:].tolist()
        if test_fraction > 0 and (not train or not test):
            raise ValueError(f"test fraction {test_fraction} of {len(self)} samples leaves an empty split")
        return self.subset(sorted(train)), self.subset(sorted(test))


SYNTH_KINDS = {
    "moving-bar-4dir": ("up", "down", "left", "right"),
    "expanding-vs-contracting": ("expanding", "contracting"),
}


def _bar_frames(size: int, n_frames: int, rng: np.random.Generator | None) -> np.ndarray:
    """A vertical bar sweeping rightwards, anti-aliased over columns."""
    if rng is None:
        width, start, speed, lo, hi = 3.0, 0.15 * size, 0.6 * size / (n_frames - 1), 0.1, 0.9
    else:
        width = rng.uniform(2.0, 4.0)
        start = rng.uniform(0.05, 0.25) * size
        speed = rng.uniform(0.45, 0.7) * size / (n_frames - 1)
        lo, hi = rng.uniform(0.05, 0.2), rng.uniform(0.75, 0.95)
    cols = np.arange(size, dtype=np.float64)
    frames = np.empty((n_frames, size, size))
    for k in range(n_frames):
        centre = start + speed * k
        left, right = centre - width / 2, centre + width / 2
        cover = np.clip(np.minimum(cols + 1, right) - np.maximum(cols, left), 0.0, 1.0)
        frames[k] = lo + (hi - lo) * cover[None, :]
    return frames


def _disk_frames(size: int, n_frames: int, rng: np.random.Generator | None) -> np.ndarray:
    """A bright disk growing from the centre."""
    if rng is None:
        r0, r1, cy, cx, lo, hi = 0.1 * size, 0.45 * size, size / 2, size / 2, 0.1, 0.9
    else:
        r0, r1 = rng.uniform(0.05, 0.15) * size, rng.uniform(0.38, 0.48) * size
        cy, cx = size / 2 + rng.uniform(-0.1, 0.1, size=2) * size
        lo, hi = rng.uniform(0.05, 0.2), rng.uniform(0.75, 0.95)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dist = np.hypot(yy - cy, xx - cx)
    frames = np.empty((n_frames, size, size))
    for k in range(n_frames):
        r = r0 + (r1 - r0) * k / (n_frames - 1)
        frames[k] = lo + (hi - lo) * np.clip(r - dist + 0.5, 0.0, 1.0)
    return frames


def render_sample(kind: str, label: int, size: int, n_frames: int, rng: np.random.Generator | None) -> np.ndarray:
    """Frames for one sample; ``rng=None`` renders the un-jittered canonical motion."""
    if kind == "moving-bar-4dir":
        right = _bar_frames(size, n_frames, rng)
        name = SYNTH_KINDS[kind][label]
        if name == "right":
            return right
        if name == "left":
            return right[:, :, ::-1].copy()
        down = np.transpose(right, (0, 2, 1)).copy()
        return down if name == "down" else down[:, ::-1, :].copy()
    if kind == "expanding-vs-contracting":
        grow = _disk_frames(size, n_frames, rng)
        return grow if label == 0 else grow[::-1].copy()
    raise ValueError(f"unknown synthetic dataset kind {kind!r}")


def synth_streams(kind: str, n_per_class: int, geometry: tuple[int, int] = (32, 32), seed: int = 0,
                  n_frames: int = 17, threshold: float = 0.15, jitter: bool = True) -> list[EventStream]:
    """Labelled event streams, class-major order.  Sample i uses its own generator
    seeded from (seed, i) so generation order does not matter."""
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic dataset kind {kind!r}")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    h, w = geometry
    if h < 8 or w < 8:
        raise ValueError(f"geometry {geometry} is degenerate (< 8x8)")
    if h != w:
        raise ValueError("synthetic datasets need a square sensor")
    streams = []
    for label in range(len(SYNTH_KINDS[kind])):
        for j in range(n_per_class):
            i = label * n_per_class + j
            rng = np.random.default_rng((seed, i)) if jitter else None
            frames = render_sample(kind, label, h, n_frames, rng)
            s = frames_to_events(frames, threshold)
            s.label = label
            streams.append(s)
    return streams


def streams_to_dataset(streams: list[EventStream], class_count: int, bins: int = 16, height: int = 32, width: int = 32,
                       policy: str = "count", normalize: bool = True, class_names=()) -> Dataset:
    x = np.empty((len(streams), 2, bins, height, width))
    for i, s in enumerate(streams):
        g = voxelize(s, bins, height, width, policy).data
        x[i] = normalize_max(g) if normalize else g
    y = np.array([s.label for s in streams], dtype=np.int64)
    return Dataset(x, y, class_count, tuple(class_names))


def synth_dataset(kind: str, n_per_class: int, geometry: tuple[int, int] = (32, 32), seed: int = 0, bins: int = 16,
                  policy: str = "count", normalize: bool = True, jitter: bool = True, threshold: float = 0.15) -> Dataset:
    streams = synth_streams(kind, n_per_class, geometry, seed, jitter=jitter, threshold=threshold)
    names = SYNTH_KINDS[kind]
    return streams_to_dataset(streams, len(names), bins, geometry[0], geometry[1], policy, normalize, names)


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, entries: list[tuple[str, int, int, int]]) -> None:
    """Rows of (event-file path, label, width, height); paths relative to the manifest."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "width", "height"])
        for row in entries:
            w.writerow(row)


def read_manifest(path) -> list[tuple[Path, int, int | None, int | None]]:
    path = Path(path)
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "label"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: manifest needs 'path' and 'label' columns")
        for row in reader:
            p = Path(row["path"])
            p = p if p.is_absolute() else path.parent / p
            w = int(row["width"]) if row.get("width") else None
            h = int(row["height"]) if row.get("height") else None
            out.append((p, int(row["label"]), w, h))
    return out


def load_manifest_dataset(path, bins: int, height: int, width: int, policy: str = "count", normalize: bool = True,
                          class_count: int | None = None) -> Dataset:
    entries = read_manifest(path)
    if not entries:
        raise ValueError(f"{path}: manifest is empty")
    streams = [parse_events(p, w, h, label) for p, label, w, h in entries]
    k = class_count if class_count is not None else max(s.label for s in streams) + 1
    return streams_to_dataset(streams, k, bins, height, width, policy, normalize)
