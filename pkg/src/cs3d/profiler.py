"""FLOPs / parameter accounting and energy integration from power traces.

FLOPs follow the THOP convention: one multiply-accumulate counts as one FLOP.
Bias adds, normalization, activations, pooling and attention elementwise work
are counted at one op per element so the per-layer rows add up exactly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .module import ProfileRow
from .network import Model

__all__ = [
    "ProfileRow",
    "ProfileReport",
    "PowerTrace",
    "count_flops",
    "count_params",
    "integrate_energy",
    "integrate_energy_fixed",
    "profile",
    "format_engineering",
    "read_power_trace",
    "write_power_trace",
    "compare_csv",
]


@dataclass
class ProfileReport:
    model: str
    input_shape: tuple[int, ...]
    rows: list[ProfileRow]
    energy_j: float | None = None
    device: str | None = None

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def flops_g(self) -> float:
        return self.flops / 1e9

    @property
    def energy_mj(self) -> float | None:
        return None if self.energy_j is None else self.energy_j * 1e3

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "out_shape", "params", "flops"])
        for r in self.rows:
            w.writerow([r.layer, r.kind, "x".join(map(str, r.out_shape)), r.params, r.flops])
        return buf.getvalue()

    def to_table(self) -> str:
        name_w = max([len("layer")] + [len(r.layer) for r in self.rows])
        kind_w = max([len("kind")] + [len(r.kind) for r in self.rows])
        shp = ["x".join(map(str, r.out_shape)) for r in self.rows]
        shp_w = max([len("out_shape")] + [len(s) for s in shp])
        lines = [f"{'layer':<{name_w}}  {'kind':<{kind_w}}  {'out_shape':<{shp_w}}  {'params':>12}  {'flops':>16}"]
        lines.append("-" * len(lines[0]))
        for r, s in zip(self.rows, shp):
            lines.append(f"{r.layer:<{name_w}}  {r.kind:<{kind_w}}  {s:<{shp_w}}  {r.params:>12,}  {r.flops:>16,}")
        lines.append("-" * len(lines[0]))
        lines.append(f"model: {self.model}  input: {'x'.join(map(str, self.input_shape))}")
        lines.append(f"params: {self.params:,}")
        lines.append(f"FLOPs (G): {self.flops_g:.4f}")
        if self.energy_j is not None:
            dev = f" [{self.device}]" if self.device else ""
            lines.append(f"Energy (mJ): {format_engineering(self.energy_mj)}{dev}")
        return "\n".join(lines)


def _batched(input_shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in input_shape)
    if len(shape) == 4:
        shape = (1, *shape)
    if len(shape) != 5:
        raise ValueError(f"input shape must be (C, T, H, W) or (B, C, T, H, W), got {input_shape}")
    return shape


def count_flops(m: Model, input_shape) -> ProfileReport:
    shape = _batched(input_shape)
    rows, _ = m.profile(shape)
    return ProfileReport(m.cfg.name, shape, rows)


def count_params(m: Model) -> int:
    return sum(t.size for _, t in m.named_parameters())


# ---------------------------------------------------------------------------
# energy


@dataclass
class PowerTrace:
    t_s: np.ndarray
    watts: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.t_s = np.asarray(self.t_s, dtype=np.float64)
        self.watts = np.asarray(self.watts, dtype=np.float64)
        if self.t_s.shape != self.watts.shape or self.t_s.ndim != 1:
            raise ValueError("timestamps and powers must be 1-D and of equal length")
        if self.t_s.size and np.any(np.diff(self.t_s) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if np.any(self.watts < 0):
            raise ValueError("power must be non-negative")


def integrate_energy(trace: PowerTrace, method: str = "left") -> float:
    """Energy in joules.

    ``left`` is sum_i P(t_i) * (t_{i+1} - t_i); on a uniform grid it equals
    sum_i P(t_i) * dt.  ``trapezoid`` averages the interval endpoints.
    """
    if trace.t_s.size < 2:
        raise ValueError("energy integration needs at least two samples")
    dt = np.diff(trace.t_s)
    if np.any(dt < 0):
        raise ValueError("negative sampling interval")
    p = trace.watts
    if method == "left":
        return float(np.sum(p[:-1] * dt))
    if method == "trapezoid":
        return float(np.sum(0.5 * (p[:-1] + p[1:]) * dt))
    raise ValueError(f"unknown integration method {method!r}")


def integrate_energy_fixed(watts, dt: float) -> float:
    """Fixed-interval form: dt * sum of every sample that opens an interval."""
    w = np.asarray(watts, dtype=np.float64)
    if w.size < 2:
        raise ValueError("energy integration needs at least two samples")
    return float(np.sum(w[:-1] * dt))


def read_power_trace(path) -> PowerTrace:
    text = Path(path).read_text()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["t_s", "watts"]:
        raise ValueError(f"{path}: expected header 't_s,watts', got {header}")
    t, w = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            t.append(float(row[0]))
            w.append(float(row[1]))
        except (ValueError, IndexError):
            raise ValueError(f"{path}:{lineno}: malformed record {row!r}") from None
    return PowerTrace(np.array(t), np.array(w), Path(path).stem)


def write_power_trace(trace: PowerTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_s", "watts"])
        for t, p in zip(trace.t_s, trace.watts):
            w.writerow([repr(float(t)), repr(float(p))])


_SUPERSCRIPT = str.maketrans("-0123456789", "⁻⁰¹²³⁴⁵⁶⁷⁸⁹")


def format_engineering(value: float, digits: int = 3) -> str:
    """Three significant digits with an exponent that is a multiple of 3, e.g. "18.2 × 10³"."""
    if value == 0:
        return "0"
    exp = int(np.floor(np.log10(abs(value))))
    eng = 3 * (exp // 3)
    mant = value / 10.0**eng
    decimals = max(0, digits - 1 - (exp - eng))
    text = f"{mant:.{decimals}f}"
    if float(text) >= 1000:  # rounding carried into the next group
        eng += 3
        mant = value / 10.0**eng
        text = f"{mant:.{digits - 1}f}"
    if eng == 0:
        return text
    return f"{text} × 10{str(eng).translate(_SUPERSCRIPT)}"


def profile(m: Model, input_shape, trace: PowerTrace | None = None, method: str = "left") -> ProfileReport:
    report = count_flops(m, input_shape)
    if trace is not None:
        report.energy_j = integrate_energy(trace, method)
        report.device = trace.source or None
    return report


def compare_csv(reports: list[ProfileReport]) -> str:
    """One row per model, shaped like an energy comparison table."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "params", "flops", "flops_g", "energy_mj"])
    for r in reports:
        w.writerow([r.model, r.params, r.flops, f"{r.flops_g:.6f}", "" if r.energy_mj is None else f"{r.energy_mj:.6g}"])
    return buf.getvalue()
