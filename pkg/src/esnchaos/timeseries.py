"""Uniformly sampled multivariate time series, the common currency between modules."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

# Relative tolerance for a time column to count as uniformly sampled.
DT_UNIFORMITY_RTOL = 1e-6


@dataclass(frozen=True)
class TimeSeries:
    """T x d array of samples on a uniform time grid.

    values[k] is the sample at time t0 + k*dt. The array is made read-only
    so instances can be shared freely across workers.
    """

    values: np.ndarray
    dt: float
    channels: tuple[str, ...]
    t0: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise ValueError(f"values must be 1-D or 2-D, got shape {values.shape}")
        if values.shape[1] < 1:
            raise ValueError("need at least one channel")
        if not np.all(np.isfinite(values)):
            raise ValueError("all samples must be finite")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        channels = tuple(str(c) for c in self.channels)
        if len(channels) != values.shape[1]:
            raise ValueError(
                f"{len(channels)} channel labels for {values.shape[1]} columns"
            )
        if len(set(channels)) != len(channels):
            raise ValueError(f"channel labels must be unique, got {channels}")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "t0", float(self.t0))

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    @property
    def duration(self) -> float:
        """Time span from the first to the last sample."""
        return self.dt * (len(self) - 1)

    def select(self, channels) -> "TimeSeries":
        """Sub-series holding the named (or indexed) channels, in the given order."""
        idx = []
        labels = []
        for c in channels:
            if isinstance(c, str):
                if c not in self.channels:
                    raise KeyError(f"no channel {c!r} in {self.channels}")
                idx.append(self.channels.index(c))
                labels.append(c)
            else:
                idx.append(int(c))
                labels.append(self.channels[int(c)])
        return TimeSeries(self.values[:, idx], self.dt, tuple(labels), self.t0)

    def channel(self, name) -> np.ndarray:
        """One channel's samples as a flat array."""
        if name not in self.channels:
            raise KeyError(f"no channel {name!r} in {self.channels}")
        return self.values[:, self.channels.index(name)]

    def slice(self, start: int, stop: int | None = None) -> "TimeSeries":
        """Contiguous sample range [start, stop) with the time origin shifted to match."""
        stop = len(self) if stop is None else stop
        if not 0 <= start < stop <= len(self):
            raise ValueError(f"bad slice [{start}:{stop}] for length {len(self)}")
        return TimeSeries(
            self.values[start:stop], self.dt, self.channels, self.t0 + start * self.dt
        )


def write_csv(series: TimeSeries, path) -> None:
    """Write `t,<ch1>,<ch2>,...` rows at full double precision, LF line endings."""
    times = series.times
    with open(path, "w", newline="\n") as fh:
        fh.write("t," + ",".join(series.channels) + "\n")
        for k in range(len(series)):
            row = [format(times[k], ".17g")]
            row.extend(format(v, ".17g") for v in series.values[k])
            fh.write(",".join(row) + "\n")


def read_csv(path, dt: float | None = None) -> TimeSeries:
    """Parse a series CSV, inferring dt from the time column unless given.

    Rejects ragged rows, non-finite cells, and non-monotone or non-uniform
    time columns (relative deviation above DT_UNIFORMITY_RTOL). Row numbers in
    error messages count the header as row 1.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if len(header) < 2 or header[0].strip() != "t":
            raise ValueError(f"{path}: header must be 't,<ch1>,...', got {header}")
        channels = tuple(h.strip() for h in header[1:])
        width = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ValueError(
                    f"{path}: row {lineno} has {len(row)} fields, expected {width}"
                )
            try:
                parsed = [float(cell) for cell in row]
            except ValueError:
                raise ValueError(f"{path}: row {lineno} has a non-numeric cell") from None
            if not all(np.isfinite(parsed)):
                raise ValueError(f"{path}: row {lineno} has a non-finite value")
            rows.append(parsed)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    t = arr[:, 0]
    values = arr[:, 1:]
    if len(arr) == 1:
        if dt is None:
            raise ValueError(f"{path}: single-row file needs an explicit dt")
        return TimeSeries(values, dt, channels, t0=t[0])
    diffs = np.diff(t)
    if np.any(diffs <= 0):
        bad = int(np.argmax(diffs <= 0))
        raise ValueError(f"{path}: time not strictly increasing at row {bad + 3}")
    dt_est = float((t[-1] - t[0]) / (len(t) - 1)) if dt is None else float(dt)
    if np.max(np.abs(diffs - dt_est)) > DT_UNIFORMITY_RTOL * dt_est:
        raise ValueError(f"{path}: time column is not uniform (dt ~ {dt_est})")
    return TimeSeries(values, dt_est, channels, t0=t[0])
