"""Dataset ingestion, imputation, splits, normalization, and a synthetic
spatially-correlated generator.

On-disk contract:
  manifest.csv  header ``station_id,lat,lon,target_var_index,relative_path``
  station csv   header ``timestamp,v0,...,v{n-1}``; ISO-8601 hourly
                timestamps; an empty cell marks a missing value.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .geo import GeoEncoding

__all__ = [
    "DataError",
    "StationSeries",
    "SplitSpec",
    "NormStats",
    "impute",
    "load_manifest",
    "normalize",
    "denormalize",
    "synth_generate",
    "write_dataset",
    "make_windows",
]

HOUR = timedelta(hours=1)
TIME_FORMAT = "%Y-%m-%dT%H:%M:%S"


class DataError(ValueError):
    pass


@dataclass
class StationSeries:
    """One station's gap-free hourly multivariate series plus metadata."""

    station_id: str
    geo: GeoEncoding
    start_time: datetime
    values: np.ndarray        # (hours, n_variables), no missing cells
    target_index: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"data: station {self.station_id}: values must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"data: station {self.station_id}: non-finite values")
        if not 0 <= self.target_index < self.values.shape[1]:
            raise DataError(
                f"data: station {self.station_id}: target index {self.target_index} "
                f"outside {self.values.shape[1]} variables"
            )

    @property
    def n_hours(self) -> int:
        return self.values.shape[0]

    @property
    def n_variables(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SplitSpec:
    """Chronological split boundaries.

    The first 40% of the series trains the foundation model and the next
    10% validates it; the remaining half is divided 6:2:2 into the
    fine-tuning train/validation/test ranges."""

    pretrain_train_frac: float = 0.4
    pretrain_val_frac: float = 0.1
    finetune_train_frac: float = 0.6
    finetune_val_frac: float = 0.2

    def __post_init__(self):
        if not 0 < self.pretrain_train_frac < 1 or not 0 < self.pretrain_val_frac < 1:
            raise DataError("data: pretrain fractions must lie in (0, 1)")
        if self.pretrain_train_frac + self.pretrain_val_frac >= 1:
            raise DataError("data: pretrain region must leave room for fine-tuning")
        if self.finetune_train_frac + self.finetune_val_frac >= 1:
            raise DataError("data: fine-tune fractions must leave a test share")

    def boundaries(self, length: int) -> dict[str, tuple[int, int]]:
        """Deterministic, disjoint, ordered index ranges."""
        pt_train_end = int(length * self.pretrain_train_frac)
        pt_val_end = int(length * (self.pretrain_train_frac + self.pretrain_val_frac))
        ft_start = int(length * (self.pretrain_train_frac + self.pretrain_val_frac))
        ft_len = length - ft_start
        ft_train_end = ft_start + int(ft_len * self.finetune_train_frac)
        ft_val_end = ft_train_end + int(ft_len * self.finetune_val_frac)
        return {
            "pretrain_train": (0, pt_train_end),
            "pretrain_val": (pt_train_end, pt_val_end),
            "finetune_train": (ft_start, ft_train_end),
            "finetune_val": (ft_train_end, ft_val_end),
            "finetune_test": (ft_val_end, length),
        }


# ---------------------------------------------------------------------------
# imputation


def impute(values: np.ndarray, max_interp_gap: int = 2) -> np.ndarray:
    """Fill missing (NaN) cells per variable.

    Runs of up to ``max_interp_gap`` missing hours flanked on both sides are
    linearly interpolated; longer runs and boundary runs are zero-filled.
    A variable with no observed value at all is an error."""
    values = np.array(values, dtype=np.float64)
    if values.ndim != 2:
        raise DataError("data: impute expects a (hours, variables) array")
    m, n = values.shape
    for j in range(n):
        col = values[:, j]
        missing = np.isnan(col)
        if not missing.any():
            continue
        if missing.all():
            raise DataError(f"data: variable {j} has no observed values")
        i = 0
        while i < m:
            if not missing[i]:
                i += 1
                continue
            start = i
            while i < m and missing[i]:
                i += 1
            end = i  # run is [start, end)
            run = end - start
            has_left = start > 0
            has_right = end < m
            if run <= max_interp_gap and has_left and has_right:
                left = col[start - 1]
                right = col[end]
                steps = run + 1
                for k in range(run):
                    col[start + k] = left + (right - left) * (k + 1) / steps
            else:
                col[start:end] = 0.0
    return values


# ---------------------------------------------------------------------------
# manifest loading


def _parse_timestamp(text: str, where: str) -> datetime:
    try:
        return datetime.strptime(text, TIME_FORMAT)
    except ValueError:
        raise DataError(f"data: {where}: bad timestamp {text!r}") from None


def _load_station_file(path: Path, station_id: str, n_expected: int | None,
                       max_interp_gap: int) -> tuple[datetime, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"data: {path}: empty station file") from None
        if not header or header[0] != "timestamp":
            raise DataError(f"data: {path}: first column must be 'timestamp'")
        n_vars = len(header) - 1
        if n_vars < 1:
            raise DataError(f"data: {path}: no variable columns")
        if n_expected is not None and n_vars != n_expected:
            raise DataError(
                f"data: {path}: {n_vars} variables, expected {n_expected}"
            )
        rows: list[tuple[datetime, list[float]]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_vars + 1:
                raise DataError(
                    f"data: {path}:{lineno}: expected {n_vars + 1} fields, got {len(row)}"
                )
            ts = _parse_timestamp(row[0], f"{path}:{lineno}")
            vals = []
            for cell in row[1:]:
                if cell == "":
                    vals.append(math.nan)
                else:
                    try:
                        vals.append(float(cell))
                    except ValueError:
                        raise DataError(
                            f"data: {path}:{lineno}: bad value {cell!r}"
                        ) from None
            rows.append((ts, vals))
    if not rows:
        raise DataError(f"data: {path}: station {station_id} has no rows")

    start = rows[0][0]
    prev = None
    for ts, _ in rows:
        if prev is not None:
            if ts == prev:
                raise DataError(f"data: {path}: duplicated timestamp {ts}")
            if ts < prev:
                raise DataError(f"data: {path}: timestamps not increasing at {ts}")
        offset = ts - start
        if offset % HOUR:
            raise DataError(f"data: {path}: timestamp {ts} off the hourly grid")
        prev = ts

    # Reindex onto the continuous hourly grid; absent rows become missing.
    total = (rows[-1][0] - start) // HOUR + 1
    grid = np.full((total, n_vars), math.nan)
    for ts, vals in rows:
        grid[(ts - start) // HOUR] = vals
    return start, impute(grid, max_interp_gap)


def load_manifest(path, max_interp_gap: int = 2) -> list[StationSeries]:
    """Parse a manifest plus its station files into imputed series."""
    path = Path(path)
    base = path.parent
    stations: list[StationSeries] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"data: {path}: empty manifest") from None
        expected = ["station_id", "lat", "lon", "target_var_index", "relative_path"]
        if header != expected:
            raise DataError(f"data: {path}: manifest header must be {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise DataError(f"data: {path}:{lineno}: expected 5 fields, got {len(row)}")
            sid, lat, lon, target, rel = row
            try:
                geo = GeoEncoding(float(lat), float(lon))
            except ValueError as err:
                raise DataError(f"data: {path}:{lineno}: {err}") from None
            try:
                target_index = int(target)
            except ValueError:
                raise DataError(
                    f"data: {path}:{lineno}: bad target index {target!r}"
                ) from None
            start, values = _load_station_file(base / rel, sid, None, max_interp_gap)
            stations.append(StationSeries(sid, geo, start, values, target_index))
    if not stations:
        raise DataError(f"data: {path}: manifest lists no stations")
    return stations


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormStats:
    """Per-variable affine statistics; kept so predictions can be mapped
    back to physical units."""

    mean: np.ndarray
    std: np.ndarray


def normalize(series: StationSeries, split: SplitSpec,
              portion: str = "finetune_train") -> tuple[StationSeries, NormStats]:
    """Z-score each variable with statistics from one training range only.
    Zero-variance variables get scale 1 so they map to zeros."""
    lo, hi = split.boundaries(series.n_hours)[portion]
    ref = series.values[lo:hi]
    if ref.shape[0] < 2:
        raise DataError(
            f"data: station {series.station_id}: range {portion} too short to normalize"
        )
    mean = ref.mean(axis=0)
    std = ref.std(axis=0)
    std = np.where(std > 0.0, std, 1.0)
    stats = NormStats(mean=mean, std=std)
    return replace(series, values=(series.values - mean) / std), stats


def denormalize(values: np.ndarray, stats: NormStats,
                variables: np.ndarray | list[int] | None = None) -> np.ndarray:
    """Invert ``normalize`` (optionally for a subset of variable columns)."""
    if variables is None:
        return values * stats.std + stats.mean
    idx = np.asarray(variables)
    return values * stats.std[idx] + stats.mean[idx]


# ---------------------------------------------------------------------------
# synthetic dataset


def synth_generate(stations: int = 12, hours: int = 2000, variables: int = 4,
                   seed: int = 0, base_lat: float = 35.0, base_lon: float = -90.0,
                   extent_deg: float = 3.0, noise_std: float = 0.25,
                   freq_spread: float = 0.35,
                   start: datetime | None = None) -> list[StationSeries]:
    """Spatially-correlated sensor field on a jittered grid.

    Every variable is a sum of sinusoids whose amplitudes, phases, and
    crucially *periods* drift smoothly with latitude and longitude, plus a
    station offset and Gaussian noise. The period drift makes the
    window-to-future map genuinely station-specific (a single shared
    predictor cannot fit all stations), while its spatial smoothness keeps
    nearby stations more alike than distant ones."""
    if stations < 1 or hours < 1 or variables < 1:
        raise DataError("data: synth needs positive stations/hours/variables")
    rng = np.random.default_rng(seed)
    start = start or datetime(2020, 1, 1)

    side = math.ceil(math.sqrt(stations))
    coords: list[GeoEncoding] = []
    for s in range(stations):
        gi, gj = divmod(s, side)
        lat = base_lat + extent_deg * (gi / max(side - 1, 1))
        lon = base_lon + extent_deg * (gj / max(side - 1, 1))
        lat += rng.normal(0.0, extent_deg * 0.03)
        lon += rng.normal(0.0, extent_deg * 0.03)
        coords.append(GeoEncoding(float(np.clip(lat, -90, 90)),
                                  float(np.clip(lon, -180, 180))))

    t = np.arange(hours, dtype=np.float64)
    shared_periods = np.array([24.0, 53.0])
    n_shared = len(shared_periods)
    local_base_period = 11.0
    out: list[StationSeries] = []
    # Region-wide harmonic structure; the location fields below bend it.
    var_phase = rng.uniform(0.0, 2 * np.pi, size=(variables, n_shared + 1))
    var_amp = rng.uniform(0.6, 1.0, size=(variables, n_shared))
    local_amp = rng.uniform(0.7, 1.1, size=variables)
    freq_dir = rng.normal(0.0, 1.0, size=2)
    freq_dir /= np.linalg.norm(freq_dir)
    amp_dir = rng.normal(0.0, 1.0, size=(variables, 2))
    for s, geo in enumerate(coords):
        u = (geo.latitude - base_lat) / extent_deg
        v = (geo.longitude - base_lon) / extent_deg
        values = np.empty((hours, variables))
        offsets = rng.normal(0.0, 0.2, size=variables)
        noise = rng.normal(0.0, noise_std, size=(hours, variables))
        # Shared components drift in phase by at most ~pi across the region:
        # their cross-station correlation falls off monotonically with
        # distance (no wrap-around).
        phase_shift = np.pi * (0.55 * u + 0.45 * v)
        # The local component's period varies smoothly with location, so the
        # short-horizon dynamics (and the optimal predictor) are
        # station-specific while staying alike between neighbors.
        local_period = local_base_period * (
            1.0 + freq_spread * (freq_dir[0] * (u - 0.5) + freq_dir[1] * (v - 0.5))
        )
        for j in range(variables):
            amp_scale = 1.0 + 0.4 * np.tanh(amp_dir[j, 0] * (u - 0.5)
                                            + amp_dir[j, 1] * (v - 0.5))
            sig = np.zeros(hours)
            for k, period in enumerate(shared_periods):
                sig += var_amp[j, k] * np.sin(
                    2 * np.pi * t / period + var_phase[j, k] + phase_shift
                )
            sig += local_amp[j] * np.sin(
                2 * np.pi * t / local_period + var_phase[j, n_shared]
            )
            values[:, j] = amp_scale * sig + offsets[j] + noise[:, j]
        out.append(StationSeries(f"st{s:03d}", geo, start, values, target_index=0))
    return out


def write_dataset(stations: list[StationSeries], outdir) -> Path:
    """Write station CSVs plus the manifest; fixed formatting keeps the
    bytes a deterministic function of the data."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = outdir / "manifest.csv"
    with open(manifest, "w", newline="") as mh:
        writer = csv.writer(mh)
        writer.writerow(["station_id", "lat", "lon", "target_var_index", "relative_path"])
        for st in stations:
            rel = f"{st.station_id}.csv"
            writer.writerow([
                st.station_id,
                f"{st.geo.latitude:.6f}",
                f"{st.geo.longitude:.6f}",
                st.target_index,
                rel,
            ])
            with open(outdir / rel, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["timestamp"] + [f"v{j}" for j in range(st.n_variables)])
                for i in range(st.n_hours):
                    ts = (st.start_time + i * HOUR).strftime(TIME_FORMAT)
                    w.writerow([ts] + [f"{x:.6f}" for x in st.values[i]])
    return manifest


# ---------------------------------------------------------------------------
# windowing


def make_windows(values: np.ndarray, lo: int, hi: int, history: int,
                 horizon: int, target_index: int | None) -> tuple[np.ndarray, np.ndarray]:
    """Contiguous stride-1 forecasting windows fully inside [lo, hi).

    Returns inputs (W, history, n) and targets (W, horizon, n) or
    (W, horizon, 1) when a target variable is given."""
    span = hi - lo
    count = span - history - horizon + 1
    if count < 1:
        return (np.empty((0, history, values.shape[1])),
                np.empty((0, horizon, values.shape[1] if target_index is None else 1)))
    xs = np.empty((count, history, values.shape[1]))
    if target_index is None:
        ys = np.empty((count, horizon, values.shape[1]))
    else:
        ys = np.empty((count, horizon, 1))
    for w in range(count):
        a = lo + w
        xs[w] = values[a:a + history]
        fut = values[a + history:a + history + horizon]
        ys[w] = fut if target_index is None else fut[:, [target_index]]
    return xs, ys
