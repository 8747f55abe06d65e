"""Series I/O, chronological splits, scaling, windowing, graphs and masks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_THRESHOLD = 0.1
DEFAULT_P_FAILURE = 0.0015
BLOCK_MIN_LENGTH = 4


class DataError(ValueError):
    """Malformed input data or an unsatisfiable data precondition."""


@dataclass
class RawSeries:
    values: np.ndarray  # T x n
    sensor_ids: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"series must be 2-D, got shape {self.values.shape}")
        if self.values.shape[1] != len(self.sensor_ids):
            raise DataError("sensor id count does not match column count")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]


# --- file formats -----------------------------------------------------------
def _read_rows(path) -> list[list[str]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        return [row for row in csv.reader(fh) if row]


def _parse_matrix(rows: list[list[str]], path, *, binary: bool = False) -> tuple[list[str], np.ndarray]:
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2:
        raise DataError(f"{path}: need at least 2 columns, got {len(header)}")
    body = rows[1:]
    if not body:
        raise DataError(f"{path}: no data rows")
    out = np.empty((len(body), len(header)))
    for r, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise DataError(f"{path}: ragged row {r}: expected {len(header)} cells, got {len(row)}")
        for c, cell in enumerate(row, start=1):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell.strip()!r} at ({r},{c})") from None
            if not math.isfinite(v):
                raise DataError(f"{path}: non-finite cell at ({r},{c})")
            if binary and v not in (0.0, 1.0):
                raise DataError(f"{path}: mask cell at ({r},{c}) is not 0/1")
            out[r - 1, c - 1] = v
    return header, out


def load_series(path) -> RawSeries:
    """Read a comma-separated series file: header of sensor ids, one row per step."""
    header, values = _parse_matrix(_read_rows(path), path)
    return RawSeries(values, header)


def save_matrix(path, header: Sequence[str], values: np.ndarray, fmt=repr) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in np.asarray(values):
            w.writerow([fmt(_plain(v)) for v in row])


def _plain(v):
    f = float(v)
    return int(f) if f.is_integer() and abs(f) < 2**53 else f


def save_series(path, series: RawSeries) -> None:
    save_matrix(path, series.sensor_ids, series.values)


def load_mask(path, sensor_ids: Sequence[str] | None = None) -> np.ndarray:
    header, values = _parse_matrix(_read_rows(path), path, binary=True)
    if sensor_ids is not None and list(sensor_ids) != header:
        raise DataError(f"{path}: mask header does not match series sensor ids")
    return values


def save_mask(path, sensor_ids: Sequence[str], mask: np.ndarray) -> None:
    save_matrix(path, sensor_ids, np.asarray(mask, dtype=np.int64), fmt=str)


def load_distances(path, sensor_ids: Sequence[str]) -> np.ndarray:
    """Read (from_id, to_id, distance) rows into a symmetric n x n matrix.

    Unlisted pairs are at infinite distance; the diagonal is zero.
    """
    rows = _read_rows(path)
    index = {s: i for i, s in enumerate(sensor_ids)}
    n = len(sensor_ids)
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    start = 1 if rows and _is_header(rows[0]) else 0
    for r, row in enumerate(rows[start:], start=1):
        if len(row) != 3:
            raise DataError(f"{path}: row {r} must have 3 cells (from_id, to_id, distance)")
        a, b, d = (c.strip() for c in row)
        if a not in index or b not in index:
            raise DataError(f"{path}: row {r} references unknown sensor")
        try:
            dv = float(d)
        except ValueError:
            raise DataError(f"{path}: non-numeric distance at ({r},3)") from None
        if dv < 0:
            raise DataError(f"{path}: negative distance at ({r},3)")
        i, j = index[a], index[b]
        if i != j:
            dist[i, j] = dist[j, i] = dv
    return dist


def _is_header(row) -> bool:
    try:
        float(row[-1])
        return False
    except ValueError:
        return True


def save_distances(path, sensor_ids: Sequence[str], dist: np.ndarray) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["from_id", "to_id", "distance"])
        n = len(sensor_ids)
        for i in range(n):
            for j in range(i + 1, n):
                if np.isfinite(dist[i, j]):
                    w.writerow([sensor_ids[i], sensor_ids[j], repr(float(dist[i, j]))])


# --- splitting, scaling, windowing -------------------------------------------
def split_lengths(T: int, ratios: Sequence[float]) -> list[int]:
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    val = int(math.floor(T * ratios[1] + 1e-9))
    test = int(math.floor(T * ratios[2] + 1e-9))
    return [T - val - test, val, test]


def chronological_split(series: RawSeries, ratios: Sequence[float], min_length: int = 1,
                        mask: np.ndarray | None = None):
    """Cut ``series`` into contiguous train/val/test segments.

    Flooring remainders go to the training segment. Returns three RawSeries,
    or three (RawSeries, mask) pairs when ``mask`` is given.
    """
    lengths = split_lengths(series.T, ratios)
    for name, length in zip(("train", "val", "test"), lengths):
        if length < min_length:
            raise DataError(f"{name} segment has {length} rows, need at least {min_length}")
    bounds = np.cumsum([0] + lengths)
    parts = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        seg = RawSeries(series.values[a:b].copy(), list(series.sensor_ids))
        parts.append(seg if mask is None else (seg, np.asarray(mask)[a:b].copy()))
    return parts


@dataclass
class ScalerStats:
    mean: np.ndarray
    std: np.ndarray


def fit_scaler(values: np.ndarray, mask: np.ndarray | None = None,
               sensor_ids: Sequence[str] | None = None, min_observed: int = 2,
               pooled_fallback: bool = False) -> ScalerStats:
    """Per-column mean and population std, over observed cells only.

    A column with fewer than ``min_observed`` observed cells is an error, or
    with ``pooled_fallback`` borrows the statistics of all observed cells.
    """
    values = np.asarray(values, dtype=np.float64)
    observed = np.ones_like(values) if mask is None else np.asarray(mask, dtype=np.float64)
    count = observed.sum(axis=0)
    min_observed = max(2, min_observed)
    pooled = values[observed > 0]
    mean = np.zeros(values.shape[1])
    std = np.zeros(values.shape[1])
    for c in range(values.shape[1]):
        name = sensor_ids[c] if sensor_ids is not None else str(c)
        if count[c] < min_observed:
            if not pooled_fallback or pooled.size < 2:
                raise DataError(f"column {name!r} has fewer than {min_observed} observed values")
            col = pooled
        else:
            col = values[observed[:, c] > 0, c]
        mean[c] = col.mean()
        std[c] = col.std()
        if not std[c] > 0:
            raise DataError(f"column {name!r} has zero variance")
    return ScalerStats(mean, std)


def apply_scaler(values: np.ndarray, stats: ScalerStats) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) - stats.mean) / stats.std


def invert_scaler(values: np.ndarray, stats: ScalerStats, axis: int = -1) -> np.ndarray:
    """Undo :func:`apply_scaler`; ``axis`` is the sensor axis of ``values``."""
    values = np.asarray(values, dtype=np.float64)
    shape = [1] * values.ndim
    shape[axis] = -1
    return values * stats.std.reshape(shape) + stats.mean.reshape(shape)


@dataclass
class WindowedDataset:
    """Rolling windows, node-major: arrays are (N, n, tau) and (N, n, upsilon)."""

    history: np.ndarray
    target: np.ndarray
    history_mask: np.ndarray
    target_mask: np.ndarray
    starts: np.ndarray
    tau: int
    upsilon: int

    def __len__(self) -> int:
        return self.history.shape[0]

    def subset(self, idx) -> "WindowedDataset":
        return WindowedDataset(self.history[idx], self.target[idx], self.history_mask[idx],
                               self.target_mask[idx], self.starts[idx], self.tau, self.upsilon)


def make_windows(segment: np.ndarray, mask: np.ndarray | None, tau: int, upsilon: int,
                 offset: int = 0) -> WindowedDataset:
    """Slice a (T_seg x n) segment into T_seg - tau - upsilon + 1 windows.

    Window k has history rows [k, k+tau) and target rows [k+tau, k+tau+upsilon).
    Masked history cells are zero-filled.
    """
    segment = np.asarray(segment, dtype=np.float64)
    T_seg = segment.shape[0]
    if tau < 1 or upsilon < 1:
        raise DataError(f"tau and upsilon must be positive, got {tau}, {upsilon}")
    if T_seg < tau + upsilon:
        raise DataError(f"segment of {T_seg} rows is shorter than tau+upsilon={tau + upsilon}")
    mask = np.ones_like(segment) if mask is None else np.asarray(mask, dtype=np.float64)
    span = tau + upsilon
    win = sliding_window_view(segment * mask, span, axis=0)  # (N, n, span)
    mwin = sliding_window_view(mask, span, axis=0)
    count = T_seg - span + 1
    return WindowedDataset(
        history=np.ascontiguousarray(win[:, :, :tau]),
        target=np.ascontiguousarray(sliding_window_view(segment, span, axis=0)[:, :, tau:]),
        history_mask=np.ascontiguousarray(mwin[:, :, :tau]),
        target_mask=np.ascontiguousarray(mwin[:, :, tau:]),
        starts=np.arange(count) + offset,
        tau=tau,
        upsilon=upsilon,
    )


# --- explicit graph ---------------------------------------------------------
@dataclass
class ExplicitGraph:
    adjacency: np.ndarray
    distances: np.ndarray
    kernel_width: float
    threshold: float


def default_kernel_width(distances: np.ndarray) -> float:
    d = np.asarray(distances, dtype=np.float64)
    iu = np.triu_indices(d.shape[0], k=1)
    vals = d[iu]
    vals = vals[np.isfinite(vals)]
    width = float(vals.std()) if vals.size else 0.0
    return width if width > 0 else 1.0


def build_adjacency(distances: np.ndarray, kernel_width: float | None = None,
                    threshold: float = DEFAULT_THRESHOLD) -> ExplicitGraph:
    """Binary graph from a Gaussian distance kernel exp(-d^2 / width^2)."""
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise DataError(f"distance matrix must be square, got {d.shape}")
    if np.any(d < 0) or np.any(np.isnan(d)):
        raise DataError("distances must be non-negative")
    if not np.array_equal(d, d.T):
        raise DataError("distance matrix is not symmetric")
    if kernel_width is None:
        kernel_width = default_kernel_width(d)
    if kernel_width <= 0:
        raise DataError("kernel width must be positive")
    with np.errstate(over="ignore"):
        w = np.exp(-(d / kernel_width) ** 2)
    adj = (w >= threshold).astype(np.float64)
    np.fill_diagonal(adj, 0.0)
    return ExplicitGraph(adj, d, float(kernel_width), float(threshold))


def normalized_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with self loops."""
    a = np.asarray(adjacency, dtype=np.float64) + np.eye(adjacency.shape[0])
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    return a * dinv[:, None] * dinv[None, :]


# --- missingness ------------------------------------------------------------
@dataclass
class MissingnessMask:
    mask: np.ndarray  # T x n, 1 = observed
    scheme: str
    rate: float
    block_max_length: int | None = None

    @property
    def missing_fraction(self) -> float:
        return float(1.0 - self.mask.mean())


def _check_rate(rate: float) -> None:
    if not 0.0 <= rate <= 1.0:
        raise DataError(f"missing rate must lie in [0, 1], got {rate}")


def simulate_point_missing(T: int, n: int, rate: float, seed: int) -> MissingnessMask:
    """Drop each (step, sensor) cell independently with probability ``rate``."""
    _check_rate(rate)
    rng = np.random.default_rng(seed)
    mask = (rng.random((T, n)) >= rate).astype(np.float64)
    return MissingnessMask(mask, "point", rate)


def block_coverage(p_failure: float, min_length: int, max_length: int) -> float:
    """Stationary probability that a cell lies inside at least one outage.

    Outages start with probability ``p_failure`` per step and last
    U{min_length..max_length} steps; a cell is covered by an outage that
    started k steps earlier iff its length exceeds k.
    """
    k = np.arange(max_length)
    n_len = max_length - min_length + 1
    survive = np.where(k < min_length, 1.0, (max_length - k) / n_len)
    return float(1.0 - np.exp(np.sum(np.log1p(-p_failure * survive))))


def solve_block_length(rate: float, p_failure: float, T: int,
                       min_length: int = BLOCK_MIN_LENGTH) -> int:
    """Largest outage length whose expected coverage best matches ``rate``."""
    if p_failure <= 0:
        raise DataError("block missingness needs p_failure > 0")
    hi = max(T, min_length)
    if block_coverage(p_failure, min_length, hi) < rate:
        raise DataError(f"rate {rate} unreachable with p_failure={p_failure} and blocks <= {hi} steps")
    if block_coverage(p_failure, min_length, min_length) > rate:
        raise DataError(f"rate {rate} is below the coverage of the shortest blocks")
    lo = min_length
    while lo < hi:
        mid = (lo + hi) // 2
        if block_coverage(p_failure, min_length, mid) < rate:
            lo = mid + 1
        else:
            hi = mid
    if lo > min_length:
        below = block_coverage(p_failure, min_length, lo - 1)
        if abs(below - rate) < abs(block_coverage(p_failure, min_length, lo) - rate):
            lo -= 1
    return lo


def simulate_block_missing(T: int, n: int, rate: float, seed: int,
                           p_failure: float = DEFAULT_P_FAILURE,
                           min_length: int = BLOCK_MIN_LENGTH) -> MissingnessMask:
    """Per-sensor outages: random starts, uniform lengths, overlaps merge.

    Outage starts are Bernoulli(``p_failure``) per step and sensor, drawn from
    ``T`` steps before the series begins so early rows see the same coverage
    as the rest. Each outage lasts ``min_length + floor(u * (L - min_length + 1))``
    steps for a uniform ``u``. The bound ``L`` starts from the stationary
    solution and is then refined on the drawn events so the realized missing
    fraction is as close to ``rate`` as the draws allow.
    """
    _check_rate(rate)
    if rate == 0.0:
        return MissingnessMask(np.ones((T, n)), "block", rate, None)
    analytic = solve_block_length(rate, p_failure, T, min_length)
    rng = np.random.default_rng(seed)
    lead = T
    starts = rng.random((T + lead, n)) < p_failure
    u = rng.random((T + lead, n))
    ti, ci = np.nonzero(starts)
    uu = u[ti, ci]

    def build(max_length: int) -> np.ndarray:
        lengths = min_length + np.floor(uu * (max_length - min_length + 1)).astype(np.int64)
        diff = np.zeros((T + lead + max_length + 1, n))
        np.add.at(diff, (ti, ci), 1.0)
        np.add.at(diff, (ti + lengths, ci), -1.0)
        covered = np.cumsum(diff, axis=0)[lead:lead + T] > 0
        return (~covered).astype(np.float64)

    def missing(max_length: int) -> float:
        return 1.0 - build(max_length).mean()

    lo, hi = min_length, max(T, analytic)
    while lo < hi:
        mid = (lo + hi) // 2
        if missing(mid) < rate:
            lo = mid + 1
        else:
            hi = mid
    if lo > min_length and abs(missing(lo - 1) - rate) < abs(missing(lo) - rate):
        lo -= 1
    return MissingnessMask(build(lo), "block", rate, lo)


def simulate_missing(scheme: str, T: int, n: int, rate: float, seed: int,
                     p_failure: float = DEFAULT_P_FAILURE) -> MissingnessMask:
    if scheme == "point":
        return simulate_point_missing(T, n, rate, seed)
    if scheme == "block":
        return simulate_block_missing(T, n, rate, seed, p_failure)
    raise DataError(f"unknown missingness scheme {scheme!r}")


# --- synthetic data ----------------------------------------------------------
@dataclass
class SyntheticData:
    series: RawSeries
    adjacency: np.ndarray
    incidence: np.ndarray
    theta: float
    periods: np.ndarray
    phases: np.ndarray
    season_amplitude: float
    distances: np.ndarray | None = None
    noise: np.ndarray = field(default=None, repr=False)

    def seasonal(self, t) -> np.ndarray:
        return seasonal_term(t, self.incidence, self.periods, self.phases, self.season_amplitude)

    def one_step(self, x_t: np.ndarray, t: int) -> np.ndarray:
        """Noise-free transition x_t -> x_{t+1}."""
        return self.theta * normalized_adjacency(self.adjacency) @ x_t + self.seasonal(t)


def seasonal_term(t, incidence, periods, phases, amplitude) -> np.ndarray:
    """Sum of one sinusoid per planted community each node belongs to."""
    t = np.asarray(t, dtype=np.float64)
    waves = amplitude * np.sin(2 * np.pi * t[..., None] / periods + phases)  # (..., m)
    return waves @ np.asarray(incidence, dtype=np.float64).T


def generate_synthetic(n: int, T: int, adjacency: np.ndarray, incidence: np.ndarray,
                       theta: float = 0.8, season_amplitude: float = 1.0,
                       noise_std: float = 0.1, seed: int = 0,
                       periods: Sequence[float] | None = None,
                       x0: np.ndarray | None = None) -> SyntheticData:
    """Simulate x_{t+1} = theta * A_hat x_t + s(t) + noise.

    ``A_hat`` is the self-loop normalized planted adjacency and ``s`` gives
    each planted community its own sinusoid.
    """
    adjacency = np.asarray(adjacency, dtype=np.float64)
    incidence = np.asarray(incidence, dtype=np.float64)
    if adjacency.shape != (n, n) or incidence.shape[0] != n:
        raise DataError("planted structures do not match n")
    a_hat = normalized_adjacency(adjacency)
    rho = float(np.max(np.abs(np.linalg.eigvalsh(a_hat))))
    if abs(theta) * rho >= 1.0:
        raise DataError(f"unstable dynamics: theta * rho(A_hat) = {abs(theta) * rho:.4f} >= 1")
    rng = np.random.default_rng(seed)
    m = incidence.shape[1]
    if periods is None:
        periods = 24.0 * (1.0 + 0.5 * np.arange(m))
    periods = np.asarray(periods, dtype=np.float64)
    phases = rng.uniform(0.0, 2 * np.pi, size=m)
    noise = rng.normal(0.0, 1.0, size=(T, n)) * noise_std
    x = np.zeros((T, n))
    x[0] = 0.0 if x0 is None else x0
    s = seasonal_term(np.arange(T), incidence, periods, phases, season_amplitude)
    for t in range(T - 1):
        x[t + 1] = theta * a_hat @ x[t] + s[t] + noise[t]
    ids = [f"s{i}" for i in range(n)]
    return SyntheticData(RawSeries(x, ids), adjacency, incidence, theta, periods, phases,
                         season_amplitude, noise=noise)


def plant_structures(n: int, communities: int = 3, seed: int = 0,
                     spread: float = 1.0, separation: float = 6.0):
    """Sensors scattered around ``communities`` well-separated centres.

    Returns (distances, adjacency, incidence). The adjacency is exactly what
    :func:`build_adjacency` recovers from the distances with its defaults, and
    the incidence assigns each sensor to its cluster's hyperedge.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % communities
    angles = 2 * np.pi * np.arange(communities) / communities
    centres = separation * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    pos = centres[labels] + rng.normal(0.0, spread * 0.5, size=(n, 2))
    dist = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    adjacency = build_adjacency(dist).adjacency
    incidence = np.zeros((n, communities))
    incidence[np.arange(n), labels] = 1.0
    return dist, adjacency, incidence
