"""Cycling-data ingestion, per-cycle health features, labels, z-scoring and case splits.

On-disk dataset layout (all CSV, units in the column names)::

    <root>/cells.csv                      cell_id,batch,policy,q_nom_Ah
    <root>/<cell_id>/summary.csv          cycle,discharge_capacity_Ah,charge_time_min,
                                          internal_resistance_ohm,avg_temperature_C
    <root>/<cell_id>/curves/cycle_00001.csv   voltage_V,discharge_capacity_Ah

A feature table (output of ``features`` / ``simulate``) is a single CSV with
columns ``cell_id,batch,cycle,<feature names...>,t,pcl,rul``.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd

from . import kernels

log = logging.getLogger(__name__)

Q_NOM = 1.1  # Ah, A123 APR18650M1A
VOLTAGE_WINDOW = (2.7, 3.3)
EOL_THRESHOLD = 0.20
FEATURE_NAMES = (
    "omega",
    "b",
    "ic_max",
    "ic_min",
    "ic_var",
    "avg_temperature",
    "internal_resistance",
    "charge_time",
)
SUMMARY_COLUMNS = (
    "cycle",
    "discharge_capacity_Ah",
    "charge_time_min",
    "internal_resistance_ohm",
    "avg_temperature_C",
)
CURVE_COLUMNS = ("voltage_V", "discharge_capacity_Ah")

# small synthetic extract in the raw schema, shipped for offline tests and demos
SAMPLE_DIR = Path(__file__).parent / "sample_data"

CASES = {
    "A": {"trainval": ("91", "100"), "test": ("124",), "val_fraction": 0.20},
    "B": {"trainval": ("101", "108", "120"), "test": ("116",), "val_fraction": 0.20},
    "C": {"batch": 2, "test_fraction": 0.20, "val_fraction": 0.25},
}


class DataError(ValueError):
    pass


class FeatureUnavailable(DataError):
    """A per-cycle feature cannot be computed; the cycle is marked missing."""


# ---------------------------------------------------------------------------
# records and labels
# ---------------------------------------------------------------------------


@dataclass
class CellCycleRecord:
    cell_id: str
    cycle: int
    voltage: np.ndarray
    capacity: np.ndarray
    charge_time: float
    internal_resistance: float
    avg_temperature: float
    discharge_capacity: float

    def __post_init__(self):
        self.voltage = np.asarray(self.voltage, dtype=np.float64)
        self.capacity = np.asarray(self.capacity, dtype=np.float64)
        if self.cycle < 1:
            raise DataError(f"cell {self.cell_id}: cycle index must be >= 1, got {self.cycle}")
        if self.voltage.shape != self.capacity.shape or self.voltage.ndim != 1:
            raise DataError(f"cell {self.cell_id} cycle {self.cycle}: curve arrays differ in length")
        if self.voltage.shape[0] < 2:
            raise DataError(f"cell {self.cell_id} cycle {self.cycle}: curve needs >= 2 samples")


def compute_pcl(q_k, q_nom: float = Q_NOM):
    """Percentage capacity loss u = 1 - Q_k / Q_nom (as a fraction)."""
    if q_nom <= 0:
        raise DataError("nominal capacity must be positive")
    q = np.asarray(q_k, dtype=np.float64)
    if np.any(q < 0):
        raise DataError("discharge capacity must be non-negative")
    u = 1.0 - q / q_nom
    return float(u) if u.ndim == 0 else u


def soh_from_pcl(u):
    return 1.0 - np.asarray(u, dtype=np.float64)


# ---------------------------------------------------------------------------
# per-cycle features
# ---------------------------------------------------------------------------


class QuadraticFit(NamedTuple):
    omega: float
    b: float
    residual_std: float


def discharge_window(voltage, capacity, window=VOLTAGE_WINDOW):
    """Samples with voltage inside ``window`` in recorded (sweep) order.

    Consecutive repeated voltages keep their first sample.
    """
    v = np.asarray(voltage, dtype=np.float64)
    q = np.asarray(capacity, dtype=np.float64)
    lo, hi = window
    keep = (v >= lo) & (v <= hi) & np.isfinite(v) & np.isfinite(q)
    v, q = v[keep], q[keep]
    if v.shape[0] > 1:
        first = np.concatenate(([True], np.diff(v) != 0.0))
        v, q = v[first], q[first]
    return v, q


def quadratic_trend_fit(voltage, capacity, window=VOLTAGE_WINDOW) -> QuadraticFit:
    """Least-squares fit of consecutive capacity differences against -Q^2 with intercept."""
    _, q = discharge_window(voltage, capacity, window)
    if q.shape[0] < 3:
        raise FeatureUnavailable(f"{q.shape[0]} samples in the {window} V window, need 3")
    fit = QuadraticFit(*kernels.quadratic_trend(q))
    if not np.isfinite(fit.omega):
        raise FeatureUnavailable("degenerate capacity samples in window")
    return fit


def ic_features(voltage, capacity, window=VOLTAGE_WINDOW, smooth: int = 5):
    """(max, min, variance) of dQ/dV over the voltage window."""
    v, q = discharge_window(voltage, capacity, window)
    if v.shape[0] < 3:
        raise FeatureUnavailable(f"{v.shape[0]} samples in the {window} V window, need 3")
    dv = np.diff(v)
    if not (np.all(dv < 0) or np.all(dv > 0)):
        raise FeatureUnavailable("voltage is not strictly monotone along the discharge")
    dqdv = kernels.gradient(q, v)
    if smooth > 1:
        dqdv = kernels.centered_mean(dqdv, smooth)
    return float(dqdv.max()), float(dqdv.min()), float(dqdv.var())


def cycle_features(rec: CellCycleRecord, window=VOLTAGE_WINDOW, ic_smooth: int = 5) -> np.ndarray:
    """Raw 8-feature vector of one cycle; unavailable curve features are NaN."""
    out = np.full(len(FEATURE_NAMES), np.nan)
    try:
        fit = quadratic_trend_fit(rec.voltage, rec.capacity, window)
        out[0], out[1] = fit.omega, fit.b
    except FeatureUnavailable as exc:
        log.debug("cell %s cycle %d: trend feature missing (%s)", rec.cell_id, rec.cycle, exc)
    try:
        out[2:5] = ic_features(rec.voltage, rec.capacity, window, ic_smooth)
    except FeatureUnavailable as exc:
        log.debug("cell %s cycle %d: IC features missing (%s)", rec.cell_id, rec.cycle, exc)
    out[5] = rec.avg_temperature
    out[6] = rec.internal_resistance
    out[7] = rec.charge_time
    return out


# ---------------------------------------------------------------------------
# feature tables
# ---------------------------------------------------------------------------


class FeatureRow(NamedTuple):
    cell_id: str
    cycle: int
    x: np.ndarray
    t: float
    u: float
    rul: float


@dataclass
class FeatureTable:
    """Column store of feature rows, ordered by (cell, cycle)."""

    cell_id: np.ndarray
    batch: np.ndarray
    cycle: np.ndarray
    x: np.ndarray
    t: np.ndarray
    pcl: np.ndarray
    rul: np.ndarray
    feature_names: tuple = FEATURE_NAMES

    def __post_init__(self):
        self.cell_id = np.asarray(self.cell_id, dtype=object)
        self.batch = np.asarray(self.batch, dtype=np.int64)
        self.cycle = np.asarray(self.cycle, dtype=np.int64)
        self.feature_names = tuple(self.feature_names)
        self.x = np.asarray(self.x, dtype=np.float64).reshape(len(self.cell_id),
                                                             len(self.feature_names))
        self.t = np.asarray(self.t, dtype=np.float64)
        self.pcl = np.asarray(self.pcl, dtype=np.float64)
        self.rul = np.asarray(self.rul, dtype=np.float64)
        n = len(self.cell_id)
        for name in ("batch", "cycle", "t", "pcl", "rul"):
            if getattr(self, name).shape != (n,):
                raise DataError(f"column {name} has wrong length")

    def __len__(self) -> int:
        return len(self.cell_id)

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    @property
    def cells(self) -> list[str]:
        return list(dict.fromkeys(self.cell_id.tolist()))

    def rows(self):
        for i in range(len(self)):
            yield FeatureRow(self.cell_id[i], int(self.cycle[i]), self.x[i], float(self.t[i]),
                             float(self.pcl[i]), float(self.rul[i]))

    def take(self, index) -> "FeatureTable":
        return FeatureTable(self.cell_id[index], self.batch[index], self.cycle[index],
                            self.x[index], self.t[index], self.pcl[index], self.rul[index],
                            self.feature_names)

    def only_cells(self, cells: Sequence[str]) -> "FeatureTable":
        return self.take(np.isin(self.cell_id, list(cells)))

    def select_features(self, names: Sequence[str]) -> "FeatureTable":
        idx = [self.feature_names.index(n) for n in names]
        return FeatureTable(self.cell_id, self.batch, self.cycle, self.x[:, idx], self.t,
                            self.pcl, self.rul, tuple(names))

    def labels(self, task: str) -> np.ndarray:
        if task == "soh":
            return self.pcl
        if task == "rul":
            return self.rul
        raise DataError(f"unknown task {task!r}; expected 'soh' or 'rul'")

    @classmethod
    def concat(cls, tables: Sequence["FeatureTable"]) -> "FeatureTable":
        tables = [t for t in tables if t is not None]
        if not tables:
            raise DataError("no feature tables to concatenate")
        names = tables[0].feature_names
        if any(t.feature_names != names for t in tables):
            raise DataError("feature tables disagree on feature names")
        return cls(
            np.concatenate([t.cell_id for t in tables]),
            np.concatenate([t.batch for t in tables]),
            np.concatenate([t.cycle for t in tables]),
            np.concatenate([t.x for t in tables]),
            np.concatenate([t.t for t in tables]),
            np.concatenate([t.pcl for t in tables]),
            np.concatenate([t.rul for t in tables]),
            names,
        )

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"cell_id": self.cell_id, "batch": self.batch, "cycle": self.cycle})
        for j, name in enumerate(self.feature_names):
            df[name] = self.x[:, j]
        df["t"] = self.t
        df["pcl"] = self.pcl
        df["rul"] = self.rul
        return df

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path) -> "FeatureTable":
        df = pd.read_csv(path, dtype={"cell_id": str}, float_precision="round_trip")
        fixed = {"cell_id", "batch", "cycle", "t", "pcl", "rul"}
        missing = fixed - set(df.columns)
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        names = tuple(c for c in df.columns if c not in fixed)
        return cls(df["cell_id"].to_numpy(dtype=object), df["batch"].to_numpy(),
                   df["cycle"].to_numpy(), df[list(names)].to_numpy(dtype=np.float64),
                   df["t"].to_numpy(), df["pcl"].to_numpy(), df["rul"].to_numpy(), names)


def assemble_features(records: Sequence[CellCycleRecord], q_nom: float = Q_NOM, batch: int = 0,
                      ma_window: int = 10, eol_threshold: float = EOL_THRESHOLD,
                      ic_smooth: int = 5, window=VOLTAGE_WINDOW) -> FeatureTable:
    """Feature rows of one cell, cycles 1..EOL, features smoothed by a trailing mean.

    Cycles with any missing feature are dropped before smoothing.  If the cell
    never reaches end of life its RUL labels are NaN.
    """
    if not records:
        raise DataError("no records")
    cell = records[0].cell_id
    cycles = np.array([r.cycle for r in records])
    if np.any(np.diff(cycles) <= 0):
        raise DataError(f"cell {cell}: records are not sorted by strictly increasing cycle")
    if any(r.cell_id != cell for r in records):
        raise DataError("records from more than one cell")
    caps = np.array([r.discharge_capacity for r in records])
    if np.any(caps > 1.5 * q_nom):
        bad = cycles[caps > 1.5 * q_nom][0]
        raise DataError(f"cell {cell} cycle {bad}: capacity above 1.5 x nominal")
    u = compute_pcl(caps, q_nom)
    u = np.atleast_1d(u)
    failed = np.nonzero(u >= eol_threshold)[0]
    if failed.size:
        stop = failed[0] + 1
        eol_cycle = cycles[failed[0]]
    else:
        stop = len(records)
        eol_cycle = None
        log.info("cell %s never reaches end of life; RUL unavailable", cell)
    raw = np.array([cycle_features(r, window, ic_smooth) for r in records[:stop]])
    raw = raw.reshape(stop, len(FEATURE_NAMES))
    ok = np.all(np.isfinite(raw), axis=1)
    if not np.all(ok):
        log.info("cell %s: dropping %d cycles with missing features", cell, int((~ok).sum()))
    raw, cyc, uu = raw[ok], cycles[:stop][ok], u[:stop][ok]
    x = np.column_stack([kernels.trailing_mean(raw[:, j], ma_window) for j in range(raw.shape[1])]) \
        if raw.shape[0] else raw
    rul = (eol_cycle - cyc).astype(np.float64) if eol_cycle is not None else np.full(cyc.shape, np.nan)
    n = cyc.shape[0]
    return FeatureTable(np.full(n, cell, dtype=object), np.full(n, batch), cyc, x,
                        cyc.astype(np.float64), uu, rul)


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StandardizationFactors:
    x_mean: tuple
    x_std: tuple
    t_mean: float
    t_std: float
    u_mean: float
    u_std: float
    feature_names: tuple = FEATURE_NAMES

    @classmethod
    def fit(cls, x, t, u, feature_names=FEATURE_NAMES) -> "StandardizationFactors":
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        names = tuple(feature_names)
        x_std = x.std(axis=0)
        channels = list(zip(names, x_std)) + [("t", t.std()), ("u", u.std())]
        for name, s in channels:
            if not s > 0:
                raise DataError(f"zero standard deviation on channel {name!r}")
        return cls(tuple(x.mean(axis=0).tolist()), tuple(x_std.tolist()), float(t.mean()),
                   float(t.std()), float(u.mean()), float(u.std()), names)

    @classmethod
    def fit_table(cls, table: FeatureTable, task: str) -> "StandardizationFactors":
        return cls.fit(table.x, table.t, table.labels(task), table.feature_names)

    def apply_x(self, x):
        return (np.asarray(x, dtype=np.float64) - np.array(self.x_mean)) / np.array(self.x_std)

    def apply_t(self, t):
        return (np.asarray(t, dtype=np.float64) - self.t_mean) / self.t_std

    def apply_u(self, u):
        return (np.asarray(u, dtype=np.float64) - self.u_mean) / self.u_std

    def apply(self, x, t, u=None):
        out = (self.apply_x(x), self.apply_t(t))
        return out + (self.apply_u(u),) if u is not None else out

    def invert_x(self, xs):
        return np.asarray(xs) * np.array(self.x_std) + np.array(self.x_mean)

    def invert_t(self, ts):
        return np.asarray(ts) * self.t_std + self.t_mean

    def invert_u(self, us):
        return np.asarray(us) * self.u_std + self.u_mean

    @property
    def rate_scale(self) -> float:
        """Factor converting d(u~)/d(t~) in standardized space to du/dt in label units."""
        return self.u_std / self.t_std

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationFactors":
        return cls(tuple(d["x_mean"]), tuple(d["x_std"]), d["t_mean"], d["t_std"], d["u_mean"],
                   d["u_std"], tuple(d.get("feature_names", FEATURE_NAMES)))


# ---------------------------------------------------------------------------
# case splits
# ---------------------------------------------------------------------------


@dataclass
class Split:
    train: FeatureTable
    validation: FeatureTable
    test: FeatureTable
    test_cells: list = field(default_factory=list)


def _validation_split(table: FeatureTable, fraction: float, rng) -> tuple:
    n = len(table)
    n_val = int(round(fraction * n))
    perm = rng.permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return table.take(train_idx), table.take(val_idx)


def make_splits(case: str, table: FeatureTable, seed: int, task: str = "soh",
                case_c_batch: int | None = None) -> Split:
    """Train / validation / test split for case A, B or C (deterministic per seed)."""
    case = case.upper()
    if case not in CASES:
        raise DataError(f"unknown case {case!r}")
    spec = CASES[case]
    rng = np.random.default_rng(seed)
    present = set(table.cells)
    if case in ("A", "B"):
        needed = list(spec["trainval"]) + list(spec["test"])
        missing = [c for c in needed if c not in present]
        if missing:
            raise DataError(f"case {case} needs cells missing from the dataset: "
                            + ", ".join("#" + c for c in missing))
        trainval = table.only_cells(spec["trainval"])
        test_cells = list(spec["test"])
    else:
        batch = spec["batch"] if case_c_batch is None else case_c_batch
        pool = [c for c in table.cells if int(table.batch[table.cell_id == c][0]) == batch]
        if len(pool) < 2:
            raise DataError(f"case C needs batch-{batch} cells; found {len(pool)}")
        n_test = max(1, int(round(spec["test_fraction"] * len(pool))))
        test_cells = sorted(rng.choice(pool, size=n_test, replace=False).tolist(),
                            key=pool.index)
        trainval = table.only_cells([c for c in pool if c not in test_cells])
    if task == "rul":
        dropped = [c for c in trainval.cells + test_cells
                   if np.isnan(table.only_cells([c]).rul).all()]
        if dropped:
            log.info("excluding cells without end of life from RUL case: %s", dropped)
        trainval = trainval.take(~np.isnan(trainval.rul))
        test_cells = [c for c in test_cells if c not in dropped]
        if not test_cells:
            raise DataError(f"case {case}: no test cell reaches end of life")
    train, val = _validation_split(trainval, spec["val_fraction"], rng)
    test = table.only_cells(test_cells)
    if task == "rul":
        test = test.take(~np.isnan(test.rul))
    return Split(train, val, test, test_cells)


# ---------------------------------------------------------------------------
# on-disk schema
# ---------------------------------------------------------------------------


def curve_path(root, cell_id: str, cycle: int) -> Path:
    return Path(root) / str(cell_id) / "curves" / f"cycle_{cycle:05d}.csv"


def write_cell(root, cell_id: str, records: Sequence[CellCycleRecord]) -> None:
    cell_dir = Path(root) / str(cell_id)
    (cell_dir / "curves").mkdir(parents=True, exist_ok=True)
    summary = pd.DataFrame({
        "cycle": [r.cycle for r in records],
        "discharge_capacity_Ah": [r.discharge_capacity for r in records],
        "charge_time_min": [r.charge_time for r in records],
        "internal_resistance_ohm": [r.internal_resistance for r in records],
        "avg_temperature_C": [r.avg_temperature for r in records],
    })
    summary.to_csv(cell_dir / "summary.csv", index=False, float_format="%.10g")
    for r in records:
        np.savetxt(curve_path(root, cell_id, r.cycle), np.column_stack([r.voltage, r.capacity]),
                   delimiter=",", header=",".join(CURVE_COLUMNS), comments="", fmt="%.8g")


def write_cells_index(root, cells: Sequence[dict]) -> None:
    Path(root).mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(cells), columns=["cell_id", "batch", "policy", "q_nom_Ah"]).to_csv(
        Path(root) / "cells.csv", index=False)


def read_cells_index(root) -> pd.DataFrame:
    path = Path(root) / "cells.csv"
    if not path.exists():
        raise DataError(f"{root}: no cells.csv; run `battpinn ingest` or `battpinn simulate` first")
    return pd.read_csv(path, dtype={"cell_id": str, "policy": str})


def read_cell(root, cell_id: str) -> list[CellCycleRecord]:
    cell_dir = Path(root) / str(cell_id)
    summary = pd.read_csv(cell_dir / "summary.csv")
    missing = set(SUMMARY_COLUMNS) - set(summary.columns)
    if missing:
        raise DataError(f"{cell_dir}/summary.csv: missing columns {sorted(missing)}")
    records = []
    for row in summary.itertuples(index=False):
        cycle = int(row.cycle)
        curve = np.loadtxt(curve_path(root, cell_id, cycle), delimiter=",", skiprows=1, ndmin=2)
        records.append(CellCycleRecord(str(cell_id), cycle, curve[:, 0], curve[:, 1],
                                       float(row.charge_time_min),
                                       float(row.internal_resistance_ohm),
                                       float(row.avg_temperature_C),
                                       float(row.discharge_capacity_Ah)))
    return records


def _cell_features(args) -> FeatureTable:
    root, cell_id, batch, q_nom, opts = args
    return assemble_features(read_cell(root, cell_id), q_nom=q_nom, batch=batch, **opts)


def extract_dataset(root, jobs: int = 1, **opts) -> FeatureTable:
    """Feature table for every cell under ``root``; cells are processed independently."""
    index = read_cells_index(root)
    tasks = [(str(root), str(r.cell_id), int(r.batch), float(r.q_nom_Ah), opts)
             for r in index.itertuples(index=False)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            tables = list(pool.map(_cell_features, tasks))
    else:
        tables = [_cell_features(t) for t in tasks]
    return FeatureTable.concat([t for t in tables if len(t)])


def load_feature_table(path) -> FeatureTable:
    """Feature table from a CSV file, a directory holding ``features.csv``, or a raw dataset."""
    path = Path(path)
    if path.is_file():
        return FeatureTable.from_csv(path)
    if (path / "features.csv").exists():
        return FeatureTable.from_csv(path / "features.csv")
    if (path / "cells.csv").exists():
        return extract_dataset(path)
    raise DataError(f"{path}: no dataset found; run `battpinn ingest` or `battpinn simulate` first")


# ---------------------------------------------------------------------------
# converter for the published 124-cell fast-charging dataset (MATLAB v7.3 files)
# ---------------------------------------------------------------------------

# cleaning conventions of the dataset's reference loader: drop cells with
# bad data, and append five batch-2 cells to the batch-1 cells they continue
_DROP = {1: (8, 10, 12, 13, 22), 2: (), 3: (37, 2, 23, 32, 42, 43)}
_CONTINUATIONS = {7: 0, 8: 1, 9: 2, 15: 3, 16: 4}  # batch-2 index -> batch-1 index
VDLIN = np.linspace(3.6, 2.0, 1000)


def _read_mat_batch(path) -> list[dict]:
    import h5py

    cells = []
    with h5py.File(path, "r") as f:
        batch = f["batch"]
        n = batch["summary"].shape[0]
        for i in range(n):
            policy = f[batch["policy_readable"][i, 0]][()].tobytes()[::2].decode()
            summ = f[batch["summary"][i, 0]]

            def col(name):
                return np.hstack(summ[name][0, :].tolist()).astype(np.float64)

            cyc = f[batch["cycles"][i, 0]]
            curves = []
            for j in range(cyc["Qdlin"].shape[0]):
                qd = np.hstack(f[cyc["Qdlin"][j, 0]][()]).astype(np.float64)
                curves.append(qd)
            cells.append({
                "policy": policy,
                "summary": {
                    "cycle": col("cycle"),
                    "QDischarge": col("QDischarge"),
                    "chargetime": col("chargetime"),
                    "IR": col("IR"),
                    "Tavg": col("Tavg"),
                },
                "curves": curves,
            })
    return cells


def ingest_mat_batches(paths: Sequence, out_dir, q_nom: float = Q_NOM, clean: bool = True) -> list[str]:
    """Convert the dataset's batch files (in batch order) into the CSV schema.

    Cells are numbered 1.. in batch order after cleaning.  Summary rows whose
    discharge capacity is non-positive or above 1.5 x nominal are skipped.
    """
    batches = [_read_mat_batch(p) for p in paths]
    if clean and len(batches) >= 2:
        b1, b2 = batches[0], batches[1]
        for i2, i1 in _CONTINUATIONS.items():
            if i2 < len(b2) and i1 < len(b1):
                first = b1[i1]
                second = b2[i2]
                offset = len(first["curves"])
                for key, arr in second["summary"].items():
                    extra = arr + offset if key == "cycle" else arr
                    first["summary"][key] = np.concatenate([first["summary"][key], extra])
                first["curves"] = first["curves"] + second["curves"]
    ordered = []
    for b, cells in enumerate(batches, start=1):
        drop = set(_DROP.get(b, ())) if clean else set()
        if clean and b == 2 and len(batches) >= 2:
            drop |= set(_CONTINUATIONS)
        ordered += [(b, c) for i, c in enumerate(cells) if i not in drop]
    out_dir = Path(out_dir)
    index = []
    for number, (b, cell) in enumerate(ordered, start=1):
        cid = str(number)
        s = cell["summary"]
        records = []
        n = min(len(s["cycle"]), len(cell["curves"]))
        for k in range(n):
            qk = s["QDischarge"][k]
            if not (0 < qk <= 1.5 * q_nom) or not np.all(np.isfinite(cell["curves"][k])):
                continue
            curve = cell["curves"][k]
            records.append(CellCycleRecord(cid, k + 1, VDLIN[: len(curve)], curve,
                                           float(s["chargetime"][k]), float(s["IR"][k]),
                                           float(s["Tavg"][k]), float(qk)))
        if records:
            write_cell(out_dir, cid, records)
            index.append({"cell_id": cid, "batch": b, "policy": cell["policy"], "q_nom_Ah": q_nom})
    write_cells_index(out_dir, index)
    return [c["cell_id"] for c in index]


def write_factors(path, factors: StandardizationFactors) -> None:
    Path(path).write_text(json.dumps(factors.to_dict(), indent=2))


def read_factors(path) -> StandardizationFactors:
    return StandardizationFactors.from_dict(json.loads(Path(path).read_text()))
