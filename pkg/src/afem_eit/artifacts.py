"""On-disk formats: data bundles, run directories and CSV tables.

Floats are written with ``repr`` so every table round-trips exactly and reruns
produce byte-identical files.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .afem import LevelRecord, RunResult, fit_rate, fit_window
from .config import ExperimentConfig, dump_config
from .inversion import TRACE_HEADER
from .mesh import ELECTRODE_LENGTH, ELECTRODE_PERIOD, N_ELECTRODES, write_mesh

BUNDLE_FILES = ("exact.csv", "noisy.csv", "draws.csv", "meta.txt")


class BundleError(ValueError):
    """Missing, malformed or mismatched data bundle."""


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise BundleError(f"{path} is empty")
    return rows[0], rows[1:]


def write_voltages(path, values) -> None:
    """(J, L) array as ``pattern,electrode,value`` with 1-based indices."""
    values = np.atleast_2d(values)
    rows = ((j + 1, l + 1, values[j, l]) for j in range(values.shape[0]) for l in range(values.shape[1]))
    write_csv(path, ("pattern", "electrode", "value"), rows)


def read_voltages(path) -> np.ndarray:
    header, rows = read_csv(path)
    if header != ["pattern", "electrode", "value"]:
        raise BundleError(f"{path}: unexpected header {header}")
    idx = np.array([[int(r[0]), int(r[1])] for r in rows])
    out = np.zeros((idx[:, 0].max(), idx[:, 1].max()))
    out[idx[:, 0] - 1, idx[:, 1] - 1] = [float(r[2]) for r in rows]
    return out


def electrode_layout_hash() -> str:
    text = f"L={N_ELECTRODES} length={ELECTRODE_LENGTH!r} period={ELECTRODE_PERIOD!r} start=(-1,-1) ccw"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def write_meta(path, items: dict) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in items.items()))


def read_meta(path) -> dict:
    meta = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            key, value = (s.strip() for s in line.split("=", 1))
            meta[key] = value
    return meta


@dataclass
class DataBundle:
    exact: np.ndarray
    noisy: np.ndarray
    draws: np.ndarray
    meta: dict

    @property
    def example(self) -> int:
        return int(self.meta["example"])


def write_bundle(out, config: ExperimentConfig, exact, noisy, draws, data_dof: int) -> str:
    """Write a data bundle and return the sha256 checksum of its files."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_voltages(out / "exact.csv", exact)
    write_voltages(out / "noisy.csv", noisy)
    write_voltages(out / "draws.csv", draws)
    support = "(0.25,0.75)x(0,0.5)" if config.example == 3 else "domain"
    write_meta(out / "meta.txt", {
        "example": config.example,
        "epsilon": repr(config.epsilon),
        "seed": config.seed,
        "n_patterns": config.n_patterns,
        "dof": data_dof,
        "noise_max": "per-pattern",
        "penalty_support": support,
        "electrode_layout": electrode_layout_hash(),
    })
    return bundle_checksum(out)


def bundle_checksum(path) -> str:
    h = hashlib.sha256()
    for name in BUNDLE_FILES:
        h.update(name.encode())
        h.update((Path(path) / name).read_bytes())
    return h.hexdigest()


def read_bundle(path) -> DataBundle:
    path = Path(path)
    missing = [n for n in BUNDLE_FILES if not (path / n).is_file()]
    if missing:
        raise BundleError(f"data bundle {path} lacks {', '.join(missing)}")
    meta = read_meta(path / "meta.txt")
    if meta.get("electrode_layout") != electrode_layout_hash():
        raise BundleError(f"data bundle {path} was generated for a different electrode layout")
    return DataBundle(read_voltages(path / "exact.csv"), read_voltages(path / "noisy.csv"),
                      read_voltages(path / "draws.csv"), meta)


# -- run directories -----------------------------------------------------------

ERROR_HEADER = ("level", "dof", "l2", "h1")
ESTIMATOR_HEADER = ("element", "eta1_sq", "eta2_sq", "eta3_sq", "marked")


def write_run(out, run: RunResult, config: ExperimentConfig, errors=None) -> None:
    """Serialize a run: tables, per-level meshes with sigma, estimators, traces."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dump_config(config))
    write_csv(out / "levels.csv", LevelRecord.columns(), (r.row() for r in run.records))
    for k, record in enumerate(run.records):
        tag = f"level_{k:02d}"
        write_csv(out / "traces" / f"{tag}.csv", TRACE_HEADER, run.traces[k])
        est = run.estimators[k]
        marked = np.zeros(len(est.eta1_sq), dtype=bool)
        marked[run.marked[k]] = True
        write_csv(out / "estimators" / f"{tag}.csv", ESTIMATOR_HEADER,
                  zip(range(len(marked)), est.eta1_sq, est.eta2_sq, est.eta3_sq, marked))
        (out / "meshes").mkdir(exist_ok=True)
        write_mesh(out / "meshes" / f"{tag}.mesh", run.meshes[k], {"sigma": run.sigmas[k]})
    if run.final_state is not None:
        write_voltages(out / "voltages.csv", run.final_state.evaluation.U)
    if errors is not None:
        write_csv(out / "errors.csv", ERROR_HEADER, zip(range(len(errors.dof)), errors.dof, errors.l2, errors.h1))
    # wall times vary between reruns, so they stay out of the CSV outputs
    (out / "timings.log").write_text(
        "".join(f"level {k} seconds {t:.3f}\n" for k, t in enumerate(run.timings))
        + f"stop {run.stop_reason}\n"
    )


def read_errors(run_dir) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    path = Path(run_dir) / "errors.csv"
    if not path.is_file():
        raise BundleError(f"{run_dir} has no errors.csv (runs need at least 4 levels)")
    header, rows = read_csv(path)
    if tuple(header) != ERROR_HEADER:
        raise BundleError(f"{path}: unexpected header {header}")
    arr = np.array([[float(v) for v in r[1:]] for r in rows])
    if len(arr) < 4:
        raise BundleError(f"{path}: need at least 4 levels, found {len(arr)}")
    return arr[:, 0], arr[:, 1], arr[:, 2]


def rates_table(run_dirs: dict) -> list[tuple[str, str, float]]:
    """Fitted rates ``(run, norm, rate)`` for each named run directory."""
    rows = []
    for name, run_dir in run_dirs.items():
        dof, l2, h1 = read_errors(run_dir)
        window = fit_window(len(dof))
        rows.append((name, "L2", fit_rate(dof[window], l2[window])))
        rows.append((name, "H1", fit_rate(dof[window], h1[window])))
    return rows
