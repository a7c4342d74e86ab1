"""Three-level panel: hospitals, patients within hospitals, monthly slots.

Everything is stored as dense ``(n_patients, K)`` arrays.  Unobserved slots
stay in place with ``observed == False`` and ``y == nan``; covariates are
required at every slot.  The hospital design matrix Z is never formed, each
stacked row simply carries its hospital index.
"""
from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
import math

import numpy as np
import pandas as pd

from .errors import (
    DataError,
    DuplicateSlot,
    EmptyHospital,
    MissingBaseline,
    NonMonotoneDropout,
    UnknownCovariate,
)

CSV_FIXED_COLUMNS = ("hospital_id", "patient_id", "month", "observed", "y")


@dataclass(frozen=True)
class ObservationRecord:
    hospital_id: str
    patient_id: str
    month: int
    observed: bool
    outcome: float | None
    covariates: Mapping[str, float] = field(default_factory=dict)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """Validated panel in canonical order (hospital id, then patient id).

    Attributes
    ----------
    hospital_ids : (N,) str array, sorted; position is the hospital index.
    patient_ids : (N_sub,) str array.
    patient_hospital : (N_sub,) int array of hospital indices.
    observed : (N_sub, K) bool array, the indicator R.
    y : (N_sub, K) float array, nan where unobserved.
    covariates : (N_sub, K, p) float array.
    covariate_names : tuple of p names.
    filled : (N_sub, K) bool array marking forward-filled covariate slots.
    """

    hospital_ids: np.ndarray
    patient_ids: np.ndarray
    patient_hospital: np.ndarray
    observed: np.ndarray
    y: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    filled: np.ndarray

    @property
    def K(self) -> int:
        return self.observed.shape[1]

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    @property
    def n_hospitals(self) -> int:
        return len(self.hospital_ids)

    @property
    def n_patients(self) -> int:
        return len(self.patient_ids)

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.patient_hospital, minlength=self.n_hospitals)

    @property
    def hospital_index(self) -> dict[str, int]:
        return {h: i for i, h in enumerate(self.hospital_ids)}

    def covariate(self, name: str) -> np.ndarray:
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise UnknownCovariate(f"unknown covariate {name!r}") from None
        return self.covariates[:, :, j]

    def subset_hospitals(self, mask: np.ndarray) -> LongitudinalDataset:
        """Dataset restricted to hospitals where ``mask`` is true."""
        mask = np.asarray(mask, dtype=bool)
        keep = mask[self.patient_hospital]
        return from_arrays(
            self.hospital_ids[self.patient_hospital[keep]],
            self.patient_ids[keep],
            self.observed[keep],
            self.y[keep],
            self.covariates[keep],
            self.covariate_names,
            filled=self.filled[keep],
        )

    def to_records(self) -> list[ObservationRecord]:
        out = []
        for i in range(self.n_patients):
            h = str(self.hospital_ids[self.patient_hospital[i]])
            for k in range(self.K):
                obs = bool(self.observed[i, k])
                out.append(ObservationRecord(
                    hospital_id=h,
                    patient_id=str(self.patient_ids[i]),
                    month=k + 1,
                    observed=obs,
                    outcome=float(self.y[i, k]) if obs else None,
                    covariates=dict(zip(self.covariate_names,
                                        map(float, self.covariates[i, k]))),
                ))
        return out


def from_arrays(
    patient_hospital_ids: Sequence,
    patient_ids: Sequence,
    observed: np.ndarray,
    y: np.ndarray,
    covariates: np.ndarray,
    covariate_names: Sequence[str],
    *,
    filled: np.ndarray | None = None,
    hospitals: Iterable | None = None,
) -> LongitudinalDataset:
    """Validate per-patient arrays and put them in canonical order.

    ``hospitals`` optionally lists every hospital that should exist; one
    without patients raises :class:`EmptyHospital`.
    """
    hosp = np.asarray([str(h) for h in patient_hospital_ids], dtype=object)
    pid = np.asarray([str(p) for p in patient_ids], dtype=object)
    observed = np.asarray(observed, dtype=bool)
    y = np.array(y, dtype=float)
    covariates = np.array(covariates, dtype=float)
    n_sub = len(pid)
    if n_sub == 0:
        raise DataError("dataset has no patients")
    if observed.ndim != 2 or observed.shape[0] != n_sub:
        raise DataError("observed must have shape (n_patients, K)")
    K = observed.shape[1]
    if y.shape != observed.shape:
        raise DataError("y must have the same shape as observed")
    names = tuple(covariate_names)
    if covariates.shape != (n_sub, K, len(names)):
        raise DataError(
            f"covariates must have shape {(n_sub, K, len(names))}, got {covariates.shape}"
        )
    if len(set(names)) != len(names):
        raise DataError("duplicate covariate names")
    filled = np.zeros((n_sub, K), bool) if filled is None else np.asarray(filled, bool)

    if not observed[:, 0].all():
        bad = int(np.flatnonzero(~observed[:, 0])[0])
        raise MissingBaseline(
            f"patient {hosp[bad]}/{pid[bad]} has no baseline observation"
        )
    jumps = observed[:, 1:] & ~observed[:, :-1]
    if jumps.any():
        bad = int(np.flatnonzero(jumps.any(axis=1))[0])
        raise NonMonotoneDropout(
            f"patient {hosp[bad]}/{pid[bad]} is observed again after dropout"
        )
    if not np.isfinite(y[observed]).all():
        raise DataError("observed outcomes must be finite")
    if not np.isfinite(covariates).all():
        raise DataError("covariates must be finite at every slot")
    y[~observed] = np.nan

    order = np.lexsort((pid.astype(str), hosp.astype(str)))
    hosp, pid = hosp[order], pid[order]
    same = (hosp[1:] == hosp[:-1]) & (pid[1:] == pid[:-1])
    if same.any():
        bad = int(np.flatnonzero(same)[0])
        raise DuplicateSlot(f"patient {hosp[bad]}/{pid[bad]} appears twice")

    hospital_ids, patient_hospital = np.unique(hosp.astype(str), return_inverse=True)
    if hospitals is not None:
        listed = {str(h) for h in hospitals}
        missing = sorted(listed - set(hospital_ids))
        if missing:
            raise EmptyHospital(f"hospital {missing[0]} has no patients")

    return LongitudinalDataset(
        hospital_ids=_readonly(hospital_ids.astype(object)),
        patient_ids=_readonly(pid),
        patient_hospital=_readonly(patient_hospital.astype(np.int64)),
        observed=_readonly(observed[order]),
        y=_readonly(y[order]),
        covariates=_readonly(covariates[order]),
        covariate_names=names,
        filled=_readonly(filled[order]),
    )


def _forward_fill(cov: np.ndarray, present: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Carry the last present covariate value forward along months."""
    n_sub, K, p = cov.shape
    filled = np.zeros((n_sub, K), bool)
    for k in range(1, K):
        gap = ~present[:, k, :]
        if gap.any():
            cov[:, k, :] = np.where(gap, cov[:, k - 1, :], cov[:, k, :])
            present[:, k, :] |= gap & present[:, k - 1, :]
            filled[:, k] |= gap.any(axis=1)
    return cov, filled


def build_dataset(records: Iterable[ObservationRecord], K: int) -> LongitudinalDataset:
    """Assemble and validate a dataset from individual slot records.

    Slots absent from ``records`` are unobserved.  Covariates missing at an
    unobserved slot are forward-filled from the previous month and flagged.
    """
    records = list(records)
    if not records:
        raise DataError("no records")
    names: list[str] = []
    seen_names: set[str] = set()
    for rec in records:
        for name in rec.covariates:
            if name not in seen_names:
                seen_names.add(name)
                names.append(name)

    keys: dict[tuple[str, str], int] = {}
    for rec in records:
        keys.setdefault((str(rec.hospital_id), str(rec.patient_id)), len(keys))
    n_sub, p = len(keys), len(names)
    observed = np.zeros((n_sub, K), bool)
    y = np.full((n_sub, K), np.nan)
    cov = np.full((n_sub, K, p), np.nan)
    slot_seen = np.zeros((n_sub, K), bool)
    col = {n: j for j, n in enumerate(names)}

    for rec in records:
        i = keys[(str(rec.hospital_id), str(rec.patient_id))]
        k = int(rec.month) - 1
        if not 0 <= k < K:
            raise DataError(f"month {rec.month} outside 1..{K}")
        if slot_seen[i, k]:
            raise DuplicateSlot(
                f"two records for patient {rec.hospital_id}/{rec.patient_id} month {rec.month}"
            )
        slot_seen[i, k] = True
        obs = bool(rec.observed)
        has_outcome = rec.outcome is not None and not (
            isinstance(rec.outcome, float) and math.isnan(rec.outcome)
        )
        if obs != has_outcome:
            raise DataError(
                f"outcome must be present iff observed (patient "
                f"{rec.hospital_id}/{rec.patient_id} month {rec.month})"
            )
        observed[i, k] = obs
        if obs:
            y[i, k] = float(rec.outcome)
        for name, value in rec.covariates.items():
            if value is not None:
                cov[i, k, col[name]] = float(value)

    present = np.isfinite(cov)
    if not present[observed].all():
        raise DataError("covariates must be present at every observed slot")
    cov, filled = _forward_fill(cov, present)
    hosp_of = [h for h, _ in keys]
    pid_of = [p_ for _, p_ in keys]
    return from_arrays(hosp_of, pid_of, observed, y, cov, names, filled=filled)


@dataclass(frozen=True, eq=False)
class DesignView:
    """Stacked rows in (hospital, patient, month) order.

    ``y`` holds 0.0 at unobserved slots so that weight-zero rows stay inert in
    every product; use ``r`` to tell them apart.
    """

    x: np.ndarray
    y: np.ndarray
    r: np.ndarray
    hospital: np.ndarray
    patient: np.ndarray
    month: np.ndarray
    covariate_names: tuple[str, ...]
    cluster_sizes: np.ndarray
    n_filled: int

    @property
    def n_rows(self) -> int:
        return len(self.y)

    @property
    def n_hospitals(self) -> int:
        return len(self.cluster_sizes)

    @property
    def n_patients(self) -> int:
        return int(self.cluster_sizes.sum())

    @property
    def K(self) -> int:
        return self.n_rows // max(self.n_patients, 1)


def design_view(
    ds: LongitudinalDataset,
    covariates: Sequence[str] | None = None,
    *,
    allow_empty: bool = False,
) -> DesignView:
    """Stack the selected covariates, outcome and indicator into rows.

    ``covariates=None`` selects every covariate in dataset order.
    """
    names = ds.covariate_names if covariates is None else tuple(covariates)
    if not names and not allow_empty:
        raise UnknownCovariate("empty covariate selection")
    idx = []
    for name in names:
        if name not in ds.covariate_names:
            raise UnknownCovariate(f"unknown covariate {name!r}")
        idx.append(ds.covariate_names.index(name))
    n_sub, K = ds.observed.shape
    x = ds.covariates[:, :, idx].reshape(n_sub * K, len(idx))
    r = ds.observed.reshape(-1)
    y = np.where(r, np.nan_to_num(ds.y.reshape(-1)), 0.0)
    patient = np.repeat(np.arange(n_sub), K)
    return DesignView(
        x=_readonly(x),
        y=_readonly(y),
        r=_readonly(r),
        hospital=_readonly(ds.patient_hospital[patient]),
        patient=_readonly(patient),
        month=_readonly(np.tile(np.arange(1, K + 1), n_sub)),
        covariate_names=names,
        cluster_sizes=_readonly(ds.cluster_sizes),
        n_filled=int(ds.filled.sum()),
    )


@dataclass(frozen=True)
class RankReport:
    covariate_names: tuple[str, ...]
    constant_within_hospital: tuple[bool, ...]
    rank: int
    rank_deficient: bool
    n_filled: int

    @property
    def unidentifiable(self) -> tuple[str, ...]:
        return tuple(n for n, c in zip(self.covariate_names, self.constant_within_hospital) if c)


def group_sums(values: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    """Column sums per group label, reduced in row order (bit-stable)."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return np.bincount(groups, weights=values, minlength=n_groups)
    out = np.empty((n_groups, values.shape[1]))
    for j in range(values.shape[1]):
        out[:, j] = np.bincount(groups, weights=values[:, j], minlength=n_groups)
    return out


def check_within_hospital_variation(view: DesignView, rtol: float = 1e-10) -> RankReport:
    """Flag covariates that hospital intercepts would absorb.

    Uses observed rows only.  A covariate is constant within hospitals when
    its within-hospital centred version is numerically zero; the design is
    rank deficient when the centred matrix has a singular value below
    ``rtol`` times the largest.
    """
    r = view.r
    x, h = view.x[r], view.hospital[r]
    counts = np.bincount(h, minlength=view.n_hospitals).astype(float)
    means = group_sums(x, h, view.n_hospitals) / np.maximum(counts, 1)[:, None]
    xc = x - means[h]
    scale = np.maximum(np.abs(x).max(axis=0, initial=0.0), 1.0)
    constant = tuple(bool(v) for v in (np.abs(xc).max(axis=0, initial=0.0) <= 1e-12 * scale))
    p = x.shape[1]
    if p == 0 or len(x) == 0:
        rank = 0
    else:
        s = np.linalg.svd(xc, compute_uv=False)
        rank = int((s > rtol * s[0]).sum()) if s[0] > 0 else 0
    return RankReport(
        covariate_names=view.covariate_names,
        constant_within_hospital=constant,
        rank=rank,
        rank_deficient=rank < p,
        n_filled=view.n_filled,
    )


def read_csv(path) -> LongitudinalDataset:
    """Read the long-format CSV (one row per patient-month)."""
    return from_frame(read_frame(path))


def read_frame(path) -> pd.DataFrame:
    """Raw CSV contents with ids kept as strings and blanks as missing."""
    return pd.read_csv(path, dtype={"hospital_id": str, "patient_id": str},
                       keep_default_na=False, na_values=[""], float_precision="round_trip")


def from_frame(frame: pd.DataFrame) -> LongitudinalDataset:
    """Build a dataset from long-format rows.

    Every column other than the fixed ones is a covariate.  Error messages
    cite the CSV line, taken from the frame index (index 0 is line 2).
    """
    frame = frame.copy()
    missing = [c for c in CSV_FIXED_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"CSV is missing required column(s): {', '.join(missing)}")
    if frame.empty:
        raise DataError("CSV has no data rows")

    def line(mask):
        return int(frame.index[np.flatnonzero(np.asarray(mask))[0]]) + 2

    names = [c for c in frame.columns if c not in CSV_FIXED_COLUMNS]
    for c in ("month", "observed"):
        bad = pd.to_numeric(frame[c], errors="coerce").isna()
        if bad.any():
            raise DataError(f"row {line(bad)}: bad {c} value")
    for c in ["y", *names]:
        num = pd.to_numeric(frame[c], errors="coerce")
        bad = num.isna() & frame[c].notna()
        if bad.any():
            raise DataError(f"row {line(bad)}: non-numeric {c}")
        frame[c] = num
    obs = pd.to_numeric(frame["observed"])
    if not obs.isin([0, 1]).all():
        raise DataError(f"row {line(~obs.isin([0, 1]))}: observed must be 0/1")
    obs = obs.astype(int)
    flagged = (obs == 1) == frame["y"].isna()
    if flagged.any():
        raise DataError(f"row {line(flagged)}: y must be present iff observed=1")
    month = pd.to_numeric(frame["month"])
    if (month < 1).any() or (month != month.round()).any():
        raise DataError(f"row {line((month < 1) | (month != month.round()))}: "
                        "month must be a positive integer")
    K = int(month.max())

    records = [
        ObservationRecord(
            hospital_id=h, patient_id=p_, month=int(m), observed=bool(o),
            outcome=None if not o else float(yv),
            covariates={n: (None if np.isnan(v) else float(v)) for n, v in zip(names, cv)},
        )
        for h, p_, m, o, yv, *cv in zip(frame["hospital_id"], frame["patient_id"], month, obs,
                                        frame["y"], *(frame[n] for n in names))
    ]
    return build_dataset(records, K)


def to_frame(ds: LongitudinalDataset) -> pd.DataFrame:
    n_sub, K = ds.observed.shape
    cols = {
        "hospital_id": np.repeat(ds.hospital_ids[ds.patient_hospital], K),
        "patient_id": np.repeat(ds.patient_ids, K),
        "month": np.tile(np.arange(1, K + 1), n_sub),
        "observed": ds.observed.reshape(-1).astype(int),
        "y": ds.y.reshape(-1),
    }
    for j, name in enumerate(ds.covariate_names):
        cols[name] = ds.covariates[:, :, j].reshape(-1)
    return pd.DataFrame(cols)


def write_csv(ds: LongitudinalDataset, path) -> None:
    # repr-precision floats so a read-back reproduces the dataset exactly
    to_frame(ds).to_csv(path, index=False, float_format="%.17g")
