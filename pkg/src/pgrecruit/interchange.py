"""Patient-level CSV interchange.

One row per patient with columns ``centre_id, opening_time, arrival_time,
last_seen_time, status``. A row with a blank ``arrival_time`` declares a
centre that has no patients. ``status`` may be omitted for instant-dropout
data; a blank ``last_seen_time`` then marks a patient lost on arrival and any
other row a randomized one.

Reading a table back at an interim time ``t1`` censors it: later arrivals are
dropped and outcomes recorded after ``t1`` become ``IN_SCREENING``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .trial import STATUS_CODE, STATUS_ORDER, InterimSnapshot, Status, Trial, classify_arrays

PATIENT_COLUMNS = ["centre_id", "opening_time", "arrival_time", "last_seen_time", "status"]
LATENT_COLUMNS = ["centre_id", "opening_time", "lambda", "r", "theta"]

_RAND = STATUS_CODE[Status.RANDOMIZED]
_LOST_ARR = STATUS_CODE[Status.LOST_ON_ARRIVAL]
_LOST_SCR = STATUS_CODE[Status.LOST_IN_SCREENING]
_PEND = STATUS_CODE[Status.IN_SCREENING]


class DataError(ValueError):
    """Malformed patient data, or data that cannot support the requested model."""


def _num(v):
    return repr(float(v))


def write_patients(trial: Trial, path, at=None):
    """Write every arrival up to ``at`` (default: the horizon) with its status at that time."""
    at = trial.config.horizon if at is None else float(at)
    u = trial.config.centre_openings
    seen = trial.arrival <= at
    code, last = classify_arrays(trial.arrival[seen], trial.chi[seen], trial.z[seen],
                                 trial.config.screening_window, at)
    centre, arrival = trial.centre[seen], trial.arrival[seen]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PATIENT_COLUMNS)
        for i in np.setdiff1d(np.arange(len(u)), centre):
            w.writerow([int(i), _num(u[i]), "", "", ""])
        rows = sorted(zip(centre.tolist(), arrival.tolist(), last.tolist(), code.tolist()))
        for c, a, ls, s in rows:
            w.writerow([c, _num(u[c]), _num(a), _num(ls), STATUS_ORDER[s].value])


def write_latents(trial: Trial, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LATENT_COLUMNS)
        for c in trial.centres():
            theta = "" if c.theta is None else _num(c.theta)
            w.writerow([c.centre_id, _num(trial.config.centre_openings[c.centre_id]), _num(c.lam), _num(c.r), theta])


@dataclass(frozen=True)
class PatientTable:
    """Parsed patient CSV; ``status`` holds the codes of ``STATUS_ORDER``."""

    centre_ids: tuple
    openings: np.ndarray
    centre: np.ndarray
    arrival: np.ndarray
    last_seen: np.ndarray      # nan where blank
    status: np.ndarray
    has_last_seen: bool
    has_status: bool

    @property
    def screening_window(self) -> float:
        """Delay between arrival and randomization, read off the randomized rows."""
        rand = self.status == _RAND
        if not rand.any():
            return 0.0
        gaps = self.last_seen[rand] - self.arrival[rand]
        R = float(f"{np.median(gaps):.12g}")
        if np.any(np.abs(gaps - R) > 1e-6 * max(1.0, R)):
            raise DataError("randomized rows imply different screening windows")
        return max(R, 0.0)

    def snapshot(self, t1: float) -> InterimSnapshot:
        """Sufficient statistics of the data censored at ``t1``."""
        if not t1 > 0:
            raise DataError("t1 must be > 0")
        R = self.screening_window
        seen = self.arrival <= t1
        arrival, last, code = self.arrival[seen], self.last_seen[seen].copy(), self.status[seen].copy()
        late = ((code == _RAND) | (code == _LOST_SCR)) & (last > t1)
        code[late] = _PEND
        pend = code == _PEND
        last[pend] = t1
        last[code == _LOST_ARR] = arrival[code == _LOST_ARR]
        return InterimSnapshot.from_status(t1, R, self.openings, self.centre[seen], arrival, code, last)

    def require_screening(self):
        """Raise unless the table carries what screening models (B1/B2/B3) need."""
        if not (self.has_status and self.has_last_seen):
            raise DataError("screening models need both last_seen_time and status columns")
        if self.screening_window <= 0:
            raise DataError("screening models need a positive screening window in the data")


def _parse_float(text, where):
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{where}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{where}: must be finite")
    return v


def read_patients(path) -> PatientTable:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        missing = {"centre_id", "opening_time", "arrival_time"} - set(cols)
        if missing:
            raise DataError(f"missing required column(s): {', '.join(sorted(missing))}")
        unknown = set(cols) - set(PATIENT_COLUMNS)
        if unknown:
            raise DataError(f"unknown column(s): {', '.join(sorted(unknown))}")
        has_last, has_status = "last_seen_time" in cols, "status" in cols
        openings, rows = {}, []
        for line, row in enumerate(reader, start=2):
            where = f"line {line}"
            cid = (row["centre_id"] or "").strip()
            if not cid:
                raise DataError(f"{where}: blank centre_id")
            u = _parse_float(row["opening_time"], f"{where} opening_time")
            if openings.setdefault(cid, u) != u:
                raise DataError(f"{where}: centre {cid} has conflicting opening times")
            arr_text = (row["arrival_time"] or "").strip()
            if not arr_text:
                continue
            arr = _parse_float(arr_text, f"{where} arrival_time")
            if arr < u:
                raise DataError(f"{where}: arrival before the centre opens")
            last_text = (row.get("last_seen_time") or "").strip() if has_last else ""
            last = _parse_float(last_text, f"{where} last_seen_time") if last_text else math.nan
            st_text = (row.get("status") or "").strip() if has_status else ""
            if st_text:
                try:
                    code = STATUS_CODE[Status(st_text.upper())]
                except ValueError:
                    raise DataError(f"{where}: unknown status {st_text!r}") from None
            elif has_last:
                code = _LOST_ARR if math.isnan(last) else _RAND
            else:
                raise DataError(f"{where}: patient outcome needs a status or last_seen_time")
            if code != _LOST_ARR and code != _PEND and math.isnan(last):
                raise DataError(f"{where}: status {STATUS_ORDER[code].value} needs last_seen_time")
            if not math.isnan(last) and last < arr:
                raise DataError(f"{where}: last_seen_time before arrival_time")
            rows.append((cid, arr, last, code))
    if not openings:
        raise DataError("no centres in file")

    def key(c):
        return (0, int(c), c) if c.lstrip("-").isdigit() else (1, 0, c)

    ids = tuple(sorted(openings, key=key))
    index = {c: i for i, c in enumerate(ids)}
    rows.sort(key=lambda r: (index[r[0]], r[1]))
    return PatientTable(
        centre_ids=ids,
        openings=np.array([openings[c] for c in ids]),
        centre=np.array([index[r[0]] for r in rows], dtype=np.int64),
        arrival=np.array([r[1] for r in rows], dtype=float),
        last_seen=np.array([r[2] for r in rows], dtype=float),
        status=np.array([r[3] for r in rows], dtype=np.int8),
        has_last_seen=has_last,
        has_status=has_status,
    )
