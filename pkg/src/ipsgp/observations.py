"""Training data container, its file formats, and real-data preprocessing."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from .errors import IngestionError, InvalidInputError


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """States and noisy derivative targets on an ``M x L`` grid.

    Attributes
    ----------
    times : (L,) array
    X : (M, L, N, d) array
        Positions.
    V : (M, L, N, d) array or None
        Velocities; ``None`` for first-order data.
    targets : (M, L, N, d) array
        Noisy velocities (first order) or accelerations (second order).
    """

    times: np.ndarray
    X: np.ndarray
    targets: np.ndarray
    V: Optional[np.ndarray] = None
    sigma_true: Optional[float] = None
    seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen(self.times).ravel())
        object.__setattr__(self, "X", _frozen(self.X))
        object.__setattr__(self, "targets", _frozen(self.targets))
        if self.V is not None:
            object.__setattr__(self, "V", _frozen(self.V))
        if self.X.ndim != 4:
            raise InvalidInputError(f"X must be (M, L, N, d), got {self.X.shape}")
        if self.targets.shape != self.X.shape:
            raise InvalidInputError(f"targets shape {self.targets.shape} != X shape {self.X.shape}")
        if self.V is not None and self.V.shape != self.X.shape:
            raise InvalidInputError(f"V shape {self.V.shape} != X shape {self.X.shape}")
        if self.times.size != self.X.shape[1]:
            raise InvalidInputError("one time per snapshot required")
        if np.any(np.diff(self.times) <= 0):
            raise InvalidInputError("times must be strictly increasing")

    M = property(lambda self: self.X.shape[0])
    L = property(lambda self: self.X.shape[1])
    N = property(lambda self: self.X.shape[2])
    d = property(lambda self: self.X.shape[3])

    @property
    def second_order(self) -> bool:
        return self.V is not None

    @property
    def n_obs(self) -> int:
        """Length ``dNML`` of the stacked target vector."""
        return self.targets.size

    @property
    def snapshots(self) -> int:
        return self.M * self.L

    @cached_property
    def data_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self._meta(), sort_keys=True).encode())
        for a in (self.times, self.X, self.V, self.targets):
            if a is not None:
                h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()

    def subset(self, m=None, l=None) -> "ObservationSet":
        """Select trajectories ``m`` and/or snapshot indices ``l``."""
        m = slice(None) if m is None else m
        l = slice(None) if l is None else l
        pick = lambda a: None if a is None else a[m][:, l]  # noqa: E731
        return ObservationSet(
            times=self.times[l],
            X=pick(self.X),
            targets=pick(self.targets),
            V=pick(self.V),
            sigma_true=self.sigma_true,
            seed=self.seed,
        )

    # -- serialization ---------------------------------------------------

    def _meta(self):
        return {
            "M": self.M,
            "L": self.L,
            "N": self.N,
            "d": self.d,
            "second_order": self.second_order,
            "sigma_true": self.sigma_true,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        doc = dict(self._meta())
        doc["times"] = self.times.tolist()
        doc["X"] = self.X.ravel().tolist()
        doc["V"] = None if self.V is None else self.V.ravel().tolist()
        doc["targets"] = self.targets.ravel().tolist()
        return json.dumps(doc, indent=None, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ObservationSet":
        doc = json.loads(text)
        shape = (doc["M"], doc["L"], doc["N"], doc["d"])
        arr = lambda key: np.array(doc[key], dtype=float).reshape(shape)  # noqa: E731
        return cls(
            times=np.array(doc["times"], dtype=float),
            X=arr("X"),
            targets=arr("targets"),
            V=arr("V") if doc["V"] is not None else None,
            sigma_true=doc["sigma_true"],
            seed=doc["seed"],
        )

    def to_csv(self) -> str:
        """Flat CSV, one row per (m, l, agent, coord); metadata in a leading comment."""
        buf = io.StringIO()
        buf.write("# " + json.dumps(self._meta(), sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        header = ["m", "l", "t", "agent", "coord", "x"] + (["v"] if self.second_order else []) + ["target"]
        w.writerow(header)
        for m, l, i, a in np.ndindex(self.X.shape):
            row = [m, l, repr(float(self.times[l])), i, a, repr(float(self.X[m, l, i, a]))]
            if self.second_order:
                row.append(repr(float(self.V[m, l, i, a])))
            row.append(repr(float(self.targets[m, l, i, a])))
            w.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ObservationSet":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# "):
            raise InvalidInputError("CSV is missing its metadata comment line")
        meta = json.loads(lines[0][2:])
        shape = (meta["M"], meta["L"], meta["N"], meta["d"])
        reader = csv.DictReader(lines[1:])
        X = np.full(shape, np.nan)
        V = np.full(shape, np.nan) if meta["second_order"] else None
        Z = np.full(shape, np.nan)
        times = np.full(meta["L"], np.nan)
        for row in reader:
            key = (int(row["m"]), int(row["l"]), int(row["agent"]), int(row["coord"]))
            times[key[1]] = float(row["t"])
            X[key] = float(row["x"])
            Z[key] = float(row["target"])
            if V is not None:
                V[key] = float(row["v"])
        return cls(times=times, X=X, targets=Z, V=V, sigma_true=meta["sigma_true"], seed=meta["seed"])


# ---------------------------------------------------------------------------
# real trajectory data


def read_frames_csv(path_or_text, *, is_text=False) -> np.ndarray:
    """Read ``frame, agent, x, y`` rows into a ``(F, N, 2)`` array.

    Raises
    ------
    IngestionError
        When a frame lacks an agent present elsewhere, or carries duplicates.
    """
    text = path_or_text if is_text else open(path_or_text, newline="").read()
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise IngestionError("no frames found")
    frames = sorted({int(r["frame"]) for r in rows})
    agents = sorted({int(r["agent"]) for r in rows})
    f_index = {f: k for k, f in enumerate(frames)}
    a_index = {a: k for k, a in enumerate(agents)}
    out = np.full((len(frames), len(agents), 2), np.nan)
    for r in rows:
        slot = out[f_index[int(r["frame"])], a_index[int(r["agent"])]]
        if not np.isnan(slot[0]):
            raise IngestionError(f"duplicate agent {r['agent']} in frame {r['frame']}", frame=int(r["frame"]))
        slot[:] = (float(r["x"]), float(r["y"]))
    missing = np.isnan(out).any(axis=(1, 2))
    if missing.any():
        k = int(np.flatnonzero(missing)[0])
        raise IngestionError(f"frame {frames[k]} is missing agents", frame=frames[k])
    return out


def preprocess_real_data(frames, window: int, dt: float, select=None) -> ObservationSet:
    """Turn raw position frames into a second-order ObservationSet.

    Positions are min-max normalized to [0, 1] per coordinate, smoothed with
    a moving average over ``window`` frames (only full windows are kept), and
    differentiated with central differences. ``select`` picks which of the
    resulting interior frames become snapshots (default: all).
    """
    try:
        frames = np.asarray(frames, dtype=float)
    except ValueError as exc:
        raise IngestionError(f"ragged frame data: {exc}") from None
    if frames.ndim != 3:
        raise IngestionError(f"frames must be (F, N, d), got shape {frames.shape}")
    bad = ~np.isfinite(frames).all(axis=(1, 2))
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise IngestionError(f"frame {k} has missing or non-finite positions", frame=k)
    window = int(window)
    if window < 1 or frames.shape[0] < window + 2:
        raise IngestionError(f"need at least window + 2 = {window + 2} frames, got {frames.shape[0]}")
    if not dt > 0:
        raise InvalidInputError("dt must be positive")

    lo = frames.min(axis=(0, 1))
    span = frames.max(axis=(0, 1)) - lo
    span = np.where(span > 0, span, 1.0)
    pos = (frames - lo) / span

    smooth = np.lib.stride_tricks.sliding_window_view(pos, window, axis=0).mean(axis=-1)
    t_smooth = (np.arange(smooth.shape[0]) + 0.5 * (window - 1)) * dt

    vel = (smooth[2:] - smooth[:-2]) / (2.0 * dt)
    acc = (smooth[2:] - 2.0 * smooth[1:-1] + smooth[:-2]) / dt**2
    X = smooth[1:-1]
    times = t_smooth[1:-1]
    if select is not None:
        select = np.asarray(select, dtype=int)
        X, vel, acc, times = X[select], vel[select], acc[select], times[select]
    return ObservationSet(times=times, X=X[None], V=vel[None], targets=acc[None])
