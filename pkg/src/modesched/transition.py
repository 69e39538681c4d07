"""Offline transition-operator tables and the sliding-window update.

For each mode j the tables store, on a uniform time grid, the state
transition matrix from the horizon start, its inverse, and the adjoint
transition matrix to the horizon end (the operator that carries the
quadratic cost-to-go factor backward). All later state/co-state evaluation
is pure table algebra; this module is the only place where the mode ODEs are
integrated.

Unstable modes whose transition matrices grow past ``ANCHOR_NORM_LIMIT`` are
re-anchored at interior grid points: samples are stored relative to the most
recent anchor and queries compose across anchors, which keeps the stored and
inverted matrices well conditioned.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from ._integrate import METER, chunk_atms, chunk_stms
from .errors import NumericalError, TableRangeError
from .model import QuadraticCost, SwitchedLinearSystem

ANCHOR_NORM_LIMIT = 1e8
INVERSE_RESIDUAL_LIMIT = 1e-8
CACHE_FORMAT_VERSION = 1

DEFAULT_FINE_STEP = 1e-4
DEFAULT_SPACING = 1e-3


class _Interp:
    """Entrywise interpolation over (S, n, n) samples on a uniform grid."""

    def __init__(self, times: np.ndarray, values: np.ndarray, kind: str):
        self.times = times
        self.values = values
        self.kind = kind
        if kind == "cubic" and times.size >= 4:
            self._spline = CubicSpline(times, values, axis=0)
        else:
            self._spline = None

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        tq = np.atleast_1d(t)
        if self._spline is not None:
            out = self._spline(tq)
        else:
            grid = self.times
            idx = np.clip(np.searchsorted(grid, tq, side="right") - 1, 0, grid.size - 2)
            w = (tq - grid[idx]) / (grid[idx + 1] - grid[idx])
            w = w[:, None, None]
            out = (1.0 - w) * self.values[idx] + w * self.values[idx + 1]
        # boundary samples are contract-exact (identity / zero); bypass the
        # polynomial arithmetic there
        for bound, value in ((self.times[0], self.values[0]), (self.times[-1], self.values[-1])):
            hit = tq == bound
            if np.any(hit):
                out[hit] = value
        return out[0] if scalar else out


@dataclass(frozen=True)
class _StmSegment:
    """STM samples relative to one anchor time."""

    start: int  # first sample index covered
    stop: int  # last sample index covered (inclusive)
    phi: np.ndarray  # (stop-start+1, n, n), phi[r] = transition from anchor
    phi_inv: np.ndarray
    interp_phi: _Interp
    interp_inv: _Interp


@dataclass(frozen=True)
class _ModeStm:
    segments: tuple[_StmSegment, ...]
    # links[k] = transition matrix from anchor k to anchor k+1
    links: tuple[np.ndarray, ...]

    @property
    def anchored(self) -> bool:
        return len(self.segments) > 1


@dataclass(frozen=True)
class TransitionTables:
    """Sampled transition operators for every mode over one horizon."""

    t0: float
    tM: float
    spacing: float
    samples: np.ndarray  # (S,) uniform grid incl. both endpoints
    fine_step: float
    interp: str  # "cubic" | "linear"
    stm: tuple[_ModeStm, ...]  # per mode
    atm_samples: tuple[np.ndarray, ...]  # per mode, (S, n, n)
    atm_interp: tuple[_Interp, ...]

    @property
    def n_modes(self) -> int:
        return len(self.stm)

    @property
    def n_cells(self) -> int:
        return self.samples.size - 1

    @property
    def n(self) -> int:
        return self.atm_samples[0].shape[-1]

    def _check_range(self, *times):
        eps = 1e-9 * max(1.0, abs(self.tM))
        lo, hi = self.t0 - eps, self.tM + eps
        for t in times:
            if isinstance(t, float):
                bad = t < lo or t > hi
            else:
                t = np.asarray(t)
                bad = (t.min() < lo or t.max() > hi) if t.size else False
            if bad:
                raise TableRangeError(
                    f"query time outside table range [{self.t0}, {self.tM}]"
                )

    def _segment_of(self, mode: _ModeStm, t: float) -> int:
        for k, seg in enumerate(mode.segments):
            if t <= self.samples[seg.stop] or k == len(mode.segments) - 1:
                return k
        return len(mode.segments) - 1

    def stm_at(self, j: int, t):
        """Transition matrix from the horizon start, phi_j(t, t0).

        Only available when mode j required no interior re-anchoring.
        """
        mode = self.stm[j - 1]
        if mode.anchored:
            raise NumericalError(
                f"mode {j} was re-anchored (unstable over this horizon); "
                "use stm_between for relative queries"
            )
        self._check_range(t)
        return mode.segments[0].interp_phi(t)

    def stm_inv_at(self, j: int, t):
        mode = self.stm[j - 1]
        if mode.anchored:
            raise NumericalError(f"mode {j} was re-anchored; use stm_between")
        self._check_range(t)
        return mode.segments[0].interp_inv(t)

    def stm_between(self, j: int, t, s):
        """phi_j(t, s): maps the state at time s to the state at time t under
        mode j alone. Either argument may be an array (both arrays must have
        matching length and pair elementwise)."""
        self._check_range(t, s)
        mode = self.stm[j - 1]
        t_arr = np.asarray(t, dtype=float)
        s_arr = np.asarray(s, dtype=float)
        if not mode.anchored:
            seg = mode.segments[0]
            return seg.interp_phi(t) @ seg.interp_inv(s)
        if t_arr.ndim == 0 and s_arr.ndim == 0:
            return self._stm_between_anchored(mode, float(t), float(s))
        tv, sv = np.broadcast_arrays(t_arr, s_arr)
        return np.stack([
            self._stm_between_anchored(mode, float(a), float(b))
            for a, b in zip(tv.ravel(), sv.ravel())
        ]).reshape(tv.shape + (self.n, self.n))

    def _stm_between_anchored(self, mode: _ModeStm, t: float, s: float) -> np.ndarray:
        p = self._segment_of(mode, t)
        q = self._segment_of(mode, s)
        if p < q:
            return np.linalg.inv(self._stm_between_anchored(mode, s, t))
        out = mode.segments[p].interp_phi(t)
        for k in range(p - 1, q - 1, -1):
            out = out @ mode.links[k]
        return out @ mode.segments[q].interp_inv(s)

    def atm_at(self, j: int, t):
        """Adjoint transition matrix psi_j(t, tM)."""
        self._check_range(t)
        return self.atm_interp[j - 1](t)

    def stm_factors(self, j: int):
        """(interp_phi, interp_inv) anchored at the window start, or None
        when mode j required interior re-anchoring (callers then fall back
        to composed stm_between queries)."""
        mode = self.stm[j - 1]
        if mode.anchored:
            return None
        seg = mode.segments[0]
        return seg.interp_phi, seg.interp_inv

    def atm_between(self, j: int, t, s):
        """psi_j(t, s) for t <= s, from stored end-anchored samples."""
        self._check_range(t, s)
        phi_st = self.stm_between(j, s, t)
        psi_t = self.atm_at(j, t)
        psi_s = self.atm_at(j, s)
        return psi_t - np.swapaxes(phi_st, -1, -2) @ psi_s @ phi_st

    def content_key(self) -> dict:
        return {
            "t0": self.t0,
            "tM": self.tM,
            "spacing": self.spacing,
            "fine_step": self.fine_step,
            "interp": self.interp,
        }


def _mode_eval_fn(sys: SwitchedLinearSystem, j: int):
    def ev(times):
        return sys.mode_matrix(j, times)

    return ev


def _q_eval_fn(cost: QuadraticCost):
    const = all(e.is_constant for row in cost.Q for e in row)
    if const:
        Q0 = cost.q_matrix(0.0)

        def ev_const(times):
            times = np.asarray(times)
            return np.broadcast_to(Q0, times.shape + Q0.shape)

        return ev_const
    return cost.q_matrix


def _assemble_stm(samples: np.ndarray, cells: np.ndarray, interp: str) -> _ModeStm:
    """Prefix-compose per-cell transition matrices into anchored segments."""
    S = samples.size
    n = cells.shape[-1]
    segments = []
    links = []
    seg_start = 0
    acc = [np.eye(n)]
    for g in range(S - 1):
        nxt = cells[g] @ acc[-1]
        if not np.all(np.isfinite(nxt)):
            raise NumericalError("transition matrix diverged during table build")
        if np.max(np.abs(nxt)) > ANCHOR_NORM_LIMIT and len(acc) > 1:
            segments.append((seg_start, seg_start + len(acc) - 1, np.stack(acc)))
            links.append(acc[-1])
            seg_start = g
            acc = [np.eye(n), cells[g]]
        else:
            acc.append(nxt)
    segments.append((seg_start, seg_start + len(acc) - 1, np.stack(acc)))

    built = []
    for start, stop, phi in segments:
        phi[0] = np.eye(n)
        try:
            phi_inv = np.linalg.inv(phi)
        except np.linalg.LinAlgError as e:
            raise NumericalError(f"singular transition-matrix sample: {e}") from e
        residual = np.max(np.abs(phi @ phi_inv - np.eye(n)))
        if residual > INVERSE_RESIDUAL_LIMIT:
            raise NumericalError(
                f"stored inverse residual {residual:.2e} exceeds {INVERSE_RESIDUAL_LIMIT}"
            )
        times = samples[start : stop + 1]
        built.append(
            _StmSegment(
                start=start,
                stop=stop,
                phi=phi,
                phi_inv=phi_inv,
                interp_phi=_Interp(times, phi, interp),
                interp_inv=_Interp(times, phi_inv, interp),
            )
        )
    return _ModeStm(segments=tuple(built), links=tuple(links))


def _assemble_atm(cells_psi: np.ndarray, cells_phi: np.ndarray) -> np.ndarray:
    """Accumulate per-cell adjoint matrices backward to end-anchored samples."""
    G = cells_psi.shape[0]
    n = cells_psi.shape[-1]
    out = np.empty((G + 1, n, n))
    out[G] = 0.0
    acc = np.zeros((n, n))
    for g in range(G - 1, -1, -1):
        acc = cells_psi[g] + cells_phi[g].T @ acc @ cells_phi[g]
        out[g] = acc
    out = 0.5 * (out + np.swapaxes(out, -1, -2))
    out[G] = 0.0
    if not np.all(np.isfinite(out)):
        raise NumericalError("adjoint-transition table diverged during build")
    return out


def build_stm(sys: SwitchedLinearSystem, t0: float, tM: float, *,
              spacing: float = DEFAULT_SPACING,
              fine_step: float = DEFAULT_FINE_STEP) -> list[np.ndarray]:
    """Per-mode forward transition-matrix samples phi_j(t_h, t0) on the table
    grid (modes that trip the conditioning guard raise NumericalError here;
    use build_tables for anchored storage)."""
    samples = _table_grid(t0, tM, spacing)
    out = []
    for j in range(1, sys.N + 1):
        cells = chunk_stms(_mode_eval_fn(sys, j), samples, fine_step)
        mode = _assemble_stm(samples, cells, "cubic")
        if mode.anchored:
            raise NumericalError(f"mode {j} exceeds norm limit; requires anchored tables")
        out.append(mode.segments[0].phi)
    return out


def build_atm(sys: SwitchedLinearSystem, cost: QuadraticCost, t0: float, tM: float, *,
              spacing: float = DEFAULT_SPACING,
              fine_step: float = DEFAULT_FINE_STEP) -> list[np.ndarray]:
    """Per-mode adjoint-transition samples psi_j(t_h, tM) on the table grid."""
    samples = _table_grid(t0, tM, spacing)
    q_eval = _q_eval_fn(cost)
    out = []
    for j in range(1, sys.N + 1):
        cells_psi = chunk_atms(_mode_eval_fn(sys, j), q_eval, samples, fine_step)
        cells_phi = chunk_stms(_mode_eval_fn(sys, j), samples, fine_step)
        out.append(_assemble_atm(cells_psi, cells_phi))
    return out


def _table_grid(t0: float, tM: float, spacing: float) -> np.ndarray:
    cells = max(2, int(round((tM - t0) / spacing)))
    return np.linspace(float(t0), float(tM), cells + 1)


def build_tables(sys: SwitchedLinearSystem, cost: QuadraticCost,
                 t0: float | None = None, tM: float | None = None, *,
                 spacing: float = DEFAULT_SPACING,
                 fine_step: float = DEFAULT_FINE_STEP,
                 interp: str = "cubic") -> TransitionTables:
    """Build the full operator tables for every mode over [t0, tM]."""
    t0 = cost.t0 if t0 is None else float(t0)
    tM = cost.tM if tM is None else float(tM)
    if not tM > t0:
        raise ValueError("empty horizon")
    if interp not in ("cubic", "linear"):
        raise ValueError("interp must be 'cubic' or 'linear'")
    samples = _table_grid(t0, tM, spacing)
    actual_spacing = float(samples[1] - samples[0])
    q_eval = _q_eval_fn(cost)
    stms = []
    atms = []
    atm_interp = []
    for j in range(1, sys.N + 1):
        ev = _mode_eval_fn(sys, j)
        cells_phi = chunk_stms(ev, samples, fine_step)
        cells_psi = chunk_atms(ev, q_eval, samples, fine_step)
        stms.append(_assemble_stm(samples, cells_phi, interp))
        psi = _assemble_atm(cells_psi, cells_phi)
        atms.append(psi)
        atm_interp.append(_Interp(samples, psi, interp))
    return TransitionTables(
        t0=t0,
        tM=tM,
        spacing=actual_spacing,
        samples=samples,
        fine_step=fine_step,
        interp=interp,
        stm=tuple(stms),
        atm_samples=tuple(atms),
        atm_interp=tuple(atm_interp),
    )


def window_advance(tables: TransitionTables, sys: SwitchedLinearSystem,
                   cost: QuadraticCost, delta: float) -> TransitionTables:
    """Slide the table window by delta using the splice identities.

    Fresh integration covers only [tM, tM + delta]; everything else is
    recombination of stored samples. ``delta`` must be a whole number of
    table cells (and may be 0, returning the tables unchanged).
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    shift = int(round(delta / tables.spacing))
    if abs(shift * tables.spacing - delta) > 1e-9:
        raise ValueError(
            f"delta={delta} is not a multiple of the table spacing {tables.spacing}"
        )
    if shift == 0:
        return tables
    if any(m.anchored for m in tables.stm):
        raise NumericalError("window_advance does not support re-anchored tables")

    S = tables.samples.size
    if shift >= S:
        raise ValueError("delta larger than the table window")
    n = tables.n
    t0_new = tables.t0 + shift * tables.spacing
    tM_new = tables.tM + shift * tables.spacing
    tail_grid = tables.tM + tables.spacing * np.arange(shift + 1)
    q_eval = _q_eval_fn(cost)

    stms = []
    atms = []
    atm_interp = []
    samples_new = np.concatenate([tables.samples[shift:], tail_grid[1:]])
    for j in range(1, tables.n_modes + 1):
        ev = _mode_eval_fn(sys, j)
        old = tables.stm[j - 1].segments[0]
        old_psi = tables.atm_samples[j - 1]

        tail_cells_phi = chunk_stms(ev, tail_grid, tables.fine_step)
        tail_cells_psi = chunk_atms(ev, q_eval, tail_grid, tables.fine_step)
        # phi(t, tM) on the tail grid, forward from identity
        tail_phi = np.empty((shift + 1, n, n))
        tail_phi[0] = np.eye(n)
        for g in range(shift):
            tail_phi[g + 1] = tail_cells_phi[g] @ tail_phi[g]
        # psi(t, tM + delta) on the tail grid, backward from zero
        tail_psi = _assemble_atm(tail_cells_psi, tail_cells_phi)

        shift_inv = old.phi_inv[shift]  # phi(t0 + delta, t0)^(-1)
        body_phi = old.phi[shift:] @ shift_inv
        carry = old.phi[-1] @ shift_inv  # phi(tM, t0 + delta)
        tail_phi_new = tail_phi[1:] @ carry
        phi = np.concatenate([body_phi, tail_phi_new])
        phi[0] = np.eye(n)

        # invert the spliced samples afresh so residuals do not accumulate
        # across repeated advances
        try:
            phi_inv = np.linalg.inv(phi)
        except np.linalg.LinAlgError as e:
            raise NumericalError(f"singular spliced transition sample: {e}") from e
        phi_inv[0] = np.eye(n)

        residual = np.max(np.abs(phi @ phi_inv - np.eye(n)))
        if residual > INVERSE_RESIDUAL_LIMIT:
            raise NumericalError(
                f"spliced inverse residual {residual:.2e} exceeds {INVERSE_RESIDUAL_LIMIT}"
            )
        seg = _StmSegment(
            start=0,
            stop=S - 1,
            phi=phi,
            phi_inv=phi_inv,
            interp_phi=_Interp(samples_new, phi, tables.interp),
            interp_inv=_Interp(samples_new, phi_inv, tables.interp),
        )
        stms.append(_ModeStm(segments=(seg,), links=()))

        # psi(t, tM + delta) = psi(t, tM) composed with the fresh tail value
        W = tail_psi[0]
        carry_body = old.phi[-1] @ old.phi_inv[shift:]
        body_psi = old_psi[shift:] + np.swapaxes(carry_body, -1, -2) @ W @ carry_body
        psi = np.concatenate([body_psi, tail_psi[1:]])
        psi = 0.5 * (psi + np.swapaxes(psi, -1, -2))
        psi[-1] = 0.0
        atms.append(psi)
        atm_interp.append(_Interp(samples_new, psi, tables.interp))

    return TransitionTables(
        t0=t0_new,
        tM=tM_new,
        spacing=tables.spacing,
        samples=samples_new,
        fine_step=tables.fine_step,
        interp=tables.interp,
        stm=tuple(stms),
        atm_samples=tuple(atms),
        atm_interp=tuple(atm_interp),
    )


def tables_cache_key(sys: SwitchedLinearSystem, cost: QuadraticCost,
                     t0: float, tM: float, spacing: float, fine_step: float,
                     interp: str) -> str:
    """Content hash identifying one table build."""
    payload = {
        "version": CACHE_FORMAT_VERSION,
        "modes": [[[str(e) for e in row] for row in m] for m in sys.modes],
        "x0_dim": sys.n,
        "Q": [[str(e) for e in row] for row in cost.Q],
        "P1": np.asarray(cost.P1).tolist(),
        "t0": float(t0),
        "tM": float(tM),
        "spacing": float(spacing),
        "fine_step": float(fine_step),
        "interp": interp,
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_tables(path, tables: TransitionTables, key: str) -> bool:
    """Write a binary table cache; returns False for anchored tables, which
    are not cacheable."""
    if any(m.anchored for m in tables.stm):
        return False
    arrays = {}
    for j, mode in enumerate(tables.stm):
        arrays[f"phi_{j}"] = mode.segments[0].phi
        arrays[f"phi_inv_{j}"] = mode.segments[0].phi_inv
        arrays[f"psi_{j}"] = tables.atm_samples[j]
    meta = {
        "cache_version": CACHE_FORMAT_VERSION,
        "key": key,
        "t0": tables.t0,
        "tM": tables.tM,
        "spacing": tables.spacing,
        "fine_step": tables.fine_step,
        "interp": tables.interp,
        "n_modes": tables.n_modes,
    }
    np.savez_compressed(path, samples=tables.samples,
                        meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                        **arrays)
    return True


def load_tables(path, key: str) -> TransitionTables | None:
    """Load a cached table build; returns None on any mismatch (missing file,
    version change, or stale content hash)."""
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta.get("cache_version") != CACHE_FORMAT_VERSION or meta.get("key") != key:
                return None
            samples = data["samples"]
            stms = []
            atms = []
            atm_interp = []
            for j in range(meta["n_modes"]):
                phi = data[f"phi_{j}"]
                phi_inv = data[f"phi_inv_{j}"]
                psi = data[f"psi_{j}"]
                seg = _StmSegment(
                    start=0, stop=samples.size - 1, phi=phi, phi_inv=phi_inv,
                    interp_phi=_Interp(samples, phi, meta["interp"]),
                    interp_inv=_Interp(samples, phi_inv, meta["interp"]),
                )
                stms.append(_ModeStm(segments=(seg,), links=()))
                atms.append(psi)
                atm_interp.append(_Interp(samples, psi, meta["interp"]))
            return TransitionTables(
                t0=meta["t0"], tM=meta["tM"], spacing=meta["spacing"],
                samples=samples, fine_step=meta["fine_step"], interp=meta["interp"],
                stm=tuple(stms), atm_samples=tuple(atms), atm_interp=tuple(atm_interp),
            )
    except (OSError, KeyError, ValueError):
        return None


__all__ = [
    "TransitionTables",
    "build_stm",
    "build_atm",
    "build_tables",
    "window_advance",
    "tables_cache_key",
    "save_tables",
    "load_tables",
    "METER",
]
