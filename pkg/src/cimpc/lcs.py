"""Linear complementarity system: storage, validation, one-step simulation,
and residual diagnostics.

Dynamics:  x' = A x + B u + D lam + d
Contact:   0 <= lam  perp  E x + F lam + H u + c >= 0
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .lcp import LinCompProblem, LcpMethod, lcp_solve


@dataclass
class LcsModel:
    a: np.ndarray   # (n_x, n_x)
    b: np.ndarray   # (n_x, n_u)
    d_map: np.ndarray  # (n_x, n_lam), force-to-state map
    d_aff: np.ndarray  # (n_x,), affine drift (gravity lives here)
    e: np.ndarray   # (n_lam, n_x)
    f: np.ndarray   # (n_lam, n_lam)
    h: np.ndarray   # (n_lam, n_u)
    c: np.ndarray   # (n_lam,)
    dt: float

    @property
    def n_x(self) -> int:
        return self.a.shape[0]

    @property
    def n_u(self) -> int:
        return self.b.shape[1]

    @property
    def n_lam(self) -> int:
        return len(self.c)

    def validate(self) -> list[str]:
        """Return every dimension/NaN/dt violation; empty list means usable."""
        bad = []
        n_x = self.a.shape[0] if self.a.ndim == 2 else -1
        if self.a.ndim != 2 or self.a.shape[0] != self.a.shape[1]:
            bad.append("A not square")
            return bad
        n_u = self.b.shape[1] if self.b.ndim == 2 else -1
        n_lam = len(self.c)
        if self.b.shape != (n_x, n_u) or self.b.ndim != 2:
            bad.append("B row count mismatch")
        if self.d_map.shape != (n_x, n_lam):
            bad.append("D shape mismatch")
        if self.d_aff.shape != (n_x,):
            bad.append("d shape mismatch")
        if self.e.shape != (n_lam, n_x):
            bad.append("E shape mismatch")
        if self.f.shape != (n_lam, n_lam):
            bad.append("F shape mismatch")
        if self.h.shape != (n_lam, n_u):
            bad.append("H shape mismatch")
        for name in ("a", "b", "d_map", "d_aff", "e", "f", "h", "c"):
            if not np.all(np.isfinite(getattr(self, name))):
                bad.append(f"{name} has non-finite entries")
        if not self.dt > 0:
            bad.append("dt must be positive")
        if self.f.shape == (n_lam, n_lam) and n_lam and np.min(np.diag(self.f)) < -1e-12:
            bad.append("F diagonal must be nonnegative (contact-generated)")
        return bad

    def to_json(self) -> str:
        """Row-major matrix dump with explicit dims, for fixtures/debugging."""
        payload = {
            "dims": {"n_x": self.n_x, "n_u": self.n_u, "n_lam": self.n_lam},
            "dt": self.dt,
        }
        for key, name in [("A", "a"), ("B", "b"), ("D", "d_map"), ("d", "d_aff"),
                          ("E", "e"), ("F", "f"), ("H", "h"), ("c", "c")]:
            payload[key] = np.asarray(getattr(self, name)).tolist()
        return json.dumps(payload, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "LcsModel":
        payload = json.loads(text)
        dims = payload["dims"]
        m = cls(
            a=np.asarray(payload["A"], dtype=float).reshape(dims["n_x"], dims["n_x"]),
            b=np.asarray(payload["B"], dtype=float).reshape(dims["n_x"], dims["n_u"]),
            d_map=np.asarray(payload["D"], dtype=float).reshape(dims["n_x"], dims["n_lam"]),
            d_aff=np.asarray(payload["d"], dtype=float).reshape(dims["n_x"]),
            e=np.asarray(payload["E"], dtype=float).reshape(dims["n_lam"], dims["n_x"]),
            f=np.asarray(payload["F"], dtype=float).reshape(dims["n_lam"], dims["n_lam"]),
            h=np.asarray(payload["H"], dtype=float).reshape(dims["n_lam"], dims["n_u"]),
            c=np.asarray(payload["c"], dtype=float).reshape(dims["n_lam"]),
            dt=float(payload["dt"]),
        )
        return m


@dataclass
class LcsState:
    x: np.ndarray

    def validate(self, quat_slice: slice | None = None) -> list[str]:
        bad = []
        if not np.all(np.isfinite(self.x)):
            bad.append("state has non-finite entries")
        elif quat_slice is not None:
            qn = np.linalg.norm(self.x[quat_slice])
            if abs(qn - 1.0) > 1e-6:
                bad.append(f"quaternion norm {qn:.8f} not unit")
        return bad


def lcs_step(m: LcsModel, x: LcsState | np.ndarray, u: np.ndarray,
             method: LcpMethod | None = None,
             warm: np.ndarray | None = None) -> tuple[LcsState, np.ndarray]:
    """One LCS step: solve the contact LCP at (x, u), then advance the state."""
    xv = x.x if isinstance(x, LcsState) else np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if m.n_lam == 0:
        lam = np.zeros(0)
    else:
        if method is None:
            method = LcpMethod.ENUMERATE if m.n_lam <= 16 else LcpMethod.ITERATIVE
        q = m.e @ xv + m.h @ u + m.c
        lam = lcp_solve(LinCompProblem(m.f, q), method=method, warm=warm)
    x_next = m.a @ xv + m.b @ u + m.d_map @ lam + m.d_aff
    return LcsState(x_next), lam


def complementarity_residual(m: LcsModel, x, u, lam, x_next) -> float:
    """max over {dynamics defect inf-norm, min(lam), min(slack), |lam . slack|}."""
    xv = x.x if isinstance(x, LcsState) else np.asarray(x, dtype=float)
    xn = x_next.x if isinstance(x_next, LcsState) else np.asarray(x_next, dtype=float)
    lam = np.asarray(lam, dtype=float)
    defect = xn - (m.a @ xv + m.b @ np.asarray(u, dtype=float) + m.d_map @ lam + m.d_aff)
    terms = [float(np.max(np.abs(defect), initial=0.0))]
    if m.n_lam:
        slack = m.e @ xv + m.f @ lam + m.h @ np.asarray(u, dtype=float) + m.c
        terms.append(float(np.max(-lam, initial=0.0)))
        terms.append(float(np.max(-slack, initial=0.0)))
        terms.append(float(np.max(np.abs(lam * slack), initial=0.0)))
    return max(terms)
