"""Parallel-jaw grasp oracle on heightmaps and friction-sweep cost labels.

A grasp closes two point jaws along the axis ``u = (cos a, sin a)`` through a
pixel center. Each jaw starts half an opening away from the pixel and marches
inward until it meets occupied space; the grasp holds if each jaw's closing
direction lies inside the friction cone around the inward surface normal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_BINS = 6
H_THR = 0.25
W_OPEN = 10.0
ANGLE_TOL = 1e-9
MARCH_STEP = 0.25
TRAIN_FRICTION = 0.3
SWEEP_FRICTIONS = tuple(round(0.10 + 0.05 * i, 2) for i in range(10))

_S3 = np.sqrt(3.0) / 2.0
# exact unit vectors so quarter-turn rotations map bins onto each other bit-for-bit
BIN_AXES = (
    (1.0, 0.0),
    (_S3, 0.5),
    (0.5, _S3),
    (0.0, 1.0),
    (-0.5, _S3),
    (-_S3, 0.5),
)


@dataclass(frozen=True)
class GraspAction:
    row: int
    col: int
    orientation_bin: int

    @property
    def angle(self):
        return np.deg2rad(30.0 * self.orientation_bin)


@dataclass
class GraspOutcome:
    success: bool
    reason: str | None = None  # no-contact, one-sided, too-wide, friction-cone
    contacts: tuple | None = None  # ((x, y) of + jaw, (x, y) of - jaw)
    normals: tuple | None = None  # outward unit normals at the contacts
    cone_angle: float | None = None  # largest jaw/normal misalignment, radians


@dataclass
class _Geometry:
    reason: str | None
    contacts: tuple | None = None
    normals: tuple | None = None
    cone_angle: float | None = None


def _round_toward_zero_on_ties(d):
    # nearest integer; exact halves go toward the jaw's pixel
    return np.sign(d) * np.ceil(np.abs(d) - 0.5)


def occupancy(h, thr=H_THR):
    return (np.asarray(h) >= thr).astype(np.float64)


def _blurred(occ):
    G = occ.shape[0]
    pad = np.pad(occ, 2)
    out = np.zeros((G + 2, G + 2))
    for dr in range(3):
        for dc in range(3):
            out += pad[dr : dr + G + 2, dc : dc + G + 2]
    return out / 9.0  # indices shifted by one: out[r + 1, c + 1] is pixel (r, c)


def _march(occ, row, col, ux, uy, side, w_open):
    G = occ.shape[0]
    n = int(round(w_open / 2 / MARCH_STEP))
    for i in range(n, -1, -1):
        t = i * MARCH_STEP
        dx = side * t * ux
        dy = side * t * uy
        c = col + int(_round_toward_zero_on_ties(dx))
        r = row + int(_round_toward_zero_on_ties(dy))
        if 0 <= r < G and 0 <= c < G and occ[r, c]:
            return (col + dx, row + dy), (r, c), i == n
    return None, None, False


def _geometry(h, action: GraspAction, thr=H_THR, w_open=W_OPEN) -> _Geometry:
    occ = occupancy(h, thr)
    G = occ.shape[0]
    if not (0 <= action.row < G and 0 <= action.col < G and 0 <= action.orientation_bin < N_BINS):
        raise ValueError(f"action {action} outside a {G}x{G} grid with {N_BINS} bins")
    ux, uy = BIN_AXES[action.orientation_bin]
    plus, plus_px, plus_edge = _march(occ, action.row, action.col, ux, uy, +1, w_open)
    minus, minus_px, minus_edge = _march(occ, action.row, action.col, ux, uy, -1, w_open)
    if plus is None and minus is None:
        return _Geometry("no-contact")
    if plus is None or minus is None:
        return _Geometry("one-sided")
    # a jaw whose first sample is already inside the object lands on top of it
    if plus_edge or minus_edge or np.hypot(plus[0] - minus[0], plus[1] - minus[1]) > w_open:
        return _Geometry("too-wide", (plus, minus))
    blur = _blurred(occ)
    normals, angles = [], []
    for (r, c), side in ((plus_px, 1.0), (minus_px, -1.0)):
        gx = (blur[r + 1, c + 2] - blur[r + 1, c]) / 2.0
        gy = (blur[r + 2, c + 1] - blur[r, c + 1]) / 2.0
        norm = np.hypot(gx, gy)
        if norm == 0.0:
            return _Geometry("friction-cone", (plus, minus))
        nx, ny = -gx / norm, -gy / norm
        normals.append((nx, ny))
        # the + jaw closes along -u, so its outward normal should point along +u
        cos = side * ux * nx + side * uy * ny
        angles.append(float(np.arccos(np.clip(cos, -1.0, 1.0))))
    return _Geometry(None, (plus, minus), tuple(normals), max(angles))


def _holds(geom: _Geometry, mu):
    return geom.reason is None and geom.cone_angle <= np.arctan(mu) + ANGLE_TOL


def execute_grasp(h, action: GraspAction, mu: float, thr=H_THR, w_open=W_OPEN) -> GraspOutcome:
    if mu <= 0:
        raise ValueError("friction coefficient must be positive")
    geom = _geometry(h, action, thr, w_open)
    if geom.reason is not None:
        return GraspOutcome(False, geom.reason, geom.contacts)
    ok = _holds(geom, mu)
    return GraspOutcome(bool(ok), None if ok else "friction-cone", geom.contacts, geom.normals, geom.cone_angle)


def reward(h, action: GraspAction) -> int:
    return int(execute_grasp(h, action, TRAIN_FRICTION).success)


@dataclass(frozen=True)
class CostLabel:
    value: float
    min_success_mu: float | None = None


def cost_from_first_success(mu):
    """Sweep friction -> cost: 0.10 -> 0.0, 0.15 -> 0.1, ..., 0.55 -> 0.9, never -> 1.0."""
    if mu is None:
        return CostLabel(1.0, None)
    i = SWEEP_FRICTIONS.index(round(mu, 2))
    return CostLabel(round(0.1 * i, 1), SWEEP_FRICTIONS[i])


def label_action(h, action: GraspAction) -> CostLabel:
    """Cost of one fixed action: executed at increasing friction until it holds."""
    geom = _geometry(h, action)
    for mu in SWEEP_FRICTIONS:
        if _holds(geom, mu):
            return cost_from_first_success(mu)
    return cost_from_first_success(None)


def label_cost(h, policy, mode="greedy") -> CostLabel:
    """Cost of environment ``h`` under ``policy``'s greedy grasp."""
    if mode != "greedy":
        raise ValueError(f"only greedy labeling is supported, got {mode!r}")
    return label_action(h, policy.greedy_action(h))
