"""Deterministic 2D circle/segment physics with batched rollouts.

The engine favors determinism and speed over physical fidelity:

- semi-implicit Euler at a fixed ``dt``, impulse-based collision response,
  one impulse iteration per pair per step, pairs visited in a fixed order;
- a max-speed clamp instead of continuous collision detection;
- all state math in float64, recorded frames cast to float32.

The stepper carries a leading batch axis so one scene can be rolled out
under many candidate actions at once.  A single rollout is a batch of one,
so there is exactly one integration code path and batched results are
bit-identical to sequential ones.

Rollout trace file layout (little endian), version 1::

    offset  size  field
    0       4     magic b"RTRC"
    4       4     u32  format version (1)
    8       4     u32  n_objects       (dynamic bodies, scene order)
    12      4     u32  n_frames
    16      8     f64  dt              (seconds per integration step)
    24      4     u32  stride          (integration steps per recorded frame)
    28      1     u8   solved flag
    29      ...   f32  positions, frame-major then object, (x, y) pairs

Round trips through :func:`write_trace` / :func:`read_trace` are lossless.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidActionError, TraceFormatError

CIRCLE = "circle"
SEGMENT = "segment"

ROLE_AGENT = "agent_placed"
ROLE_SUBJECT = "goal_subject"
ROLE_TARGET = "goal_target"
ROLE_SCENERY = "scenery"
ROLES = (ROLE_AGENT, ROLE_SUBJECT, ROLE_TARGET, ROLE_SCENERY)

_TRACE_MAGIC = b"RTRC"
_TRACE_VERSION = 1


@dataclass(frozen=True)
class Body:
    """One rigid body: a circle (static or dynamic) or a static segment."""

    shape: str
    role: str = ROLE_SCENERY
    dynamic: bool = False
    radius: float = 0.0
    x: float = 0.0
    y: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    x0: float = 0.0
    y0: float = 0.0
    x1: float = 0.0
    y1: float = 0.0

    def __post_init__(self):
        if self.shape not in (CIRCLE, SEGMENT):
            raise ValueError(f"unknown body shape {self.shape!r}")
        if self.role not in ROLES:
            raise ValueError(f"unknown body role {self.role!r}")
        if self.shape == CIRCLE and self.radius <= 0.0:
            raise ValueError("circle radius must be positive")
        if self.shape == SEGMENT:
            if self.dynamic:
                raise ValueError("segments are static terrain")
            if self.x0 == self.x1 and self.y0 == self.y1:
                raise ValueError("segment endpoints must be distinct")

    @staticmethod
    def circle(x, y, radius, role=ROLE_SCENERY, dynamic=False, vx=0.0, vy=0.0):
        return Body(CIRCLE, role=role, dynamic=dynamic, radius=radius,
                    x=x, y=y, vx=vx, vy=vy)

    @staticmethod
    def segment(x0, y0, x1, y1, role=ROLE_SCENERY):
        return Body(SEGMENT, role=role, x0=x0, y0=y0, x1=x1, y1=y1)

    @property
    def position(self):
        if self.shape == CIRCLE:
            return (self.x, self.y)
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    @property
    def mass(self):
        return math.pi * self.radius * self.radius

    def to_dict(self):
        if self.shape == CIRCLE:
            return {"shape": CIRCLE, "role": self.role, "dynamic": self.dynamic,
                    "radius": self.radius, "x": self.x, "y": self.y,
                    "vx": self.vx, "vy": self.vy}
        return {"shape": SEGMENT, "role": self.role,
                "x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1}

    @staticmethod
    def from_dict(d):
        if d["shape"] == CIRCLE:
            return Body.circle(d["x"], d["y"], d["radius"], role=d["role"],
                               dynamic=d["dynamic"], vx=d.get("vx", 0.0),
                               vy=d.get("vy", 0.0))
        return Body.segment(d["x0"], d["y0"], d["x1"], d["y1"], role=d["role"])


@dataclass(frozen=True)
class GoalSpec:
    """Contact goal: subject body must touch target body for `dwell`
    consecutive recorded frames."""

    subject_role: str = ROLE_SUBJECT
    target_role: str = ROLE_TARGET
    dwell: int = 10

    def __post_init__(self):
        if self.dwell < 1:
            raise ValueError("dwell must be >= 1")

    def to_dict(self):
        return {"kind": "contact", "subject_role": self.subject_role,
                "target_role": self.target_role, "dwell": self.dwell}

    @staticmethod
    def from_dict(d):
        return GoalSpec(d["subject_role"], d["target_role"], d["dwell"])


@dataclass(frozen=True)
class Scene:
    """World state at t=0: bodies in the unit square plus gravity and goal."""

    bodies: tuple
    gravity: float = -2.0
    goal: GoalSpec = GoalSpec()

    def __post_init__(self):
        object.__setattr__(self, "bodies", tuple(self.bodies))

    def validate(self):
        for b in self.bodies:
            if b.shape == CIRCLE:
                if not (0.0 <= b.x <= 1.0 and 0.0 <= b.y <= 1.0):
                    raise ValueError(f"body at ({b.x}, {b.y}) outside unit square")
            else:
                for px, py in ((b.x0, b.y0), (b.x1, b.y1)):
                    if not (0.0 <= px <= 1.0 and 0.0 <= py <= 1.0):
                        raise ValueError("segment endpoint outside unit square")
        n_subj = sum(1 for b in self.bodies if b.role == ROLE_SUBJECT)
        n_targ = sum(1 for b in self.bodies if b.role == ROLE_TARGET)
        if n_subj != 1 or n_targ != 1:
            raise ValueError(
                f"scene needs exactly one goal subject and one goal target, "
                f"got {n_subj} and {n_targ}")
        subj = next(b for b in self.bodies if b.role == ROLE_SUBJECT)
        if subj.shape != CIRCLE or not subj.dynamic:
            raise ValueError("goal subject must be a dynamic circle")
        return self

    def dynamic_bodies(self):
        return [b for b in self.bodies if b.dynamic]

    def to_dict(self):
        return {"gravity": self.gravity, "goal": self.goal.to_dict(),
                "bodies": [b.to_dict() for b in self.bodies]}

    @staticmethod
    def from_dict(d):
        return Scene(tuple(Body.from_dict(bd) for bd in d["bodies"]),
                     gravity=d["gravity"], goal=GoalSpec.from_dict(d["goal"]))


@dataclass(frozen=True)
class SimConfig:
    """Integration and contact parameters (defaults are the shipped ones)."""

    dt: float = 1.0 / 60.0
    stride: int = 4
    max_frames: int = 60
    restitution: float = 0.3
    friction: float = 0.4
    max_speed: float = 5.0          # tunneling guard at dt = 1/60
    rest_speed: float = 0.1         # below this approach speed, restitution 0
    slop: float = 0.002
    correction: float = 0.8
    walls: bool = True
    contact_tol: float = 0.005

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.stride < 1 or self.max_frames < 1:
            raise ValueError("stride and max_frames must be >= 1")


@dataclass(frozen=True)
class Rollout:
    """Recorded trajectory of all dynamic bodies plus the solved flag.

    ``frames`` has shape (length, n_objects, 2) in float32; object order is
    the dynamic-body order of the simulated scene (action balls last).
    """

    frames: np.ndarray
    solved: bool
    dt: float
    stride: int

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.shape[2] != 2:
            raise ValueError("frames must have shape (T, objects, 2)")
        if self.frames.shape[0] < 1:
            raise ValueError("rollout must record at least one frame")

    @property
    def length(self):
        return self.frames.shape[0]

    @property
    def n_objects(self):
        return self.frames.shape[1]


# ---------------------------------------------------------------------------
# compiled scene / batched stepping


class _Compiled:
    """Array form of a scene (plus per-sim action balls) for the stepper."""

    def __init__(self, scene: Scene, balls_per_sim, n_sims):
        dyn = [b for b in scene.bodies if b.dynamic]
        n_extra = len(balls_per_sim[0]) if balls_per_sim else 0
        for balls in balls_per_sim:
            if len(balls) != n_extra:
                raise ValueError("all sims must place the same ball count")
        self.n_dyn = len(dyn) + n_extra
        if self.n_dyn == 0:
            raise ValueError("scene has no dynamic bodies")
        self.n_sims = n_sims

        pos = np.zeros((n_sims, self.n_dyn, 2))
        vel = np.zeros((n_sims, self.n_dyn, 2))
        rad = np.zeros((n_sims, self.n_dyn))
        for i, b in enumerate(dyn):
            pos[:, i] = (b.x, b.y)
            vel[:, i] = (b.vx, b.vy)
            rad[:, i] = b.radius
        for s, balls in enumerate(balls_per_sim):
            for k, b in enumerate(balls):
                j = len(dyn) + k
                pos[s, j] = (b.x, b.y)
                vel[s, j] = (b.vx, b.vy)
                rad[s, j] = b.radius
        self.pos = pos
        self.vel = vel
        self.rad = rad
        self.inv_m = 1.0 / (math.pi * rad * rad)

        stat_c = [b for b in scene.bodies if not b.dynamic and b.shape == CIRCLE]
        self.stat_xy = np.array([[b.x, b.y] for b in stat_c]).reshape(-1, 2)
        self.stat_r = np.array([b.radius for b in stat_c])
        segs = [b for b in scene.bodies if b.shape == SEGMENT]
        self.seg_a = np.array([[b.x0, b.y0] for b in segs]).reshape(-1, 2)
        self.seg_b = np.array([[b.x1, b.y1] for b in segs]).reshape(-1, 2)

        # goal bookkeeping: subject is always a dynamic circle
        self.subj = next(i for i, b in enumerate(dyn) if b.role == ROLE_SUBJECT)
        self.target_kind = None
        target = next(b for b in scene.bodies if b.role == ROLE_TARGET)
        if target.shape == CIRCLE and target.dynamic:
            self.target_kind = "dyn"
            self.target_idx = dyn.index(target)
        elif target.shape == CIRCLE:
            self.target_kind = "stat"
            self.target_xy = np.array([target.x, target.y])
            self.target_r = target.radius
        else:
            self.target_kind = "seg"
            self.target_a = np.array([target.x0, target.y0])
            self.target_b = np.array([target.x1, target.y1])


def _apply_contact(pa, va, inv_a, pb, vb, inv_b, n, depth, mask, cfg):
    """Impulse + friction + positional correction for one contact set.

    ``pa``/``va`` may be None for a static side (inv mass 0).  ``n`` points
    from a to b; ``depth`` is the overlap.  All arrays are (N, ...) over
    sims; ``mask`` selects sims where the contact exists.
    """
    def col(w):
        return w[:, None] if isinstance(w, np.ndarray) else w

    va_eff = va if va is not None else 0.0
    vr = vb - va_eff
    vn = np.einsum("ij,ij->i", vr, n)
    m_eff = inv_a + inv_b

    approach = mask & (vn < 0.0)
    e = np.where(-vn > cfg.rest_speed, cfg.restitution, 0.0)
    jn = np.where(approach, -(1.0 + e) * vn / m_eff, 0.0)
    dv = jn[:, None] * n
    if va is not None:
        va -= dv * col(inv_a)
    vb += dv * col(inv_b)

    if cfg.friction > 0.0:
        vr = vb - (va if va is not None else 0.0)
        vt_vec = vr - np.einsum("ij,ij->i", vr, n)[:, None] * n
        vt = np.sqrt(np.einsum("ij,ij->i", vt_vec, vt_vec))
        fmask = approach & (vt > 1e-12) & (jn > 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            t_hat = np.where(fmask[:, None], vt_vec / np.where(vt > 0, vt, 1.0)[:, None], 0.0)
        jt = np.where(fmask, np.minimum(vt / m_eff, cfg.friction * jn), 0.0)
        dvt = jt[:, None] * t_hat
        if va is not None:
            va += dvt * col(inv_a)
        vb -= dvt * col(inv_b)

    corr = np.where(mask, np.maximum(depth - cfg.slop, 0.0) * cfg.correction / m_eff, 0.0)
    dp = corr[:, None] * n
    if pa is not None:
        pa -= dp * col(inv_a)
    pb += dp * col(inv_b)


def _step(c: _Compiled, gravity: float, cfg: SimConfig):
    """Advance all sims by one dt in place."""
    pos, vel = c.pos, c.vel

    vel[:, :, 1] += gravity * cfg.dt
    speed = np.sqrt(np.einsum("sij,sij->si", vel, vel))
    over = speed > cfg.max_speed
    if over.any():
        scalefac = np.where(over, cfg.max_speed / np.where(speed > 0, speed, 1.0), 1.0)
        vel *= scalefac[:, :, None]
    pos += vel * cfg.dt

    # dynamic-dynamic circle pairs, fixed (i, j) order
    for i in range(c.n_dyn):
        for j in range(i + 1, c.n_dyn):
            dvec = pos[:, j] - pos[:, i]
            d2 = np.einsum("ij,ij->i", dvec, dvec)
            rsum = c.rad[:, i] + c.rad[:, j]
            mask = (d2 < rsum * rsum) & (d2 > 0.0)
            if not mask.any():
                continue
            d = np.sqrt(d2)
            with np.errstate(invalid="ignore", divide="ignore"):
                n = np.where(mask[:, None], dvec / np.where(d > 0, d, 1.0)[:, None], 0.0)
            _apply_contact(pos[:, i], vel[:, i], c.inv_m[:, i],
                           pos[:, j], vel[:, j], c.inv_m[:, j],
                           n, rsum - d, mask, cfg)

    # dynamic circle vs static circle
    for i in range(c.n_dyn):
        for s in range(len(c.stat_r)):
            dvec = pos[:, i] - c.stat_xy[s]
            d2 = np.einsum("ij,ij->i", dvec, dvec)
            rsum = c.rad[:, i] + c.stat_r[s]
            mask = (d2 < rsum * rsum) & (d2 > 0.0)
            if not mask.any():
                continue
            d = np.sqrt(d2)
            with np.errstate(invalid="ignore", divide="ignore"):
                n = np.where(mask[:, None], dvec / np.where(d > 0, d, 1.0)[:, None], 0.0)
            _apply_contact(None, None, 0.0,
                           pos[:, i], vel[:, i], c.inv_m[:, i],
                           n, rsum - d, mask, cfg)

    # dynamic circle vs segment
    for i in range(c.n_dyn):
        for g in range(len(c.seg_a)):
            a, b = c.seg_a[g], c.seg_b[g]
            ab = b - a
            ab2 = float(ab @ ab)
            t = np.clip(((pos[:, i] - a) @ ab) / ab2, 0.0, 1.0)
            q = a + t[:, None] * ab
            dvec = pos[:, i] - q
            d2 = np.einsum("ij,ij->i", dvec, dvec)
            r = c.rad[:, i]
            mask = (d2 < r * r) & (d2 > 0.0)
            if not mask.any():
                continue
            d = np.sqrt(d2)
            with np.errstate(invalid="ignore", divide="ignore"):
                n = np.where(mask[:, None], dvec / np.where(d > 0, d, 1.0)[:, None], 0.0)
            _apply_contact(None, None, 0.0,
                           pos[:, i], vel[:, i], c.inv_m[:, i],
                           n, r - d, mask, cfg)

    if cfg.walls:
        for i in range(c.n_dyn):
            r = c.rad[:, i]
            for axis, side in ((0, 0.0), (0, 1.0), (1, 0.0), (1, 1.0)):
                sign = 1.0 if side == 0.0 else -1.0
                depth = r - sign * (pos[:, i, axis] - side)
                mask = depth > 0.0
                if not mask.any():
                    continue
                n = np.zeros((c.n_sims, 2))
                n[:, axis] = sign
                _apply_contact(None, None, 0.0,
                               pos[:, i], vel[:, i], c.inv_m[:, i],
                               n, depth, mask, cfg)


def _goal_contact(c: _Compiled, cfg: SimConfig):
    """Per-sim bool: does the subject touch the target right now?"""
    sp = c.pos[:, c.subj]
    sr = c.rad[:, c.subj]
    if c.target_kind == "dyn":
        dvec = c.pos[:, c.target_idx] - sp
        reach = sr + c.rad[:, c.target_idx] + cfg.contact_tol
    elif c.target_kind == "stat":
        dvec = c.target_xy[None, :] - sp
        reach = sr + c.target_r + cfg.contact_tol
    else:
        a, b = c.target_a, c.target_b
        ab = b - a
        t = np.clip(((sp - a) @ ab) / float(ab @ ab), 0.0, 1.0)
        dvec = (a + t[:, None] * ab) - sp
        reach = sr + cfg.contact_tol
    d2 = np.einsum("ij,ij->i", dvec, dvec)
    return d2 <= reach * reach


def step_scene(scene: Scene, cfg: SimConfig | None = None) -> Scene:
    """One integration step on a Scene, returning the updated Scene."""
    cfg = cfg or SimConfig()
    c = _Compiled(scene, [()], 1)
    _step(c, scene.gravity, cfg)
    out = []
    k = 0
    for b in scene.bodies:
        if b.dynamic:
            out.append(replace(b, x=float(c.pos[0, k, 0]), y=float(c.pos[0, k, 1]),
                               vx=float(c.vel[0, k, 0]), vy=float(c.vel[0, k, 1])))
            k += 1
        else:
            out.append(b)
    return replace(scene, bodies=tuple(out))


def placement_valid(scene: Scene, balls: Sequence[Body]) -> bool:
    """True if every ball is inside the unit square and overlap free."""
    for k, ball in enumerate(balls):
        r = ball.radius
        if not (r <= ball.x <= 1.0 - r and r <= ball.y <= 1.0 - r):
            return False
        for other in list(scene.bodies) + list(balls[:k]):
            if other.shape == CIRCLE:
                dx, dy = ball.x - other.x, ball.y - other.y
                if dx * dx + dy * dy < (r + other.radius) ** 2:
                    return False
            else:
                ax, ay, bx, by = other.x0, other.y0, other.x1, other.y1
                abx, aby = bx - ax, by - ay
                t = ((ball.x - ax) * abx + (ball.y - ay) * aby) / (abx * abx + aby * aby)
                t = min(max(t, 0.0), 1.0)
                dx, dy = ball.x - (ax + t * abx), ball.y - (ay + t * aby)
                if dx * dx + dy * dy < r * r:
                    return False
    return True


def placement_valid_batch(scene: Scene, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Vectorized validity for N candidate placements of nb balls each.

    ``centers``: (N, nb, 2), ``radii``: (N, nb).  Returns (N,) bool.
    """
    n, nb = radii.shape
    ok = np.ones(n, dtype=bool)
    for k in range(nb):
        x, y, r = centers[:, k, 0], centers[:, k, 1], radii[:, k]
        ok &= (x >= r) & (x <= 1.0 - r) & (y >= r) & (y <= 1.0 - r)
        for b in scene.bodies:
            if b.shape == CIRCLE:
                d2 = (x - b.x) ** 2 + (y - b.y) ** 2
                ok &= d2 >= (r + b.radius) ** 2
            else:
                abx, aby = b.x1 - b.x0, b.y1 - b.y0
                ab2 = abx * abx + aby * aby
                t = np.clip(((x - b.x0) * abx + (y - b.y0) * aby) / ab2, 0.0, 1.0)
                d2 = (x - (b.x0 + t * abx)) ** 2 + (y - (b.y0 + t * aby)) ** 2
                ok &= d2 >= r * r
        for j in range(k):
            d2 = ((centers[:, k] - centers[:, j]) ** 2).sum(axis=1)
            ok &= d2 >= (radii[:, k] + radii[:, j]) ** 2
    return ok


def _as_balls(action_or_balls):
    if hasattr(action_or_balls, "world_bodies"):
        return tuple(action_or_balls.world_bodies())
    return tuple(action_or_balls)


def rollout_batch(scene: Scene, actions, cfg: SimConfig | None = None,
                  validate: bool = True) -> list[Rollout]:
    """Roll the scene out under each action; bit-identical to one-at-a-time."""
    cfg = cfg or SimConfig()
    balls_per_sim = [_as_balls(a) for a in actions]
    if validate:
        for s, balls in enumerate(balls_per_sim):
            if not placement_valid(scene, balls):
                raise InvalidActionError(f"action {s} overlaps a body or leaves bounds")
    n = len(balls_per_sim)
    if n == 0:
        return []
    c = _Compiled(scene, balls_per_sim, n)

    frames = np.empty((n, cfg.max_frames, c.n_dyn, 2), dtype=np.float32)
    run = np.zeros(n, dtype=np.int64)          # consecutive contact frames
    solved_at = np.full(n, -1, dtype=np.int64)  # recorded frame idx of solve
    for f in range(cfg.max_frames):
        for _ in range(cfg.stride):
            _step(c, scene.gravity, cfg)
        frames[:, f] = c.pos.astype(np.float32)
        run = np.where(_goal_contact(c, cfg), run + 1, 0)
        hit = (run >= scene.goal.dwell) & (solved_at < 0)
        solved_at[hit] = f

    out = []
    for s in range(n):
        if solved_at[s] >= 0:
            out.append(Rollout(frames[s, : solved_at[s] + 1].copy(), True,
                               cfg.dt, cfg.stride))
        else:
            out.append(Rollout(frames[s].copy(), False, cfg.dt, cfg.stride))
    return out


def rollout(scene: Scene, action, cfg: SimConfig | None = None) -> Rollout:
    """Place the action ball(s) and simulate until solved or max frames."""
    return rollout_batch(scene, [action], cfg)[0]


def scene_at_frame(scene: Scene, action, roll: Rollout, frame: int) -> Scene:
    """Scene with action balls merged and dynamic positions from a frame."""
    if not 0 <= frame < roll.length:
        raise IndexError(f"frame {frame} outside rollout of length {roll.length}")
    bodies = list(scene.bodies) + list(_as_balls(action))
    out = []
    k = 0
    for b in bodies:
        if b.dynamic:
            x, y = roll.frames[frame, k]
            out.append(replace(b, x=float(x), y=float(y), vx=0.0, vy=0.0))
            k += 1
        else:
            out.append(b)
    if k != roll.n_objects:
        raise ValueError("rollout object count does not match scene + action")
    return replace(scene, bodies=tuple(out))


# ---------------------------------------------------------------------------
# trace io


def write_trace(roll: Rollout, path) -> None:
    header = _TRACE_MAGIC + struct.pack(
        "<IIIdIB", _TRACE_VERSION, roll.n_objects, roll.length,
        roll.dt, roll.stride, 1 if roll.solved else 0)
    data = np.ascontiguousarray(roll.frames, dtype=np.float32)
    Path(path).write_bytes(header + data.tobytes())


def read_trace(path) -> Rollout:
    raw = Path(path).read_bytes()
    if len(raw) < 29 or raw[:4] != _TRACE_MAGIC:
        raise TraceFormatError(f"{path}: not a rollout trace")
    version, n_obj, n_frames, dt, stride, solved = struct.unpack("<IIIdIB", raw[4:29])
    if version != _TRACE_VERSION:
        raise TraceFormatError(f"{path}: unsupported trace version {version}")
    need = 29 + n_frames * n_obj * 2 * 4
    if len(raw) != need:
        raise TraceFormatError(f"{path}: expected {need} bytes, got {len(raw)}")
    frames = np.frombuffer(raw[29:], dtype="<f4").reshape(n_frames, n_obj, 2).copy()
    return Rollout(frames, bool(solved), float(dt), int(stride))
