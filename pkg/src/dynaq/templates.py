"""Hand-designed puzzle templates.

Every template follows the same pattern: a "subject" ball rests somewhere
stable, a target zone (a short segment, or a pocket floor) sits elsewhere,
and the placed action ball(s) must knock the subject so it comes to rest
in sustained contact with the target.  Dropped balls impart mostly small,
mostly downward impulses, so most perches are gently tilted (well inside
the static-friction cone): balls landing upslope roll down and deliver a
real sideways push, which keeps a usable fraction of the action space
solving each task.  Resting contact is what satisfies the dwell rule, so
targets live in pockets, pits, cups, or are floor strips the subject can
settle on.

Parameter ranges are chosen so that every draw produces a valid scene;
the solvability envelope is enforced separately by the generation screen.
"""

from __future__ import annotations

import math

import numpy as np

from .physics import Body, GoalSpec, ROLE_SUBJECT, ROLE_TARGET, Scene
from .tasks import ONE_BALL, TWO_BALL, TaskTemplate

GRAVITY = -2.0
SUBJ_R = 0.04
FLOOR_Y = 0.005
ZONE_Y = 0.015
TILT = 0.28          # perch slope as tan(angle); static friction holds 0.4


def _scene(bodies):
    return Scene(tuple(bodies), gravity=GRAVITY, goal=GoalSpec(dwell=10))


def _subject_on(ax, ay, bx, by, along):
    """Subject resting on segment (a, b), `along` world units from b."""
    length = math.hypot(bx - ax, by - ay)
    dx, dy = (bx - ax) / length, (by - ay) / length
    px, py = bx - along * dx, by - along * dy
    nx, ny = -dy, dx
    if ny < 0:
        nx, ny = -nx, -ny
    r = SUBJ_R + 0.001
    return Body.circle(px + nx * r, py + ny * r, SUBJ_R,
                       role=ROLE_SUBJECT, dynamic=True)


def _zone(x0, x1, y=ZONE_Y):
    return Body.segment(x0, y, min(x1, 0.98), y, role=ROLE_TARGET)


def build_ledge(p):
    """Tilted ledge; nudge the subject off the low end onto a floor zone."""
    h, xr, length, dx, tw = p
    ax, ay = xr - length, h + length * TILT
    ledge = Body.segment(ax, ay, xr, h)
    subj = _subject_on(ax, ay, xr, h, 0.045)
    cx = min(xr + dx, 0.95 - tw / 2)
    return _scene([ledge, _zone(cx - tw / 2, cx + tw / 2), subj])


def build_chute(p):
    """Tilted ledge ends at a gap that drops into a walled pocket."""
    h, xg, w, d = p
    ax, ay = 0.02, h + (xg - 0.02) * TILT
    left = Body.segment(ax, ay, xg, h)
    right = Body.segment(xg + w, h, 0.98, h)
    wall_l = Body.segment(xg, FLOOR_Y, xg, h)
    wall_r = Body.segment(xg + w, FLOOR_Y, xg + w, h)
    subj = _subject_on(ax, ay, xg, h, d)
    return _scene([left, right, wall_l, wall_r,
                   _zone(xg + 0.012, xg + w - 0.012), subj])


def build_cup(p):
    """Nudge the subject off a tilted ledge into a cup under the drop line."""
    cw, ch, h, gapx = p
    lx = 0.35 + 0.2 * gapx          # ledge end; cup mouth straddles it
    cx = lx + gapx
    ax, ay = 0.02, h + (lx - 0.02) * TILT
    ledge = Body.segment(ax, ay, lx, h)
    wall_l = Body.segment(cx - cw, FLOOR_Y, cx - cw, ch)
    wall_r = Body.segment(cx + cw, FLOOR_Y, cx + cw, ch)
    subj = _subject_on(ax, ay, lx, h, 0.045)
    return _scene([ledge, wall_l, wall_r,
                   _zone(cx - cw + 0.012, cx + cw - 0.012), subj])


def build_peg(p):
    """Subject balanced on a static peg; push it toward the floor zone."""
    px, ph, dx, tw = p
    peg = Body.circle(px, ph, 0.035)
    subj = Body.circle(px, ph + 0.035 + SUBJ_R + 0.0005, SUBJ_R,
                       role=ROLE_SUBJECT, dynamic=True)
    cx = min(px + dx, 0.95 - tw / 2)
    distractor = Body.circle(0.06, 0.04, 0.035, dynamic=True)
    return _scene([peg, _zone(cx - tw / 2, cx + tw / 2), distractor, subj])


def build_funnel(p):
    """Push the subject off its ledge into a funnel feeding a floor pocket."""
    fx, fy, mw, fw, ofs, gap = p
    top = fy + fw * 0.9
    fun_l = Body.segment(fx - fw, top, fx - mw / 2, fy)
    fun_r = Body.segment(fx + fw, top, fx + mw / 2, fy)
    le = fx + ofs * fw              # ledge left end overhangs the funnel bowl
    re = min(le + 0.3, 0.98)
    ly = top + gap
    ledge = Body.segment(le, ly, re, ly + (re - le) * TILT)
    subj = _subject_on(re, ly + (re - le) * TILT, le, ly, 0.045)
    pw_l = fx - mw / 2 - 0.10
    pw_r = fx + mw / 2 + 0.10
    pock_l = Body.segment(pw_l, FLOOR_Y, pw_l, 0.09)
    pock_r = Body.segment(pw_r, FLOOR_Y, pw_r, 0.09)
    distractor = Body.circle(0.05, 0.9, 0.03, dynamic=True)
    return _scene([fun_l, fun_r, ledge, pock_l, pock_r,
                   _zone(pw_l + 0.012, pw_r - 0.012),
                   distractor, subj])


def build_bridge(p):
    """Subject on a mid-slope shelf; knock it onto the lower run to the zone.

    The upper slope doubles as a backboard: balls dropped on it roll down
    and hit the subject sideways.
    """
    h, sx, shelf_f, tw = p
    mh = shelf_f * h
    mx = sx + (h - mh) / 0.7        # 35 degree slopes
    bx = mx + 0.06 + (mh - 0.02) / 0.7
    upper = Body.segment(sx, h, mx, mh)
    shelf = Body.segment(mx, mh, mx + 0.06, mh)
    lower = Body.segment(mx + 0.06, mh, bx, 0.02)
    subj = Body.circle(mx + 0.03, mh + SUBJ_R + 0.001, SUBJ_R,
                       role=ROLE_SUBJECT, dynamic=True)
    return _scene([upper, shelf, lower, _zone(bx, bx + tw), subj])


def build_pit(p):
    """Nudge the subject off a tilted platform over a rim into a pit."""
    ph2, plx, m, rh, pfw = p
    ax, ay = 0.04, ph2 + (plx - 0.04) * TILT
    platform = Body.segment(ax, ay, plx, ph2)
    subj = _subject_on(ax, ay, plx, ph2, 0.045)
    ox = plx + m
    y0 = FLOOR_Y
    out_l = Body.segment(ox, y0, ox + rh, y0 + rh)
    in_l = Body.segment(ox + rh, y0 + rh, ox + 2 * rh, y0)
    in_r = Body.segment(ox + 2 * rh + pfw, y0, ox + 3 * rh + pfw, y0 + rh)
    return _scene([platform, out_l, in_l, in_r,
                   _zone(ox + 2 * rh + 0.005, ox + 2 * rh + pfw - 0.005, 0.012),
                   subj])


def build_hurdle(p):
    """Clear a wall: weak nudges drop into the pocket before the wall."""
    h, px, wg, clr, tw = p
    ax, ay = 0.04, h + (px - 0.04) * TILT
    platform = Body.segment(ax, ay, px, h)
    subj = _subject_on(ax, ay, px, h, 0.045)
    wx = px + wg
    wall = Body.segment(wx, FLOOR_Y, wx, h - clr)
    return _scene([platform, wall, _zone(wx + 0.012, wx + 0.012 + tw), subj])


_DEFS = [
    ("ledge", ONE_BALL, ((0.45, 0.60), (0.42, 0.58), (0.22, 0.35),
                         (0.02, 0.14), (0.16, 0.24)), build_ledge),
    ("chute", ONE_BALL, ((0.32, 0.45), (0.38, 0.52), (0.18, 0.24),
                         (0.045, 0.07)), build_chute),
    ("cup", ONE_BALL, ((0.10, 0.13), (0.14, 0.20), (0.45, 0.60),
                       (0.05, 0.12)), build_cup),
    ("peg", ONE_BALL, ((0.28, 0.50), (0.32, 0.48), (0.12, 0.30),
                       (0.14, 0.20)), build_peg),
    ("funnel", ONE_BALL, ((0.42, 0.60), (0.26, 0.34), (0.12, 0.16),
                          (0.18, 0.22), (0.10, 0.50), (0.08, 0.12)), build_funnel),
    ("bridge", ONE_BALL, ((0.32, 0.45), (0.08, 0.16), (0.55, 0.75),
                          (0.14, 0.20)), build_bridge),
    ("pit", ONE_BALL, ((0.28, 0.40), (0.28, 0.38), (0.00, 0.05),
                       (0.05, 0.08), (0.12, 0.16)), build_pit),
    ("hurdle", ONE_BALL, ((0.30, 0.42), (0.35, 0.50), (0.05, 0.10),
                          (0.10, 0.16), (0.16, 0.24)), build_hurdle),
    ("tandem", TWO_BALL, ((0.45, 0.60), (0.42, 0.58), (0.22, 0.35),
                          (0.02, 0.14), (0.16, 0.24)), build_ledge),
]

REGISTRY = {tid: TaskTemplate(tid, tier, ranges, fn)
            for tid, tier, ranges, fn in _DEFS}

ONE_BALL_SUITE = tuple(tid for tid, tier, _, _ in _DEFS if tier == ONE_BALL)


def registry_index(template_id: str) -> int:
    """Stable index of a template in the registry (seed derivation)."""
    ids = list(REGISTRY)
    if template_id not in REGISTRY:
        raise KeyError(f"unknown template {template_id!r}")
    return ids.index(template_id)


def get_templates(ids) -> list[TaskTemplate]:
    if isinstance(ids, str):
        ids = ONE_BALL_SUITE if ids == "suite" else ids.split(",")
    return [REGISTRY[i] for i in ids]
