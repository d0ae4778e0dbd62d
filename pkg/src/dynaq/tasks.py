"""Task instances, action tiers, splits, and action sampling.

Seeds are split with ``numpy.random.SeedSequence`` throughout: a task draw
uses entropy ``[seed, template_registry_index, instance_index, attempt]``,
so generation parallelizes across templates and is reproducible for any
template subset.  Each task stores the integer ``screen_seed`` that drove
its solvability screen; rebuilding the candidate set from that seed
reproduces the screen's actions and labels exactly.

Task file (JSON, ``format_version`` 1)::

    {"format_version": 1,
     "sim": {...SimConfig fields...},
     "tasks": [{"task_id": str, "template_id": str, "tier": str,
                "params": [float, ...], "screen_seed": int,
                "n_moving": int, "scene": {...Scene.to_dict()...}}, ...]}

Split file (JSON, ``format_version`` 1)::

    {"format_version": 1, "mode": "within_template" | "cross_template",
     "folds": [{"fold_id": int, "train": [task ids], "test": [task ids]}]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DynaqError, GenerationError, InvalidActionError
from .physics import (Body, ROLE_AGENT, Rollout, Scene, SimConfig,
                      placement_valid_batch, rollout_batch)

ONE_BALL = "one_ball"
TWO_BALL = "two_ball"
TIER_DIMS = {ONE_BALL: 3, TWO_BALL: 6}

# affine map from the unit action-radius coordinate to world radius
RADIUS_MIN = 0.03
RADIUS_MAX = 0.09

WITHIN = "within_template"
CROSS = "cross_template"


def action_radius(u: float) -> float:
    return RADIUS_MIN + (RADIUS_MAX - RADIUS_MIN) * u


@dataclass(frozen=True)
class Action:
    """A point in the unit action cube: (x, y, r) per placed ball."""

    tier: str
    coords: tuple

    def __post_init__(self):
        if self.tier not in TIER_DIMS:
            raise ValueError(f"unknown tier {self.tier!r}")
        object.__setattr__(self, "coords", tuple(float(c) for c in self.coords))
        if len(self.coords) != TIER_DIMS[self.tier]:
            raise ValueError(
                f"{self.tier} action needs {TIER_DIMS[self.tier]} coords, "
                f"got {len(self.coords)}")
        if any(not 0.0 <= c <= 1.0 for c in self.coords):
            raise ValueError("action coords must lie in [0, 1]")

    def world_bodies(self):
        balls = []
        for k in range(len(self.coords) // 3):
            x, y, r = self.coords[3 * k: 3 * k + 3]
            balls.append(Body.circle(x, y, action_radius(r),
                                     role=ROLE_AGENT, dynamic=True))
        return balls


@dataclass(frozen=True)
class TaskTemplate:
    """Parameterized scene generator."""

    template_id: str
    tier: str
    param_ranges: tuple              # ((lo, hi), ...)
    build: Callable[[np.ndarray], Scene]

    def draw_params(self, rng: np.random.Generator) -> np.ndarray:
        lo = np.array([r[0] for r in self.param_ranges])
        hi = np.array([r[1] for r in self.param_ranges])
        return lo + (hi - lo) * rng.random(len(self.param_ranges))


@dataclass(frozen=True)
class Task:
    task_id: str
    template_id: str
    tier: str
    params: tuple
    scene: Scene
    screen_seed: int
    n_moving: int  # dynamic bodies in the base scene, before the action

    def to_dict(self):
        return {"task_id": self.task_id, "template_id": self.template_id,
                "tier": self.tier, "params": list(self.params),
                "screen_seed": self.screen_seed, "n_moving": self.n_moving,
                "scene": self.scene.to_dict()}

    @staticmethod
    def from_dict(d):
        return Task(d["task_id"], d["template_id"], d["tier"],
                    tuple(d["params"]), Scene.from_dict(d["scene"]),
                    d["screen_seed"], d["n_moving"])


@dataclass(frozen=True)
class Split:
    fold_id: int
    train_ids: tuple
    test_ids: tuple
    mode: str


@dataclass(frozen=True)
class ScreenConfig:
    """Solvability envelope: in `candidates` uniform actions, the solve
    count must land in [min_solved, max_solved] and the bare scene must
    not solve itself."""

    candidates: int = 1000
    min_solved: int = 4
    max_solved: int = 200
    max_attempts: int = 60


def sample_actions(task: Task, count: int, seed: int,
                   max_reject_rate: float = 0.999) -> list[Action]:
    """Uniform draws over the action cube, rejection-filtered for validity."""
    if count < 1:
        raise ValueError("count must be >= 1")
    dim = TIER_DIMS[task.tier]
    nb = dim // 3
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    out: list[Action] = []
    drawn = 0
    while len(out) < count:
        chunk = max(1024, count)
        raw = rng.random((chunk, dim))
        drawn += chunk
        centers = raw.reshape(chunk, nb, 3)[:, :, :2].copy()
        radii = action_radius(raw.reshape(chunk, nb, 3)[:, :, 2])
        ok = placement_valid_batch(task.scene, centers, radii)
        for row in raw[ok]:
            out.append(Action(task.tier, tuple(row)))
            if len(out) == count:
                break
        if drawn >= 64 * chunk and len(out) < (1.0 - max_reject_rate) * drawn:
            raise DynaqError(
                f"task {task.task_id}: action rejection rate above "
                f"{max_reject_rate:.1%}, scene is degenerate")
    return out


def label_actions(task: Task, actions: Sequence[Action],
                  cfg: SimConfig | None = None) -> np.ndarray:
    """True where the action's rollout solves the task."""
    rolls = rollout_batch(task.scene, actions, cfg)
    return np.array([r.solved for r in rolls], dtype=bool)


def simulate_screen(task: Task, screen: ScreenConfig,
                    cfg: SimConfig | None = None):
    """Re-run the task's stored screen: (actions, labels, rollouts)."""
    actions = sample_actions(task, screen.candidates, task.screen_seed)
    rolls = rollout_batch(task.scene, actions, cfg)
    labels = np.array([r.solved for r in rolls], dtype=bool)
    return actions, labels, rolls


def generate_tasks(templates: Sequence[TaskTemplate], instances_per_template: int,
                   seed: int, cfg: SimConfig | None = None,
                   screen: ScreenConfig | None = None) -> list[Task]:
    """Draw solvable task instances from each template, deterministically."""
    from .templates import registry_index  # local: templates imports physics only

    if instances_per_template < 1:
        raise ValueError("instances_per_template must be >= 1")
    cfg = cfg or SimConfig()
    screen = screen or ScreenConfig()
    tasks = []
    for tpl in templates:
        ti = registry_index(tpl.template_id)
        for ii in range(instances_per_template):
            task = None
            for attempt in range(screen.max_attempts):
                ss = np.random.SeedSequence([seed, ti, ii, attempt])
                rng = np.random.default_rng(ss)
                params = tpl.draw_params(rng)
                scene = tpl.build(params).validate()
                screen_seed = int(rng.integers(0, 2 ** 62))
                cand = Task(f"{tpl.template_id}-{ii:03d}", tpl.template_id,
                            tpl.tier, tuple(float(p) for p in params), scene,
                            screen_seed, len(scene.dynamic_bodies()))
                base = rollout_batch(scene, [()], cfg)[0]
                if base.solved:
                    continue
                try:
                    _, labels, _ = simulate_screen(cand, screen, cfg)
                except DynaqError:
                    continue
                n_solved = int(labels.sum())
                if screen.min_solved <= n_solved <= screen.max_solved:
                    task = cand
                    break
            if task is None:
                raise GenerationError(
                    f"template {tpl.template_id}: no in-envelope instance "
                    f"after {screen.max_attempts} attempts (instance {ii})")
            tasks.append(task)
    return tasks


def make_splits(tasks: Sequence[Task], folds: int, mode: str,
                seed: int = 0) -> list[Split]:
    """Deterministic k-fold splits in either generalization setting."""
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if mode not in (WITHIN, CROSS):
        raise ValueError(f"unknown split mode {mode!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, folds]))
    by_template: dict[str, list[str]] = {}
    for t in tasks:
        by_template.setdefault(t.template_id, []).append(t.task_id)
    templates = sorted(by_template)

    if mode == CROSS:
        if len(templates) < folds:
            raise DynaqError(
                f"cross-template folding needs >= {folds} templates, "
                f"got {len(templates)}")
        order = [templates[i] for i in rng.permutation(len(templates))]
        splits = []
        for f in range(folds):
            test_t = {t for i, t in enumerate(order) if i % folds == f}
            test = [tid for t in templates if t in test_t for tid in by_template[t]]
            train = [tid for t in templates if t not in test_t for tid in by_template[t]]
            splits.append(Split(f, tuple(train), tuple(test), mode))
        return splits

    for t in templates:
        if len(by_template[t]) < folds:
            raise DynaqError(
                f"within-template folding needs >= {folds} instances per "
                f"template; {t} has {len(by_template[t])}")
    shuffled = {t: [by_template[t][i] for i in rng.permutation(len(by_template[t]))]
                for t in templates}
    splits = []
    for f in range(folds):
        train, test = [], []
        for t in templates:
            for i, tid in enumerate(shuffled[t]):
                (test if i % folds == f else train).append(tid)
        splits.append(Split(f, tuple(sorted(train)), tuple(sorted(test)), mode))
    return splits


# ---------------------------------------------------------------------------
# file io

_TASKFILE_VERSION = 1
_SPLITFILE_VERSION = 1


def save_tasks(tasks: Sequence[Task], path, cfg: SimConfig | None = None) -> None:
    cfg = cfg or SimConfig()
    doc = {"format_version": _TASKFILE_VERSION,
           "sim": {"dt": cfg.dt, "stride": cfg.stride, "max_frames": cfg.max_frames,
                   "restitution": cfg.restitution, "friction": cfg.friction,
                   "max_speed": cfg.max_speed, "rest_speed": cfg.rest_speed,
                   "slop": cfg.slop, "correction": cfg.correction,
                   "walls": cfg.walls, "contact_tol": cfg.contact_tol},
           "tasks": [t.to_dict() for t in tasks]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_tasks(path) -> tuple[list[Task], SimConfig]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != _TASKFILE_VERSION:
        raise DynaqError(f"{path}: unsupported task file version")
    cfg = SimConfig(**doc["sim"])
    return [Task.from_dict(d) for d in doc["tasks"]], cfg


def save_splits(splits: Sequence[Split], path) -> None:
    doc = {"format_version": _SPLITFILE_VERSION,
           "mode": splits[0].mode if splits else WITHIN,
           "folds": [{"fold_id": s.fold_id, "train": list(s.train_ids),
                      "test": list(s.test_ids)} for s in splits]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_splits(path) -> list[Split]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != _SPLITFILE_VERSION:
        raise DynaqError(f"{path}: unsupported split file version")
    return [Split(f["fold_id"], tuple(f["train"]), tuple(f["test"]), doc["mode"])
            for f in doc["folds"]]
