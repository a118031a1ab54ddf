"""Deterministic 2D desk-scale manipulation world with scripted experts.

Three tasks on the unit square:

* ``reach``     move the robot to the goal.
* ``push``      push the object (a disc) onto the goal.
* ``pickplace`` grasp the object, carry it to the goal, release it.

Dynamics are kinematic. Actions are ``(dx, dy, grip)``; each displacement
component is clamped to ``[-delta_max, delta_max]`` and ``grip >= 0`` closes
the gripper. The state vector fed to policies is ``(x, y, gripper)`` with the
gripper encoded as -1 (open) / +1 (closed).

Rendering rule: pixel ``(i, j)`` (row ``i`` runs along y, column ``j`` along
x) samples the world point ``(j / W, i / H)``; a disc of radius ``r`` at
``c`` lights the pixel iff ``|p - c| <= r``. Discs add their intensity and the
result is clipped to 1. No anti-aliasing.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArtifactIOError, EpisodeError, GenerationError
from .ndmath import RngStream, stream_id

TASKS = ("reach", "push", "pickplace")
DATASET_FORMAT = "nodiff-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class EnvConfig:
    delta_max: float = 0.05
    success_eps: float = 0.04
    grasp_radius: float = 0.06
    episode_cap: int = 80
    height: int = 16
    width: int = 16
    channels: int = 1
    n_views: int = 1
    contact_dist: float = 0.10
    robot_radius_px: float = 0.08
    object_radius_px: float = 0.12
    goal_radius_px: float = 0.15
    robot_intensity: float = 0.55
    object_intensity: float = 0.30
    goal_intensity: float = 0.15
    # demo collection executes the expert action plus N(0, (noise * delta_max)^2)
    # on x and y, while recording the clean label, so demos show recoveries
    demo_noise: dict = field(default_factory=lambda: {"reach": 0.0, "push": 0.1, "pickplace": 0.0})
    # (x_lo, x_hi, y_lo, y_hi) per task and entity
    ranges: dict = field(
        default_factory=lambda: {
            "reach": {
                "robot": (0.02, 0.12, 0.25, 0.75),
                "object": (0.40, 0.60, 0.10, 0.90),
                "goal": (0.82, 0.95, 0.25, 0.75),
            },
            "push": {
                "robot": (0.05, 0.15, 0.40, 0.60),
                "object": (0.30, 0.40, 0.42, 0.58),
                "goal": (0.58, 0.70, 0.40, 0.60),
            },
            "pickplace": {
                "robot": (0.10, 0.90, 0.10, 0.90),
                "object": (0.10, 0.40, 0.15, 0.85),
                "goal": (0.60, 0.90, 0.15, 0.85),
            },
        }
    )

    @property
    def state_dim(self) -> int:
        return 3

    @property
    def action_dim(self) -> int:
        return 3

    @property
    def image_size(self) -> int:
        return self.n_views * self.height * self.width * self.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ranges"] = {t: {k: list(v) for k, v in r.items()} for t, r in self.ranges.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        if "ranges" in d:
            d["ranges"] = {t: {k: tuple(v) for k, v in r.items()} for t, r in d["ranges"].items()}
        return cls(**d)


DEFAULT_ENV = EnvConfig()


@dataclass(frozen=True)
class WorldState:
    task: str
    robot: tuple[float, float]
    object: tuple[float, float]
    goal: tuple[float, float]
    closed: bool = False
    held: bool = False
    steps: int = 0

    def vector(self) -> np.ndarray:
        return np.array([self.robot[0], self.robot[1], 1.0 if self.closed else -1.0])


def _clip01(p) -> tuple[float, float]:
    return (min(max(float(p[0]), 0.0), 1.0), min(max(float(p[1]), 0.0), 1.0))


def _dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def reset(task: str, seed: int, env: EnvConfig = DEFAULT_ENV) -> tuple[WorldState, tuple[np.ndarray, np.ndarray]]:
    """Initial state with positions drawn uniformly from ``env.ranges[task]``."""
    if task not in TASKS:
        raise EpisodeError(f"unknown task {task!r}; expected one of {TASKS}", component="toyworld")
    rng = RngStream.named(seed, "episode")
    u = rng.uniform(6)
    r = env.ranges[task]

    def draw(name, a, b):
        x0, x1, y0, y1 = r[name]
        return (x0 + (x1 - x0) * float(a), y0 + (y1 - y0) * float(b))

    state = WorldState(
        task=task,
        robot=draw("robot", u[0], u[1]),
        object=draw("object", u[2], u[3]),
        goal=draw("goal", u[4], u[5]),
    )
    return state, observe(state, env)


def is_success(state: WorldState, env: EnvConfig = DEFAULT_ENV) -> bool:
    if state.task == "reach":
        return _dist(state.robot, state.goal) <= env.success_eps
    if state.task == "push":
        return _dist(state.object, state.goal) <= env.success_eps
    return (not state.held) and _dist(state.object, state.goal) <= env.success_eps


def step(state: WorldState, action, env: EnvConfig = DEFAULT_ENV) -> tuple[WorldState, bool]:
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (3,) or not np.isfinite(a).all():
        raise EpisodeError(f"action must be 3 finite numbers, got {action!r}", component="toyworld")
    if state.steps >= env.episode_cap:
        raise EpisodeError(f"episode already at cap of {env.episode_cap} steps", component="toyworld")
    d = np.clip(a[:2], -env.delta_max, env.delta_max)
    robot = _clip01((state.robot[0] + d[0], state.robot[1] + d[1]))
    obj, closed, held = state.object, state.closed, state.held

    if a[2] >= 0.0:
        if not closed:
            closed = True
            if state.task == "pickplace" and _dist(robot, obj) <= env.grasp_radius:
                held = True
    else:
        closed, held = False, False

    if held:
        obj = robot
    elif state.task == "push":
        gap = _dist(robot, obj)
        if gap < env.contact_dist:
            if gap == 0.0:
                n = (1.0, 0.0)
            else:
                n = ((obj[0] - robot[0]) / gap, (obj[1] - robot[1]) / gap)
            obj = _clip01((robot[0] + env.contact_dist * n[0], robot[1] + env.contact_dist * n[1]))

    new = WorldState(state.task, robot, obj, state.goal, closed, held, state.steps + 1)
    return new, is_success(new, env)


def rasterize(discs, env: EnvConfig = DEFAULT_ENV) -> np.ndarray:
    """Image ``(H, W, C)`` from ``(x, y, radius, intensity)`` discs."""
    H, W = env.height, env.width
    img = np.zeros((H, W))
    ys = (np.arange(H) / H)[:, None]
    xs = (np.arange(W) / W)[None, :]
    for x, y, r, val in discs:
        img += val * ((xs - x) ** 2 + (ys - y) ** 2 <= r * r)
    img = np.minimum(img, 1.0)
    return np.repeat(img[:, :, None], env.channels, axis=2)


def _scene_discs(state: WorldState, env: EnvConfig, offset=(0.0, 0.0)):
    ox, oy = offset
    discs = [(state.goal[0] + ox, state.goal[1] + oy, env.goal_radius_px, env.goal_intensity)]
    if state.task != "reach":
        discs.append((state.object[0] + ox, state.object[1] + oy, env.object_radius_px, env.object_intensity))
    discs.append((state.robot[0] + ox, state.robot[1] + oy, env.robot_radius_px, env.robot_intensity))
    return discs


def render(state: WorldState, env: EnvConfig = DEFAULT_ENV) -> np.ndarray:
    """Views stacked as ``(N_i, H, W, C)``.

    View 0 is the fixed workspace camera. Further views are robot-centred
    (the scene shifted so the robot sits at the image centre).
    """
    views = [rasterize(_scene_discs(state, env), env)]
    for _ in range(1, env.n_views):
        shift = (0.5 - state.robot[0], 0.5 - state.robot[1])
        views.append(rasterize(_scene_discs(state, env, shift), env))
    return np.stack(views)


def observe(state: WorldState, env: EnvConfig = DEFAULT_ENV) -> tuple[np.ndarray, np.ndarray]:
    return state.vector(), render(state, env)


def _toward(src, dst, limit: float) -> tuple[float, float]:
    dx, dy = dst[0] - src[0], dst[1] - src[1]
    n = math.hypot(dx, dy)
    if n > limit:
        dx, dy = dx * limit / n, dy * limit / n
    return dx, dy


def _push_target(state: WorldState, env: EnvConfig) -> tuple[float, float]:
    """Where the pushing expert wants the robot to be after this step."""
    obj, goal, robot = state.object, state.goal, state.robot
    gd = _dist(obj, goal)
    u = ((goal[0] - obj[0]) / gd, (goal[1] - obj[1]) / gd) if gd > 0 else (1.0, 0.0)
    v = (robot[0] - obj[0], robot[1] - obj[1])
    along = v[0] * u[0] + v[1] * u[1]
    lateral = abs(v[0] * u[1] - v[1] * u[0])
    cd = env.contact_dist
    if along < -0.5 * cd and lateral < 0.045:
        s = min(env.delta_max, gd)
        return (obj[0] - cd * u[0] + s * u[0], obj[1] - cd * u[1] + s * u[1])
    staging = (obj[0] - (cd + 0.04) * u[0], obj[1] - (cd + 0.04) * u[1])
    # detour around the object if the straight path to the staging point would touch it
    if _segment_point_dist(robot, staging, obj) < cd + 0.01 and _dist(robot, staging) > 1e-9:
        n = (-u[1], u[0])
        side = 1.0 if (v[0] * n[0] + v[1] * n[1]) >= 0 else -1.0
        way = (obj[0] + side * (cd + 0.05) * n[0] - 0.5 * cd * u[0], obj[1] + side * (cd + 0.05) * n[1] - 0.5 * cd * u[1])
        return way
    return staging


def _segment_point_dist(a, b, p) -> float:
    ab = (b[0] - a[0], b[1] - a[1])
    L2 = ab[0] ** 2 + ab[1] ** 2
    t = 0.0 if L2 == 0 else max(0.0, min(1.0, ((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / L2))
    return _dist((a[0] + t * ab[0], a[1] + t * ab[1]), p)


def expert_action(state: WorldState, task: str | None = None, env: EnvConfig = DEFAULT_ENV) -> np.ndarray:
    """Proportional controller (gain 1, norm-clamped to ``delta_max``) toward the current sub-goal."""
    task = task or state.task
    dm = env.delta_max
    if task == "reach":
        dx, dy = _toward(state.robot, state.goal, dm)
        return np.array([dx, dy, -1.0])
    if task == "push":
        dx, dy = _toward(state.robot, _push_target(state, env), dm)
        return np.array([dx, dy, -1.0])
    if task == "pickplace":
        if not state.held:
            if _dist(state.robot, state.object) <= 0.01:
                return np.array([0.0, 0.0, 1.0])
            dx, dy = _toward(state.robot, state.object, dm)
            return np.array([dx, dy, -1.0])
        if _dist(state.robot, state.goal) <= 0.01:
            return np.array([0.0, 0.0, -1.0])
        dx, dy = _toward(state.robot, state.goal, dm)
        return np.array([dx, dy, 1.0])
    raise EpisodeError(f"unknown task {task!r}", component="toyworld")


@dataclass
class EpisodeRecord:
    task: str
    seed: int
    states: np.ndarray  # (L, 3)
    images: np.ndarray  # (L, image_size)
    actions: np.ndarray  # (L, 3)
    success: bool
    positions: np.ndarray | None = None  # (L + 1, 2) robot path, for plotting

    def __len__(self) -> int:
        return len(self.actions)

    def is_trainable(self, T_o: int, T_p: int) -> bool:
        return len(self) >= T_o + T_p


def episode_seed(base_seed: int, index: int, purpose: str = "dataset") -> int:
    return stream_id(purpose, base_seed, index) >> 1


def run_expert_episode(task: str, seed: int, env: EnvConfig = DEFAULT_ENV, noise: float = 0.0) -> EpisodeRecord:
    """Expert rollout; ``noise`` perturbs executed x/y moves, not the recorded labels."""
    state, (s, img) = reset(task, seed, env)
    rng = RngStream.named(seed, "demo-noise")
    states, images, actions, path = [], [], [], [state.robot]
    success = False
    while state.steps < env.episode_cap:
        a = expert_action(state, task, env)
        states.append(s)
        images.append(img.ravel())
        actions.append(a)
        executed = a
        if noise > 0.0:
            executed = a + np.concatenate([noise * env.delta_max * rng.normal(2), [0.0]])
        state, success = step(state, executed, env)
        path.append(state.robot)
        s, img = observe(state, env)
        if success:
            break
    return EpisodeRecord(task, seed, np.array(states), np.array(images), np.array(actions), success, np.array(path))


def _episode_to_json(i: int, ep: EpisodeRecord) -> dict:
    return {
        "index": i,
        "seed": ep.seed,
        "task": ep.task,
        "success": bool(ep.success),
        "length": len(ep),
        "states": ep.states.tolist(),
        "images": ep.images.tolist(),
        "actions": ep.actions.tolist(),
    }


def generate_dataset(task: str, n_episodes: int, seed: int, path, env: EnvConfig = DEFAULT_ENV) -> Path:
    """Write ``n_episodes`` expert demonstrations as newline-delimited JSON.

    Line 0 is a header with the generation config and all environment
    constants; every other line is one episode. Floats use Python's
    shortest round-trip repr, so reloading is bit-exact.
    """
    if n_episodes < 1:
        raise GenerationError(f"n_episodes must be >= 1, got {n_episodes}", component="toyworld")
    if task not in TASKS:
        raise GenerationError(f"unknown task {task!r}", component="toyworld")
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "task": task,
        "n_episodes": n_episodes,
        "seed": seed,
        "env": env.to_dict(),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for i in range(n_episodes):
        ep = run_expert_episode(task, episode_seed(seed, i), env, env.demo_noise.get(task, 0.0))
        if not ep.success:
            raise GenerationError(f"expert failed on episode {i} (seed {ep.seed})", component="toyworld")
        lines.append(json.dumps(_episode_to_json(i, ep), sort_keys=True))
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
        tmp.replace(path)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write dataset {path}: {exc}", component="toyworld") from exc
    return path


def load_dataset(path) -> tuple[dict, list[EpisodeRecord]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot read dataset {path}: {exc}", component="toyworld") from exc
    lines = text.splitlines()
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise ArtifactIOError(f"{path} is not a version-{DATASET_VERSION} dataset", component="toyworld")
    episodes = []
    for line in lines[1:]:
        rec = json.loads(line)
        episodes.append(
            EpisodeRecord(
                task=rec["task"],
                seed=rec["seed"],
                states=np.array(rec["states"], dtype=np.float64).reshape(-1, 3),
                images=np.array(rec["images"], dtype=np.float64).reshape(rec["length"], -1),
                actions=np.array(rec["actions"], dtype=np.float64).reshape(-1, 3),
                success=rec["success"],
            )
        )
    return header, episodes


def env_from_header(header: dict) -> EnvConfig:
    return EnvConfig.from_dict(header["env"])


__all__ = [
    "TASKS",
    "EnvConfig",
    "DEFAULT_ENV",
    "WorldState",
    "EpisodeRecord",
    "reset",
    "step",
    "render",
    "rasterize",
    "observe",
    "expert_action",
    "is_success",
    "run_expert_episode",
    "episode_seed",
    "generate_dataset",
    "load_dataset",
    "env_from_header",
]
