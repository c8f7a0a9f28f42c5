"""Synthetic tabletop tasks, scripted experts and the keypose-level evaluator.

Scenes are axis-aligned boxes on a table at ``z = 0``, seen by one
top-down depth camera. Every pixel also carries a one-hot attribute
vector (table, three block colours, stacking platform), so lifting a
rendered frame yields a coloured point cloud.
"""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, ContractError, ValidationError
from .geometry import CameraModel
from .keypose import Action, RawTrajectory, extract_keyposes
from .pointcloud import FeatureCloud, lift_depth_image

TABLE, PLATFORM = 0, 4
N_COLOURS = 3
ATTR_DIM = 5
DOWN_ROT6D = np.array([1.0, 0.0, 0.0, 0.0, -1.0, 0.0])

IMAGE_SIZE = 32
CELL = 2
CAMERA_HEIGHT = 1.0
HALF_EXTENT = 0.3
STEP_DT = 0.05
TOLERANCE = 0.05


def default_camera(image_size: int = IMAGE_SIZE, height: float = CAMERA_HEIGHT,
                   half_extent: float = HALF_EXTENT) -> CameraModel:
    """Top-down pinhole camera whose image spans ``[-half_extent, half_extent]^2`` of the table."""
    f = (image_size / 2.0) * height / half_extent
    c = (image_size - 1) / 2.0
    ext = np.eye(4)
    ext[:3, :3] = np.diag([1.0, -1.0, -1.0])
    ext[2, 3] = height
    return CameraModel(f, f, c, c, ext)


def default_bounds() -> np.ndarray:
    return np.array([[-HALF_EXTENT, -HALF_EXTENT, 0.0], [HALF_EXTENT, HALF_EXTENT, 0.6]])


@dataclass
class SceneObject:
    """An axis-aligned box; ``kind`` indexes the attribute one-hot."""

    center: np.ndarray
    size: np.ndarray
    kind: int

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        self.kind = int(self.kind)
        if np.any(self.size <= 0):
            raise ValidationError("object extents must be positive")
        if not 0 < self.kind < ATTR_DIM:
            raise ValidationError(f"object kind must lie in [1, {ATTR_DIM}), got {self.kind}")

    @property
    def attributes(self) -> np.ndarray:
        return np.eye(ATTR_DIM)[self.kind]

    @property
    def top(self) -> np.ndarray:
        return self.center + np.array([0.0, 0.0, self.size[2] / 2])


@dataclass
class SceneSpec:
    objects: list
    bounds: np.ndarray = field(default_factory=default_bounds)
    camera: CameraModel = field(default_factory=default_camera)
    image_size: int = IMAGE_SIZE

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64)
        if self.bounds.shape != (2, 3) or np.any(self.bounds[0] >= self.bounds[1]):
            raise ValidationError("bounds must be a (2,3) box with lo < hi")
        for obj in self.objects:
            if np.any(obj.center < self.bounds[0]) or np.any(obj.center > self.bounds[1]):
                raise ValidationError(f"object at {obj.center} lies outside the workspace")

    def copy(self) -> "SceneSpec":
        return SceneSpec(copy.deepcopy(self.objects), self.bounds.copy(), self.camera, self.image_size)


def render(scene: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast the scene: ``(depth (H,W), attributes (H,W,ATTR_DIM))``.

    Depth is measured along the optical axis; rays that miss everything
    (including the table plane) get depth 0.
    """
    cam, n = scene.camera, scene.image_size
    cols, rows = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64))
    d_cam = np.stack([(cols - cam.cx) / cam.fx, (rows - cam.cy) / cam.fy, np.ones_like(cols)], axis=-1)
    R, origin = cam.extrinsic[:3, :3], cam.extrinsic[:3, 3]
    dirs = d_cam @ R.T  # world direction per unit optical depth
    depth = np.full((n, n), np.inf)
    label = np.zeros((n, n), dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        s_table = -origin[2] / dirs[..., 2]
        hit = s_table > 0
        depth[hit] = s_table[hit]
        for obj in scene.objects:
            lo, hi = obj.center - obj.size / 2, obj.center + obj.size / 2
            t1 = (lo - origin) / dirs
            t2 = (hi - origin) / dirs
            t_near = np.nanmax(np.minimum(t1, t2), axis=-1)
            t_far = np.nanmin(np.maximum(t1, t2), axis=-1)
            box_hit = (t_near <= t_far) & (t_near > 0) & (t_near < depth)
            depth[box_hit] = t_near[box_hit]
            label[box_hit] = obj.kind
    depth[~np.isfinite(depth)] = 0.0
    attrs = np.eye(ATTR_DIM)[label]
    attrs[depth == 0] = 0.0
    return depth, attrs


def observe(scene: SceneSpec, cell: int = CELL) -> FeatureCloud:
    depth, attrs = render(scene)
    return lift_depth_image(depth, attrs, scene.camera, cell)


def lift_frame(frame, scene: SceneSpec, cell: int = CELL) -> FeatureCloud:
    depth, attrs = frame
    return lift_depth_image(depth, attrs, scene.camera, cell)


# -- demonstrations --------------------------------------------------------------
@dataclass
class Demonstration:
    """One expert episode.

    ``frames`` maps a step index to the ``(depth, attributes)`` image
    rendered at that step; only decision steps (the start and every keypose
    but the last) carry a frame.
    """

    task_id: int
    scene: SceneSpec
    raw: RawTrajectory
    keypose_indices: list
    frames: dict = field(default_factory=dict)

    def __post_init__(self):
        k = list(map(int, self.keypose_indices))
        if not k or any(b <= a for a, b in zip(k, k[1:])):
            raise ValidationError("keypose indices must be non-empty and strictly increasing")
        if k[-1] != len(self.raw) - 1:
            raise ValidationError("the last keypose must be the final step")
        self.keypose_indices = k

    @property
    def language_slot(self) -> int:
        return self.task_id

    @property
    def decision_steps(self) -> list[int]:
        return [0] + self.keypose_indices[:-1]

    def frame_at(self, step: int):
        """Latest stored frame at or before ``step``."""
        usable = [s for s in self.frames if s <= step]
        if not usable:
            raise ContractError(f"no frame at or before step {step}")
        return self.frames[max(usable)]


def min_jerk(start, end, n: int) -> np.ndarray:
    """``n`` positions after ``start`` ending exactly at ``end``."""
    tau = np.arange(1, n + 1) / n
    s = 10 * tau ** 3 - 15 * tau ** 4 + 6 * tau ** 5
    out = start + s[:, None] * (np.asarray(end) - start)
    out[-1] = end
    return out


def move_steps(dist: float) -> int:
    return int(np.clip(round(dist / 0.012), 6, 30))


class _Script:
    """Accumulates per-step gripper states and the arrival step of each waypoint."""

    def __init__(self, start: Action):
        self.pos = [start.pos.copy()]
        self.rot = [start.rot.copy()]
        self.open = [start.open]
        self.events = []  # (step, Action) after which the world changes

    def move(self, target, n: int | None = None):
        cur = self.pos[-1]
        n = n or move_steps(float(np.linalg.norm(np.asarray(target) - cur)))
        for p in min_jerk(cur, np.asarray(target, dtype=np.float64), n):
            self.pos.append(p)
            self.rot.append(self.rot[-1].copy())
            self.open.append(self.open[-1])
        return self

    def hold(self, n: int):
        for _ in range(n):
            self.pos.append(self.pos[-1].copy())
            self.rot.append(self.rot[-1].copy())
            self.open.append(self.open[-1])
        return self

    def toggle(self):
        self.pos.append(self.pos[-1].copy())
        self.rot.append(self.rot[-1].copy())
        self.open.append(not self.open[-1])
        self.events.append((len(self.pos) - 1, Action(self.pos[-1], self.rot[-1], self.open[-1])))
        return self

    def trajectory(self) -> RawTrajectory:
        n = len(self.pos)
        return RawTrajectory(np.arange(n) * STEP_DT, np.array(self.pos), np.array(self.rot), np.array(self.open))


# -- episodes and tasks ------------------------------------------------------------
@dataclass
class Episode:
    """Mutable world state during a rollout."""

    scene: SceneSpec
    gripper: Action
    history: list
    held: int | None = None
    placed: list = field(default_factory=list)

    def proprio(self, history_len: int) -> np.ndarray:
        h = self.history[-history_len:]
        h = [h[0]] * (history_len - len(h)) + h
        return np.array(h)


@dataclass
class Outcome:
    success: bool
    mode: int
    final_error: float


class Task:
    name = ""
    task_id = -1
    n_keyposes = 1
    tolerance = TOLERANCE
    keypose_rules = ("gripper", "stop")

    def new_episode(self, rng: np.random.Generator) -> Episode:
        raise NotImplementedError

    def script(self, episode: Episode, rng: np.random.Generator) -> _Script:
        raise NotImplementedError

    def outcome(self, episode: Episode) -> Outcome:
        raise NotImplementedError

    def n_modes(self) -> int:
        raise NotImplementedError

    # shared machinery
    def apply(self, episode: Episode, action: Action) -> None:
        """Move the gripper to ``action``; closing grasps the nearest object top, opening releases."""
        was_open = episode.gripper.open
        episode.gripper = Action(action.pos, action.rot, action.open)
        episode.history.append(action.pos.copy())
        objs = episode.scene.objects
        if episode.held is not None:
            obj = objs[episode.held]
            obj.center = action.pos - np.array([0.0, 0.0, obj.size[2] / 2])
        if was_open and not action.open and episode.held is None:
            movable = [i for i, o in enumerate(objs) if o.kind != PLATFORM and i not in episode.placed]
            if movable:
                d = [np.linalg.norm(objs[i].top - action.pos) for i in movable]
                j = int(np.argmin(d))
                if d[j] < self.tolerance:
                    episode.held = movable[j]
        elif not was_open and action.open and episode.held is not None:
            episode.placed.append(episode.held)
            episode.held = None

    def demonstration(self, rng: np.random.Generator) -> Demonstration:
        episode = self.new_episode(rng)
        initial = episode.scene.copy()
        script = self.script(copy.deepcopy(episode), rng)
        raw = script.trajectory()
        keyposes = extract_keyposes(raw, rules=self.keypose_rules)
        frames = {}
        replay = copy.deepcopy(episode)
        events = iter(script.events)
        pending = next(events, None)
        for step in [0] + keyposes[:-1]:
            while pending is not None and pending[0] <= step:
                self.apply(replay, pending[1])
                pending = next(events, None)
            if replay.held is not None:
                obj = replay.scene.objects[replay.held]
                obj.center = raw.pos[step] - np.array([0.0, 0.0, obj.size[2] / 2])
            frames[step] = render(replay.scene)
        return Demonstration(self.task_id, initial, raw, keyposes, frames)

    def expert_keyposes(self, episode: Episode, rng: np.random.Generator) -> list[Action]:
        raw = self.script(copy.deepcopy(episode), rng).trajectory()
        return [raw.action(i) for i in extract_keyposes(raw, rules=self.keypose_rules)]


def _start_action(pos) -> Action:
    return Action(pos, DOWN_ROT6D, True)


class BimodalReach(Task):
    """Two identical pillars placed symmetrically about the gripper; touching either top succeeds."""

    name = "bimodal_reach"
    task_id = 0
    n_keyposes = 2
    pillar_size = (0.06, 0.06)

    def new_episode(self, rng):
        mid = rng.uniform(-0.08, 0.08, size=2)
        phi = rng.uniform(0, np.pi)
        r = rng.uniform(0.09, 0.16)
        height = rng.uniform(0.12, 0.22)
        offset = r * np.array([np.cos(phi), np.sin(phi)])
        objs = [SceneObject([*(mid + sgn * offset), height / 2], [*self.pillar_size, height], 1)
                for sgn in (1.0, -1.0)]
        start = np.array([mid[0], mid[1], rng.uniform(0.3, 0.4)])
        return Episode(SceneSpec(objs), _start_action(start), [start.copy()])

    def goals(self, episode_or_scene) -> np.ndarray:
        scene = getattr(episode_or_scene, "scene", episode_or_scene)
        tops = np.array([o.top for o in scene.objects if o.kind == 1])
        order = np.lexsort((tops[:, 1], tops[:, 0]))
        return tops[order]

    def n_modes(self):
        return 2

    def script(self, episode, rng):
        goal = self.goals(episode)[int(rng.integers(2))]
        return _Script(episode.gripper).move(goal, 20).hold(2).toggle()

    def outcome(self, episode):
        dist = np.linalg.norm(self.goals(episode) - episode.gripper.pos, axis=1)
        nearest = int(np.argmin(dist))
        ok = bool(dist[nearest] < self.tolerance)
        return Outcome(ok, nearest if ok else -1, float(dist[nearest]))


class OrderedStack(Task):
    """Stack ``k`` coloured blocks on a platform in any order."""

    name = "ordered_stack"
    task_id = 1
    block = 0.05
    platform_height = 0.02

    def __init__(self, k_objects: int = 2):
        if k_objects < 2 or k_objects > N_COLOURS:
            raise ConfigError(f"k_objects must lie in [2, {N_COLOURS}], got {k_objects}")
        self.k = k_objects
        self.n_keyposes = 4 * k_objects + 1
        self.orders = list(itertools.permutations(range(k_objects)))

    def new_episode(self, rng):
        spots = []
        while len(spots) < self.k + 1:
            p = rng.uniform(-0.22, 0.22, size=2)
            if all(np.linalg.norm(p - q) > 0.1 for q in spots):
                spots.append(p)
        b, ph = self.block, self.platform_height
        objs = [SceneObject([*spots[0], ph / 2], [0.08, 0.08, ph], PLATFORM)]
        objs += [SceneObject([*spots[i + 1], b / 2], [b, b, b], 1 + i) for i in range(self.k)]
        start = np.array([0.0, 0.0, 0.35])
        return Episode(SceneSpec(objs), _start_action(start), [start.copy()])

    def n_modes(self):
        return len(self.orders)

    def script(self, episode, rng):
        objs = episode.scene.objects
        base = objs[0].top
        s = _Script(episode.gripper)
        for level, idx in enumerate(rng.permutation(self.k)):
            s.move(objs[1 + idx].top).hold(2).toggle().hold(2)
            s.move(base + np.array([0.0, 0.0, (level + 1) * self.block])).hold(2).toggle().hold(2)
        return s

    def stack_heights(self, episode) -> list[float]:
        return [float(episode.scene.objects[i].top[2]) for i in episode.placed]

    def outcome(self, episode):
        objs = episode.scene.objects
        base = objs[0].top
        blocks = [i for i in episode.placed if i != 0]
        order = tuple(i - 1 for i in blocks)
        if len(blocks) != self.k or episode.held is not None:
            err = max(float(np.linalg.norm(objs[i].center[:2] - base[:2])) for i in range(1, self.k + 1))
            return Outcome(False, -1, err)
        errs = []
        for level, i in enumerate(blocks):
            want = base + np.array([0.0, 0.0, (level + 1) * self.block])
            errs.append(float(np.linalg.norm(objs[i].top - want)))
        ok = max(errs) < self.tolerance
        return Outcome(ok, self.orders.index(order) if ok else -1, max(errs))


TASKS = {BimodalReach.name: BimodalReach, OrderedStack.name: OrderedStack}
TASK_IDS = {cls.task_id: name for name, cls in TASKS.items()}


def make_task(name: str, **kwargs) -> Task:
    if name not in TASKS:
        raise ConfigError(f"unknown task {name!r}; expected one of {sorted(TASKS)}")
    return TASKS[name](**kwargs)


def task_from_demo(demo: Demonstration) -> Task:
    name = TASK_IDS.get(demo.task_id)
    if name is None:
        raise ConfigError(f"unknown task id {demo.task_id}")
    if name == OrderedStack.name:
        return OrderedStack(sum(o.kind != PLATFORM for o in demo.scene.objects))
    return make_task(name)


def generate(task: Task, seed: int, n_demos: int) -> list[Demonstration]:
    """``n_demos`` expert demonstrations; demo ``i`` uses its own child seed."""
    if n_demos < 1:
        raise ConfigError("n_demos must be >= 1")
    seqs = np.random.SeedSequence(seed).spawn(n_demos)
    return [task.demonstration(np.random.default_rng(s)) for s in seqs]


def generate_bimodal_reach(seed: int, n_demos: int) -> list[Demonstration]:
    if n_demos < 2:
        raise ConfigError("bimodal reach needs n_demos >= 2")
    return generate(BimodalReach(), seed, n_demos)


def generate_ordered_stack(seed: int, n_demos: int, k_objects: int = 2) -> list[Demonstration]:
    return generate(OrderedStack(k_objects), seed, n_demos)


# -- evaluation ------------------------------------------------------------------------
@dataclass
class Observation:
    """What a policy sees before predicting the next keypose."""

    cloud: FeatureCloud
    task_id: int
    proprio: np.ndarray
    gripper: Action


def observation(task: Task, episode: Episode, history_len: int, cell: int = CELL) -> Observation:
    return Observation(observe(episode.scene, cell), task.task_id, episode.proprio(history_len),
                       episode.gripper)


class ExpertPolicy:
    """Replays the scripted expert's keyposes; the last one repeats once exhausted."""

    def __init__(self):
        self._plans = {}

    def act(self, task: Task, episodes: list, rng: np.random.Generator) -> list[Action]:
        out = []
        for ep in episodes:
            plan = self._plans.get(id(ep))
            if plan is None:
                plan = self._plans[id(ep)] = [task.expert_keyposes(ep, rng), 0]
            keyposes, i = plan
            out.append(keyposes[min(i, len(keyposes) - 1)])
            plan[1] += 1
        return out


class RandomPolicy:
    """Uniform keyposes inside the workspace with a random gripper flag."""

    def act(self, task: Task, episodes: list, rng: np.random.Generator) -> list[Action]:
        return [Action(rng.uniform(ep.scene.bounds[0], ep.scene.bounds[1]), DOWN_ROT6D,
                       bool(rng.integers(2))) for ep in episodes]


@dataclass
class EvalResult:
    success_rate: float
    mode_histogram: dict
    mean_final_error: float
    outcomes: list

    def rows(self) -> list[dict]:
        return [{"episode": i, "success": int(o.success), "mode": o.mode, "final_error": o.final_error}
                for i, o in enumerate(self.outcomes)]


def evaluate_policy(policy, task: Task, n_episodes: int, seed: int) -> EvalResult:
    """Roll ``policy`` out keypose by keypose on ``n_episodes`` fresh scenes.

    Episode ``i`` is drawn from its own child seed, and all episodes advance
    in lockstep so a policy can batch its predictions. Mode ``-1`` marks an
    episode that reached no valid goal configuration.
    """
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    seqs = np.random.SeedSequence(seed).spawn(n_episodes + 1)
    episodes = [task.new_episode(np.random.default_rng(s)) for s in seqs[1:]]
    rng = np.random.default_rng(seqs[0])
    for _ in range(task.n_keyposes):
        actions = policy.act(task, episodes, rng)
        if len(actions) != len(episodes):
            raise ContractError(f"policy returned {len(actions)} actions for {len(episodes)} episodes")
        for ep, a in zip(episodes, actions):
            task.apply(ep, a)
    outcomes = [task.outcome(ep) for ep in episodes]
    hist = {}
    for o in outcomes:
        hist[o.mode] = hist.get(o.mode, 0) + 1
    return EvalResult(float(np.mean([o.success for o in outcomes])), dict(sorted(hist.items())),
                      float(np.mean([o.final_error for o in outcomes])), outcomes)
