"""Training examples from demonstrations and the optimisation loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .denoiser import Denoiser, DenoiserInputs, denoiser_loss
from .diffusion import NoiseSchedule, training_targets
from .envs import Demonstration, lift_frame
from .exceptions import ConfigError, ContractError
from .keypose import interpolate_segment
from .pointcloud import DEFAULT_FPS_FRACTION, fps_count, scene_tokens

DIFFUSION = "diffusion"
REGRESSION = "regression"


def history_window(positions: list, history_len: int) -> np.ndarray:
    h = list(positions[-history_len:])
    return np.array([h[0]] * (history_len - len(h)) + h)


@dataclass
class ExampleSet:
    scene_pos: np.ndarray
    scene_attr: np.ndarray
    task: np.ndarray
    proprio: np.ndarray
    pos: np.ndarray
    rot: np.ndarray
    open: np.ndarray

    def __len__(self) -> int:
        return len(self.task)

    def subset(self, idx) -> "ExampleSet":
        return ExampleSet(*(getattr(self, f)[idx] for f in
                            ("scene_pos", "scene_attr", "task", "proprio", "pos", "rot", "open")))


def build_examples(demos: list[Demonstration], history_len: int = 3, traj_len: int = 1,
                   n_points: int | None = None, fps_fraction: float = DEFAULT_FPS_FRACTION,
                   seed: int = 0) -> ExampleSet:
    """One example per keypose of every demonstration.

    The context of keypose ``k`` is the frame at the previous decision step
    and the positions of up to ``history_len`` previous keyposes (the start
    pose counts as one). With ``traj_len > 1`` the target is the
    interpolated segment from the previous keypose.
    """
    if not demos:
        raise ConfigError("the dataset is empty")
    clouds, rows = [], []
    for d in demos:
        past = [d.raw.pos[0]]
        for prev, k in zip(d.decision_steps, d.keypose_indices):
            clouds.append(lift_frame(d.frame_at(prev), d.scene))
            start, end = d.raw.action(prev), d.raw.action(k)
            seg = [end] if traj_len == 1 else interpolate_segment(start, end, traj_len)
            rows.append((d.task_id, history_window(past, history_len), seg))
            past.append(d.raw.pos[k])
    if n_points is None:
        n_points = fps_count(min(len(c) for c in clouds), fps_fraction)
    ss = np.random.SeedSequence(seed).generate_state(len(clouds))
    toks = [scene_tokens(c, n_points, int(s)) for c, s in zip(clouds, ss)]
    return ExampleSet(
        scene_pos=np.stack([t[0] for t in toks]),
        scene_attr=np.stack([t[1] for t in toks]),
        task=np.array([r[0] for r in rows], dtype=np.int64),
        proprio=np.stack([r[1] for r in rows]),
        pos=np.stack([[a.pos for a in r[2]] for r in rows]),
        rot=np.stack([[a.rot for a in r[2]] for r in rows]),
        open=np.array([[float(a.open) for a in r[2]] for r in rows]),
    )


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 5e-4
    w1: float = 30.0
    w2: float = 10.0
    seed: int = 0
    log_every: int = 10
    objective: str = DIFFUSION

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ConfigError("steps must be >= 0 and batch_size, log_every >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if self.objective not in (DIFFUSION, REGRESSION):
            raise ConfigError(f"objective must be {DIFFUSION!r} or {REGRESSION!r}")


def regression_inputs(batch: ExampleSet, T_max: int) -> DenoiserInputs:
    """Fixed query for the no-diffusion baseline: action tokens at the gripper, step ``T``."""
    B, L = batch.pos.shape[:2]
    anchor = batch.proprio[:, -1:, :]
    return DenoiserInputs(batch.scene_pos, batch.scene_attr, batch.task, batch.proprio,
                          np.repeat(anchor, L, axis=1), np.zeros((B, L, 6)), np.full(B, T_max))


def step_loss(model: Denoiser, batch: ExampleSet, sched_pos: NoiseSchedule, sched_rot: NoiseSchedule,
              rng: np.random.Generator, cfg: TrainConfig) -> T.Tensor:
    scale = model.config.pos_scale
    anchor = batch.proprio[:, -1:, :]
    clean_rel = (batch.pos - anchor) / scale
    if cfg.objective == REGRESSION:
        out = model(regression_inputs(batch, sched_pos.T))
        return denoiser_loss(out, clean_rel, batch.rot, batch.open, cfg.w1, cfg.w2)
    noisy, eps_pos, eps_rot = training_targets(clean_rel, batch.rot, sched_pos, sched_rot, rng)
    inputs = DenoiserInputs(batch.scene_pos, batch.scene_attr, batch.task, batch.proprio,
                            anchor + scale * noisy.pos, noisy.rot, noisy.t)
    return denoiser_loss(model(inputs), eps_pos, eps_rot, batch.open, cfg.w1, cfg.w2)


def train(model: Denoiser, data: ExampleSet, sched_pos: NoiseSchedule, sched_rot: NoiseSchedule,
          cfg: TrainConfig, callback=None) -> list[tuple[int, float]]:
    """Adam on random minibatches; returns ``(step, loss)`` every ``log_every`` steps.

    Deterministic for a fixed ``cfg.seed`` and model initialisation.
    """
    if len(data) == 0:
        raise ConfigError("no training examples")
    rng = np.random.default_rng(cfg.seed)
    opt = T.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    curve = []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(len(data), size=min(cfg.batch_size, len(data)))
        with T.Tape() as tape:
            loss = step_loss(model, data.subset(idx), sched_pos, sched_rot, rng, cfg)
            value = loss.item()
            if not np.isfinite(value):
                raise ContractError(f"loss became non-finite at step {step}")
            opt.zero_grad()
            T.backward(loss, tape)
        opt.step()
        if step % cfg.log_every == 0 or step == 1 or step == cfg.steps:
            curve.append((step, value))
            if callback is not None:
                callback(step, value)
    return curve
