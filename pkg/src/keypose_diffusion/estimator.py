"""Scikit-learn style estimators wrapping the denoiser.

``DiffusionPolicy`` learns a diffusion policy over keyposes; ``RegressionPolicy``
trains the same trunk to regress the keypose directly with the L1 loss.
Both are fitted on a list of demonstrations and predict from a list of
observations.
"""

from __future__ import annotations

import json

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .denoiser import Denoiser, DenoiserConfig, Trajectory, sample_trajectory
from .diffusion import POSTERIOR, PRINTED, SCALED_LINEAR, SQUARED_COSINE, build_schedule
from .envs import ATTR_DIM, Demonstration, Observation, observation
from .exceptions import ConfigError, FormatError, ValidationError
from .geometry import orthonormalize_six_d
from .keypose import Action
from .pointcloud import scene_tokens
from .training import (DIFFUSION, REGRESSION, ExampleSet, TrainConfig, build_examples, regression_inputs,
                       train)

SAMPLE_CHUNK = 250


def check_demonstrations(X) -> list[Demonstration]:
    X = list(X) if X is not None else []
    if not X:
        raise ConfigError("the dataset is empty")
    for d in X:
        if not isinstance(d, Demonstration):
            raise ValidationError(f"expected Demonstration objects, got {type(d).__name__}")
    return X


def check_observations(X, history_len: int) -> list[Observation]:
    if isinstance(X, Observation):
        X = [X]
    X = list(X)
    if not X:
        raise ValidationError("no observations given")
    for o in X:
        if not isinstance(o, Observation):
            raise ValidationError(f"expected Observation objects, got {type(o).__name__}")
        if np.asarray(o.proprio).shape != (history_len, 3):
            raise ValidationError(f"proprio must be ({history_len}, 3), got {np.asarray(o.proprio).shape}")
        if len(o.cloud) == 0:
            raise ValidationError("observation has an empty scene cloud")
    return X


class DiffusionPolicy(BaseEstimator):
    """Diffusion policy over end-effector keyposes conditioned on a 3D scene.

    Parameters
    ----------
    embed_dim, n_heads, n_blocks : int
        Trunk width, attention heads and number of blocks.
    history_len : int
        Number of past gripper positions fed as proprioception.
    traj_len : int
        Actions predicted per call; 1 predicts the next keypose only.
    attention : {"relative", "absolute"}
        Rotary relative attention or the absolute-position ablation.
    update_scene : bool
        If False, scene tokens serve only as keys and values, which is
        several times cheaper.
    diffusion_steps : int
        Length ``T`` of both noise schedules.
    steps, batch_size, lr, weight_decay, w1, w2 : training settings.
    dtype : {"float32", "float64"}
    random_state : int
        Seeds initialisation, minibatches, noise and sampling.
    """

    _objective = DIFFUSION

    def __init__(self, *, embed_dim=120, n_heads=4, n_blocks=4, history_len=3, traj_len=1,
                 attention="relative", update_scene=True, pos_scale=0.5, diffusion_steps=100,
                 pos_schedule=SCALED_LINEAR, rot_schedule=SQUARED_COSINE, beta_min=1e-4, beta_max=0.02,
                 variance=POSTERIOR, fps_fraction=0.2, steps=2000, batch_size=64, lr=1e-4,
                 weight_decay=5e-4, w1=30.0, w2=10.0, dtype="float32", random_state=0):
        self.embed_dim = embed_dim
        self.n_heads = n_heads
        self.n_blocks = n_blocks
        self.history_len = history_len
        self.traj_len = traj_len
        self.attention = attention
        self.update_scene = update_scene
        self.pos_scale = pos_scale
        self.diffusion_steps = diffusion_steps
        self.pos_schedule = pos_schedule
        self.rot_schedule = rot_schedule
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.variance = variance
        self.fps_fraction = fps_fraction
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.w1 = w1
        self.w2 = w2
        self.dtype = dtype
        self.random_state = random_state

    # -- helpers -----------------------------------------------------------------------
    def _schedules(self):
        return (build_schedule(self.pos_schedule, self.diffusion_steps, self.beta_min, self.beta_max),
                build_schedule(self.rot_schedule, self.diffusion_steps, self.beta_min, self.beta_max))

    def _model_config(self, n_tasks: int) -> DenoiserConfig:
        return DenoiserConfig(embed_dim=self.embed_dim, n_heads=self.n_heads, n_blocks=self.n_blocks,
                              history_len=self.history_len, traj_len=self.traj_len, n_tasks=n_tasks,
                              point_attr_dim=ATTR_DIM, attention=self.attention, pos_scale=self.pos_scale,
                              update_scene=self.update_scene)

    def _validate_params(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be 'float32' or 'float64', got {self.dtype!r}")
        if self.variance not in (POSTERIOR, PRINTED):
            raise ConfigError(f"variance must be {POSTERIOR!r} or {PRINTED!r}")
        if not 0 < self.fps_fraction <= 1:
            raise ConfigError("fps_fraction must lie in (0, 1]")

    def _init_model(self, n_tasks: int, n_points: int):
        self._validate_params()
        self.n_tasks_ = int(n_tasks)
        self.n_points_ = int(n_points)
        self.model_ = Denoiser(self._model_config(self.n_tasks_), seed=self.random_state, dtype=self.dtype)
        self.sched_pos_, self.sched_rot_ = self._schedules()

    # -- estimator API ---------------------------------------------------------------
    def fit(self, X, y=None, callback=None):
        """Train on a list of demonstrations; ``y`` is unused."""
        demos = check_demonstrations(X)
        self._validate_params()
        data = build_examples(demos, self.history_len, self.traj_len, fps_fraction=self.fps_fraction,
                              seed=self.random_state)
        self._init_model(int(data.task.max()) + 1, data.scene_pos.shape[1])
        cfg = TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                          weight_decay=self.weight_decay, w1=self.w1, w2=self.w2, seed=self.random_state,
                          objective=self._objective)
        with T.default_dtype(self.dtype):
            self.loss_curve_ = train(self.model_, data, self.sched_pos_, self.sched_rot_, cfg, callback)
        return self

    def _batch(self, observations):
        toks = [scene_tokens(o.cloud, self.n_points_, int(s)) for o, s in
                zip(observations, np.random.SeedSequence(self.random_state).generate_state(len(observations)))]
        task = np.array([o.task_id for o in observations], dtype=np.int64)
        if np.any(task >= self.n_tasks_) or np.any(task < 0):
            raise ValidationError(f"task ids must lie in [0, {self.n_tasks_})")
        return (np.stack([t[0] for t in toks]), np.stack([t[1] for t in toks]), task,
                np.stack([np.asarray(o.proprio, dtype=np.float64) for o in observations]))

    def sample(self, X, rng=None, deterministic: bool = False) -> Trajectory:
        """Draw one trajectory per observation."""
        check_is_fitted(self, "model_")
        obs = check_observations(X, self.history_len)
        rng = rng if rng is not None else np.random.default_rng(self.random_state)
        parts = []
        for i in range(0, len(obs), SAMPLE_CHUNK):
            scene_pos, scene_attr, task, proprio = self._batch(obs[i:i + SAMPLE_CHUNK])
            parts.append(self._sample_batch(scene_pos, scene_attr, task, proprio, rng, deterministic))
        return Trajectory(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("pos", "rot", "open")))

    def _sample_batch(self, scene_pos, scene_attr, task, proprio, rng, deterministic):
        return sample_trajectory(self.model_, scene_pos, scene_attr, task, proprio, self.traj_len,
                                 self.sched_pos_, self.sched_rot_, rng, deterministic, self.variance)

    def predict(self, X) -> Trajectory:
        """Sample with the estimator's own seed; repeated calls give the same result."""
        return self.sample(X)

    def act(self, task, episodes, rng) -> list[Action]:
        """Policy interface for :func:`keypose_diffusion.envs.evaluate_policy`."""
        obs = [observation(task, ep, self.history_len) for ep in episodes]
        traj = self.sample(obs, rng)
        return [Action(traj.pos[i, -1], traj.rot[i, -1], traj.open[i, -1]) for i in range(len(obs))]

    # -- persistence -------------------------------------------------------------------
    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        meta = {"estimator": type(self).__name__, "params": self.get_params(),
                "n_tasks": self.n_tasks_, "n_points": self.n_points_}
        T.save_checkpoint(path, self.model_.params, json.dumps(meta, sort_keys=True).encode())

    @classmethod
    def load(cls, path) -> "DiffusionPolicy":
        params, raw_meta = T.load_checkpoint(path)
        try:
            meta = json.loads(raw_meta.decode())
            kind, est_params = meta["estimator"], meta["params"]
        except (ValueError, KeyError) as exc:
            raise FormatError(f"checkpoint metadata is not an estimator record: {exc}") from exc
        est_cls = ESTIMATORS.get(kind)
        if est_cls is None:
            raise FormatError(f"unknown estimator {kind!r} in checkpoint")
        est = est_cls(**est_params)
        est._init_model(meta["n_tasks"], meta["n_points"])
        est.model_.load_state_dict(params)
        return est


class RegressionPolicy(DiffusionPolicy):
    """Deterministic baseline: the same trunk regresses the keypose with the L1 loss."""

    _objective = REGRESSION

    def _sample_batch(self, scene_pos, scene_attr, task, proprio, rng, deterministic):
        B, L = len(task), self.traj_len
        batch = ExampleSet(scene_pos, scene_attr, task, proprio, np.zeros((B, L, 3)), np.zeros((B, L, 6)),
                           np.zeros((B, L)))
        pos, rot, logit = self.model_.predict_noise(regression_inputs(batch, self.diffusion_steps))
        anchor = proprio[:, -1:, :]
        return Trajectory(anchor + self.pos_scale * np.asarray(pos, dtype=np.float64),
                          orthonormalize_six_d(np.asarray(rot, dtype=np.float64)),
                          np.asarray(logit, dtype=np.float64)[..., 0] > 0.0)


ESTIMATORS = {DiffusionPolicy.__name__: DiffusionPolicy, RegressionPolicy.__name__: RegressionPolicy}
