"""The trajectory denoiser: token assembly, attention trunk and output heads.

Tokens are laid out as ``[scene | proprioception | task | action]``. Every
token carries a world position (the task token sits at the current gripper
position, the action tokens at their current noisy estimates). Token
*features* only ever see positions relative to the gripper, so with
relative attention the network output is unchanged when the whole input is
translated.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .attention import (PositionedTokens, RotaryFrequencies, absolute_attention, film_modulate,
                        init_attention, init_film, relative_attention)
from .diffusion import (POSTERIOR, NoiseSchedule, reverse_step_pos, reverse_step_rot)
from .exceptions import ConfigError, ContractError, DimensionError
from .geometry import orthonormalize_six_d
from .pointcloud import featurize_points, init_featurizer

RELATIVE = "relative"
ABSOLUTE = "absolute"


@dataclass
class DenoiserConfig:
    embed_dim: int = 120
    n_heads: int = 4
    n_blocks: int = 4
    history_len: int = 3
    traj_len: int = 1
    n_tasks: int = 1
    point_attr_dim: int = 4
    attention: str = RELATIVE
    pos_scale: float = 0.5
    mlp_ratio: int = 2
    max_freq: float = 200.0
    min_freq: float = 1.0
    update_scene: bool = True
    enhanced_language: bool = False

    def __post_init__(self):
        if self.embed_dim % 6:
            raise ConfigError(f"embed_dim must be divisible by 6, got {self.embed_dim}")
        if self.embed_dim % self.n_heads or (self.embed_dim // self.n_heads) % 6:
            raise ConfigError(
                f"head width embed_dim/n_heads = {self.embed_dim}/{self.n_heads} must be divisible by 6")
        if self.attention not in (RELATIVE, ABSOLUTE):
            raise ConfigError(f"attention must be 'relative' or 'absolute', got {self.attention!r}")
        for name in ("n_blocks", "history_len", "traj_len", "n_tasks", "point_attr_dim", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.pos_scale <= 0:
            raise ConfigError("pos_scale must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def cond_dim(self) -> int:
        return 2 * self.embed_dim


@dataclass
class DenoiserInputs:
    """A batch of conditioning context plus noisy action estimates.

    Shapes: scene_pos (B,S,3), scene_attr (B,S,C), task (B,), proprio
    (B,H,3), noisy_pos (B,L,3) in world coordinates, noisy_rot (B,L,6), t (B,).
    """

    scene_pos: np.ndarray
    scene_attr: np.ndarray
    task: np.ndarray
    proprio: np.ndarray
    noisy_pos: np.ndarray
    noisy_rot: np.ndarray
    t: np.ndarray

    def translated(self, delta) -> "DenoiserInputs":
        delta = np.asarray(delta, dtype=np.float64)
        return DenoiserInputs(self.scene_pos + delta, self.scene_attr, self.task, self.proprio + delta,
                              self.noisy_pos + delta, self.noisy_rot, self.t)


@dataclass
class DenoiserOutput:
    eps_pos: T.Tensor
    eps_rot: T.Tensor
    open_logit: T.Tensor


def _sinusoid(values, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(values, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _dense(rng, fan_in, fan_out, scale=1.0):
    return T.Tensor(rng.normal(0, scale / np.sqrt(fan_in), (fan_in, fan_out)), requires_grad=True)


def _zeros(*shape):
    return T.Tensor(np.zeros(shape), requires_grad=True)


class Denoiser:
    """Parameters and forward pass of the noise-prediction network."""

    def __init__(self, config: DenoiserConfig | None = None, seed: int = 0, dtype=None):
        self.config = config or DenoiserConfig()
        cfg = self.config
        self.freqs = RotaryFrequencies.geometric(cfg.head_dim if cfg.attention == RELATIVE else cfg.embed_dim,
                                                 cfg.max_freq, cfg.min_freq)
        dtype = np.dtype(dtype or T.get_default_dtype())
        with T.default_dtype(dtype):
            self.params = self._init_params(np.random.default_rng(seed))

    # -- parameters ---------------------------------------------------------------
    def _init_params(self, rng) -> dict:
        cfg = self.config
        D, C = cfg.embed_dim, cfg.cond_dim
        p = {}
        p.update(init_featurizer(cfg.point_attr_dim + 3, D, rng, prefix="scene"))
        p["task.embed"] = T.Tensor(rng.normal(0, 1.0, (cfg.n_tasks, D)), requires_grad=True)
        p["proprio.slots"] = T.Tensor(rng.normal(0, 1.0, (cfg.history_len, D)), requires_grad=True)
        p["proprio.w"] = _dense(rng, 3, D)
        p["action.w1"], p["action.b1"] = _dense(rng, 9, D), _zeros(D)
        p["action.w2"], p["action.b2"] = _dense(rng, D, D), _zeros(D)
        p["action.slots"] = T.Tensor(rng.normal(0, 0.1, (cfg.traj_len, D)), requires_grad=True)
        p["time.w1"], p["time.b1"] = _dense(rng, D, D), _zeros(D)
        p["time.w2"], p["time.b2"] = _dense(rng, D, D), _zeros(D)
        p["history.w"], p["history.b"] = _dense(rng, 3 * cfg.history_len, D), _zeros(D)
        for b in range(cfg.n_blocks):
            pre = f"block{b}"
            for ln in ("ln1", "ln2"):
                p[f"{pre}.{ln}.ws"], p[f"{pre}.{ln}.bs"] = _zeros(C, D), _zeros(D)
                p[f"{pre}.{ln}.wh"], p[f"{pre}.{ln}.bh"] = _zeros(C, D), _zeros(D)
            p.update(init_attention(D, rng, f"{pre}.attn"))
            p.update(init_film(C, D, f"{pre}.film"))
            if cfg.enhanced_language:
                p.update(init_attention(D, rng, f"{pre}.lang"))
            H = cfg.mlp_ratio * D
            p[f"{pre}.mlp.w1"], p[f"{pre}.mlp.b1"] = _dense(rng, D, H), _zeros(H)
            p[f"{pre}.mlp.w2"], p[f"{pre}.mlp.b2"] = _dense(rng, H, D, 0.5), _zeros(D)
        for head, width in (("pos", 3), ("rot", 6), ("open", 1)):
            p[f"head.{head}.w1"], p[f"head.{head}.b1"] = _dense(rng, D, D), _zeros(D)
            p[f"head.{head}.w2"], p[f"head.{head}.b2"] = _dense(rng, D, width, 0.1), _zeros(width)
        for name, t in p.items():
            t.name = name
        return p

    def parameters(self) -> dict:
        return self.params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise DimensionError(f"{k}: checkpoint shape {v.shape} != model shape {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)

    def astype(self, dtype) -> "Denoiser":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    # -- forward ------------------------------------------------------------------------
    def _check(self, x: DenoiserInputs) -> None:
        cfg = self.config
        B = x.scene_pos.shape[0]
        if x.scene_pos.shape[1] == 0:
            raise ContractError("scene has no points")
        if x.scene_attr.shape[:2] != x.scene_pos.shape[:2] or x.scene_attr.shape[-1] != cfg.point_attr_dim:
            raise DimensionError(f"scene attributes {x.scene_attr.shape} do not match positions "
                              f"{x.scene_pos.shape} and attr width {cfg.point_attr_dim}")
        if x.proprio.shape != (B, cfg.history_len, 3):
            raise DimensionError(f"proprio must be ({B}, {cfg.history_len}, 3), got {x.proprio.shape}")
        L = x.noisy_pos.shape[1]
        if x.noisy_pos.shape != (B, L, 3) or x.noisy_rot.shape != (B, L, 6):
            raise DimensionError(f"noisy action shapes {x.noisy_pos.shape}, {x.noisy_rot.shape} invalid")
        if L > cfg.traj_len:
            raise ConfigError(f"trajectory length {L} exceeds configured {cfg.traj_len}")
        if np.asarray(x.task).shape != (B,) or np.any(np.asarray(x.task) >= cfg.n_tasks) or np.any(np.asarray(x.task) < 0):
            raise ConfigError(f"task ids must be a length-{B} vector in [0, {cfg.n_tasks})")

    def _block_attention(self, q_tokens, kv_tokens, prefix):
        cfg = self.config
        if cfg.attention == RELATIVE:
            return relative_attention(q_tokens, kv_tokens, self.params, prefix, cfg.n_heads, self.freqs,
                                      residual=False)
        return absolute_attention(q_tokens, kv_tokens, self.params, prefix, cfg.n_heads, self.freqs,
                                  residual=False)

    def forward(self, x: DenoiserInputs) -> DenoiserOutput:
        self._check(x)
        cfg, p = self.config, self.params
        dt = self.dtype
        D = cfg.embed_dim
        B, S = x.scene_pos.shape[:2]
        L = x.noisy_pos.shape[1]
        anchor = x.proprio[:, -1:, :]  # (B,1,3)
        scale = cfg.pos_scale

        def rel(pos):
            return ((pos - anchor) / scale).astype(dt)

        scene_raw = np.concatenate([x.scene_attr.astype(dt), rel(x.scene_pos)], axis=-1)
        scene = featurize_points(scene_raw, p, prefix="scene")
        proprio = p["proprio.slots"] + T.matmul(T.Tensor(rel(x.proprio), dtype=dt), p["proprio.w"])
        task = T.embedding(p["task.embed"], np.asarray(x.task)).reshape(B, 1, D)
        act_raw = np.concatenate([rel(x.noisy_pos), x.noisy_rot.astype(dt)], axis=-1)
        h = T.gelu(T.linear(T.Tensor(act_raw, dtype=dt), p["action.w1"], p["action.b1"]))
        action = T.linear(h, p["action.w2"], p["action.b2"]) + p["action.slots"][:L]

        t_feat = T.Tensor(_sinusoid(x.t, D), dtype=dt)
        t_emb = T.linear(T.gelu(T.linear(t_feat, p["time.w1"], p["time.b1"])), p["time.w2"], p["time.b2"])
        hist = T.Tensor(rel(x.proprio).reshape(B, -1), dtype=dt)
        h_emb = T.linear(hist, p["history.w"], p["history.b"])
        cond = T.concat([t_emb, h_emb], axis=-1)  # (B, 2D)

        positions = np.concatenate([x.scene_pos, x.proprio, anchor, x.noisy_pos], axis=1)
        if cfg.update_scene:
            feats = T.concat([scene, proprio, task, action], axis=1)
            q_start = 0
        else:
            feats = T.concat([proprio, task, action], axis=1)
            q_start = S
        cond_b = cond.reshape(B, 1, cond.shape[-1])
        for b in range(cfg.n_blocks):
            pre = f"block{b}"
            hq = T.adaptive_layernorm(feats, T.linear(cond_b, p[f"{pre}.ln1.ws"], p[f"{pre}.ln1.bs"]),
                                      T.linear(cond_b, p[f"{pre}.ln1.wh"], p[f"{pre}.ln1.bh"]))
            if cfg.update_scene:
                hkv = hq
            else:
                hkv = T.concat([T.normalize(scene), hq], axis=1)
            q_tok = PositionedTokens(hq, positions[:, q_start:])
            kv_tok = PositionedTokens(hkv, positions)
            att = self._block_attention(q_tok, kv_tok, f"{pre}.attn")
            feats = feats + film_modulate(att, cond, p, f"{pre}.film")
            if cfg.enhanced_language:
                lang = PositionedTokens(task, anchor)
                queries = PositionedTokens(feats, positions[:, q_start:])
                feats = feats + self._block_attention(queries, lang, f"{pre}.lang")
            h2 = T.adaptive_layernorm(feats, T.linear(cond_b, p[f"{pre}.ln2.ws"], p[f"{pre}.ln2.bs"]),
                                      T.linear(cond_b, p[f"{pre}.ln2.wh"], p[f"{pre}.ln2.bh"]))
            mlp = T.linear(T.gelu(T.linear(h2, p[f"{pre}.mlp.w1"], p[f"{pre}.mlp.b1"])),
                           p[f"{pre}.mlp.w2"], p[f"{pre}.mlp.b2"])
            feats = feats + mlp

        n_act = feats.shape[1]
        act = T.normalize(feats[:, n_act - L:, :])
        outs = {}
        for head in ("pos", "rot", "open"):
            hh = T.gelu(T.linear(act, p[f"head.{head}.w1"], p[f"head.{head}.b1"]))
            outs[head] = T.linear(hh, p[f"head.{head}.w2"], p[f"head.{head}.b2"])
        return DenoiserOutput(outs["pos"], outs["rot"], outs["open"])

    __call__ = forward

    def predict_noise(self, x: DenoiserInputs):
        """Forward pass without taping; returns numpy arrays."""
        with T.no_grad():
            out = self.forward(x)
        return out.eps_pos.data, out.eps_rot.data, out.open_logit.data


def denoiser_loss(out: DenoiserOutput, eps_pos_true, eps_rot_true, open_true, w1: float = 30.0,
                  w2: float = 10.0) -> T.Tensor:
    """BCE(open) + w1 * L1(pos) + w2 * L1(rot).

    L1 terms sum over coordinates and average over batch and trajectory
    steps; BCE averages over batch and steps.
    """
    dt = out.eps_pos.dtype
    eps_pos_true = np.asarray(eps_pos_true, dtype=dt)
    eps_rot_true = np.asarray(eps_rot_true, dtype=dt)
    if eps_pos_true.shape != out.eps_pos.shape or eps_rot_true.shape != out.eps_rot.shape:
        raise DimensionError(f"targets {eps_pos_true.shape}, {eps_rot_true.shape} do not match "
                             f"outputs {out.eps_pos.shape}, {out.eps_rot.shape}")
    open_true = np.asarray(open_true, dtype=dt).reshape(out.open_logit.shape)
    bce = T.bce_loss(T.sigmoid(out.open_logit), open_true)
    pos = T.l1_loss(out.eps_pos, eps_pos_true, reduction="none").sum(axis=-1).mean()
    rot = T.l1_loss(out.eps_rot, eps_rot_true, reduction="none").sum(axis=-1).mean()
    return bce + pos * w1 + rot * w2


@dataclass
class Trajectory:
    """Sampled actions: pos (B,L,3) world, rot (B,L,6) orthonormal, open (B,L) bool."""

    pos: np.ndarray
    rot: np.ndarray
    open: np.ndarray

    def __len__(self) -> int:
        return self.pos.shape[1]


def sample_trajectory(model, scene_pos, scene_attr, task, proprio, L: int, sched_pos: NoiseSchedule,
                      sched_rot: NoiseSchedule, rng: np.random.Generator, deterministic: bool = False,
                      variance: str = POSTERIOR, pos_scale: float | None = None) -> Trajectory:
    """Run the reverse chain from Gaussian noise for a batch of contexts.

    Positions are diffused as displacements from the latest proprioceptive
    position, divided by ``pos_scale``. ``model.predict_noise`` supplies
    the noise estimates; ``deterministic`` drops the fresh-noise term.
    """
    if L < 1:
        raise ContractError("trajectory length must be >= 1")
    if sched_pos.T != sched_rot.T:
        raise ConfigError("position and rotation schedules must have the same length")
    if pos_scale is None:
        pos_scale = model.config.pos_scale
    scene_pos = np.asarray(scene_pos, dtype=np.float64)
    proprio = np.asarray(proprio, dtype=np.float64)
    B = scene_pos.shape[0]
    anchor = proprio[:, -1:, :]
    x_pos = rng.standard_normal((B, L, 3))
    x_rot = rng.standard_normal((B, L, 6))
    task = np.asarray(task)
    logit = np.zeros((B, L, 1))
    for t in range(sched_pos.T, 0, -1):
        inputs = DenoiserInputs(scene_pos, scene_attr, task, proprio, anchor + pos_scale * x_pos,
                                x_rot, np.full(B, t))
        eps_pos, eps_rot, logit = model.predict_noise(inputs)
        z_pos = None if deterministic else rng.standard_normal(x_pos.shape)
        z_rot = None if deterministic else rng.standard_normal(x_rot.shape)
        x_pos = reverse_step_pos(x_pos, eps_pos, t, sched_pos, z_pos, variance)
        x_rot = reverse_step_rot(x_rot, eps_rot, t, sched_rot, z_rot, variance)
    pos = anchor + pos_scale * x_pos
    rot = orthonormalize_six_d(x_rot)
    return Trajectory(pos, rot, np.asarray(logit, dtype=np.float64)[..., 0] > 0.0)


def config_dict(cfg: DenoiserConfig) -> dict:
    return asdict(cfg)


__all__ = ["Denoiser", "DenoiserConfig", "DenoiserInputs", "DenoiserOutput", "Trajectory",
           "denoiser_loss", "sample_trajectory", "RELATIVE", "ABSOLUTE"]
