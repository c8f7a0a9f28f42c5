import numpy as np
import pytest

from keypose_diffusion import tensor as T
from keypose_diffusion.denoiser import (Denoiser, DenoiserConfig, DenoiserInputs, DenoiserOutput, denoiser_loss,
                                     sample_trajectory)
from keypose_diffusion.diffusion import build_schedule
from keypose_diffusion.exceptions import ConfigError, DimensionError

SMALL = dict(embed_dim=24, n_heads=2, n_blocks=2, history_len=3, n_tasks=2)


def make_inputs(rng, B=2, S=7, L=4, H=3, C=4, T_max=100):
    return DenoiserInputs(
        scene_pos=rng.uniform(-0.3, 0.3, size=(B, S, 3)),
        scene_attr=rng.integers(0, 2, size=(B, S, C)).astype(float),
        task=rng.integers(0, 2, size=B),
        proprio=rng.uniform(-0.3, 0.3, size=(B, H, 3)),
        noisy_pos=rng.normal(size=(B, L, 3)),
        noisy_rot=rng.normal(size=(B, L, 6)),
        t=rng.integers(1, T_max + 1, size=B))


def perturb(model, rng, scale=0.1):
    for p in model.parameters().values():
        p.data += scale * rng.normal(size=p.data.shape)
    return model


@pytest.mark.parametrize("L", [1, 4, 8])
@pytest.mark.parametrize("update_scene", [True, False])
def test_output_shapes(rng, L, update_scene):
    model = Denoiser(DenoiserConfig(traj_len=8, update_scene=update_scene, **SMALL))
    out = model(make_inputs(rng, B=3, L=L))
    assert out.eps_pos.shape == (3, L, 3)
    assert out.eps_rot.shape == (3, L, 6)
    assert out.open_logit.shape == (3, L, 1)


def test_config_validation():
    with pytest.raises(ConfigError):
        DenoiserConfig(embed_dim=20)
    with pytest.raises(ConfigError):
        DenoiserConfig(embed_dim=24, n_heads=3)
    with pytest.raises(ConfigError):
        DenoiserConfig(attention="learned")


def test_input_checks(rng):
    model = Denoiser(DenoiserConfig(traj_len=2, **SMALL))
    x = make_inputs(rng, L=3)
    with pytest.raises(ConfigError):
        model(x)
    x = make_inputs(rng, L=2)
    x.proprio = x.proprio[:, :2]
    with pytest.raises(DimensionError):
        model(x)
    x = make_inputs(rng, L=2)
    x.task = np.array([0, 5])
    with pytest.raises(ConfigError):
        model(x)


def test_forward_is_deterministic(rng):
    model = perturb(Denoiser(DenoiserConfig(traj_len=4, **SMALL), seed=3), rng)
    x = make_inputs(rng)
    a, b = model.predict_noise(x), model.predict_noise(x)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
    twin = Denoiser(DenoiserConfig(traj_len=4, **SMALL), seed=3)
    twin.load_state_dict(model.state_dict())
    np.testing.assert_array_equal(twin.predict_noise(x)[0], a[0])


@pytest.mark.parametrize("update_scene", [True, False])
@pytest.mark.parametrize("delta", [(1.0, 0.0, 0.0), (0.3, -2.0, 5.0)])
def test_translation_equivariance(rng, update_scene, delta):
    model = perturb(Denoiser(DenoiserConfig(traj_len=4, update_scene=update_scene, **SMALL)), rng)
    x = make_inputs(rng)
    for u, v in zip(model.predict_noise(x), model.predict_noise(x.translated(delta))):
        np.testing.assert_allclose(u, v, atol=1e-8, rtol=0)


def test_absolute_variant_breaks_equivariance(rng):
    model = perturb(Denoiser(DenoiserConfig(traj_len=4, attention="absolute", **SMALL)), rng)
    x = make_inputs(rng)
    diff = model.predict_noise(x)[0] - model.predict_noise(x.translated((0.3, -2.0, 5.0)))[0]
    assert np.linalg.norm(diff) > 1e-3


@pytest.mark.parametrize("cfg", [dict(), dict(update_scene=False), dict(enhanced_language=True)])
def test_gradients_of_every_parameter(rng, cfg):
    model = perturb(Denoiser(DenoiserConfig(embed_dim=12, n_heads=2, n_blocks=2, traj_len=2, n_tasks=2, **cfg)),
                    rng, 0.3)
    x = make_inputs(rng, B=1, S=3, L=2)
    eps_pos, eps_rot = rng.normal(size=(1, 2, 3)), rng.normal(size=(1, 2, 6))
    opn = np.array([[1.0, 0.0]])

    def loss():
        return denoiser_loss(model(x), eps_pos, eps_rot, opn)

    errs = T.check_gradients(loss, model.parameters())
    worst = max(errs, key=errs.get)
    assert errs[worst] < 1e-4, worst


def _output(pos, rot, logit):
    return DenoiserOutput(T.Tensor(pos), T.Tensor(rot), T.Tensor(logit))


def test_loss_worked_example():
    # a 0.1 error on each position coordinate costs 30 * 3 * 0.1 = 9 per step
    B, L = 4, 3
    out = _output(np.full((B, L, 3), 0.1), np.zeros((B, L, 6)), np.full((B, L, 1), 50.0))
    loss = denoiser_loss(out, np.zeros((B, L, 3)), np.zeros((B, L, 6)), np.ones((B, L)))
    assert float(loss.data) == pytest.approx(9.0, abs=1e-6)


def test_loss_perfect_prediction_is_near_zero(rng):
    pos, rot = rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 5, 6))
    opn = rng.integers(0, 2, size=(2, 5)).astype(float)
    out = _output(pos, rot, (2 * opn - 1)[..., None] * 40.0)
    assert float(denoiser_loss(out, pos, rot, opn).data) < 1e-6


def test_loss_rejects_mismatched_targets():
    out = _output(np.zeros((1, 2, 3)), np.zeros((1, 2, 6)), np.zeros((1, 2, 1)))
    with pytest.raises(DimensionError):
        denoiser_loss(out, np.zeros((1, 3, 3)), np.zeros((1, 2, 6)), np.zeros((1, 2)))


def test_gradient_descent_decreases_loss(rng):
    model = Denoiser(DenoiserConfig(traj_len=2, **SMALL))
    x = make_inputs(rng, L=2)
    eps_pos, eps_rot = rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 2, 6))
    opn = np.ones((2, 2))
    params = model.parameters()
    losses = []
    for _ in range(5):
        for p in params.values():
            p.grad = None
        with T.Tape() as tape:
            loss = denoiser_loss(model(x), eps_pos, eps_rot, opn)
            T.backward(loss, tape)
        losses.append(float(loss.data))
        for p in params.values():
            p.data -= 1e-4 * p.grad
    assert all(b < a for a, b in zip(losses, losses[1:]))


class ZeroNoise:
    """Stub that predicts zero noise everywhere."""

    class config:
        pos_scale = 1.0

    def predict_noise(self, x):
        B, L = x.noisy_pos.shape[:2]
        return np.zeros((B, L, 3)), np.zeros((B, L, 6)), np.ones((B, L, 1))


def test_zero_noise_stub_sampling_closed_form():
    sp = build_schedule("scaled_linear", 50)
    sr = build_schedule("squared_cosine", 50)
    B, L = 2, 3
    traj = sample_trajectory(ZeroNoise(), np.zeros((B, 4, 3)), np.zeros((B, 4, 4)), np.zeros(B, int),
                             np.zeros((B, 2, 3)), L, sp, sr, np.random.default_rng(7), deterministic=True)
    x_T = np.random.default_rng(7).standard_normal((B, L, 3))
    gain = np.prod([1.0 / np.sqrt(sp.alpha_at(t)) for t in range(1, 51)])
    np.testing.assert_allclose(traj.pos, x_T * gain, rtol=1e-12)
    assert traj.open.all()
    np.testing.assert_allclose(np.linalg.norm(traj.rot[..., :3], axis=-1), 1.0)


@pytest.mark.parametrize("attention,equivariant", [("relative", True), ("absolute", False)])
def test_sampling_translation(rng, attention, equivariant):
    model = perturb(Denoiser(DenoiserConfig(traj_len=2, attention=attention, **SMALL)), rng)
    x = make_inputs(rng, L=2)
    sp, sr = build_schedule("scaled_linear", 10), build_schedule("squared_cosine", 10)
    delta = np.array([0.3, -2.0, 5.0])

    def run(shift):
        return sample_trajectory(model, x.scene_pos + shift, x.scene_attr, x.task, x.proprio + shift, 2, sp, sr,
                                 np.random.default_rng(11))

    a, b = run(0.0), run(delta)
    if equivariant:
        np.testing.assert_allclose(b.pos, a.pos + delta, atol=1e-7)
        np.testing.assert_allclose(b.rot, a.rot, atol=1e-7)
    else:
        assert np.abs(b.pos - a.pos - delta).max() > 1e-3
