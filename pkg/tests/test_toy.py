import numpy as np
import pytest
import torch

from dualerase.attack import forward_captures
from dualerase.backend import ModelBackend, NoiseSchedule, expand_batch, slot_indices
from dualerase.errors import DivergedError
from dualerase.masks import AttentionKind
from dualerase.metrics import ssim
from dualerase.toy import build_toy_backend, generate_views, load_weights, make_dataset, save_weights, train_toy
from dualerase.toy.model import ToyConfig, capture_kinds
from dualerase.toy.scenes import ProceduralScene, load_scenes, save_scenes

KINDS = [AttentionKind.SELF, AttentionKind.MULTI_VIEW, AttentionKind.CROSS_DOMAIN]


def one_pass(backend, t=50, seed=0):
    x = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    z = backend.encode(x.to(backend.dtype))
    noise = torch.randn(backend.n_v * backend.n_d, *z.shape[1:], generator=torch.Generator().manual_seed(seed))
    return forward_captures(backend, x.to(backend.dtype), t, noise.to(backend.dtype))


def test_contract_and_metadata(untrained_toy):
    assert isinstance(untrained_toy, ModelBackend)
    assert untrained_toy.flatten_order == "row-major"
    assert (untrained_toy.n_v, untrained_toy.n_d, untrained_toy.latent_side, untrained_toy.t_max) == (4, 2, 8, 100)
    assert untrained_toy.identifier.startswith("toy-mvdm@")


def test_capture_shapes_and_order(untrained_toy):
    _, pred, caps = one_pass(untrained_toy)
    assert pred.shape == (8, 16, 8, 8)
    assert capture_kinds(caps) == KINDS * 2
    widths = {AttentionKind.SELF: 64, AttentionKind.MULTI_VIEW: 256, AttentionKind.CROSS_DOMAIN: 128}
    for c in caps:
        assert c.map.shape == (8, 2, 64, widths[c.kind])
        assert c.resolution_rank == 0 and c.D == 64
    assert len({c.layer_id for c in caps}) == len(caps)


def test_two_views_one_domain_reports_k2():
    backend = build_toy_backend(ToyConfig(n_v=2, n_d=1))
    _, _, caps = one_pass(backend)
    mv = [c for c in caps if c.kind is AttentionKind.MULTI_VIEW]
    assert mv and all(c.k == 2 and c.map.shape[-1] == 128 for c in mv)


def test_expand_batch_layout(untrained_toy):
    z = untrained_toy.encode(torch.rand(3, 32, 32))
    batch = expand_batch(z, untrained_toy)
    assert batch.latents.shape[0] == 8
    assert batch.view_index.tolist() == [0, 1, 2, 3, 0, 1, 2, 3]
    assert batch.domain_index.tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
    single = build_toy_backend(ToyConfig(n_v=1, n_d=1))
    assert expand_batch(single.encode(torch.rand(3, 32, 32)), single).latents.shape[0] == 1


def test_multi_view_keys_pool_views_of_one_domain():
    # a slot's multi-view keys must be exactly the tokens of the n_v views in its own domain
    backend = build_toy_backend(ToyConfig())
    attn = backend.attn[0][1]
    x = torch.arange(8.0)[:, None, None].expand(8, 64, 32)
    pooled = attn._gather(x)
    assert pooled.shape == (8, 256, 32)
    assert pooled[5, ::64, 0].tolist() == [4.0, 5.0, 6.0, 7.0]
    cross = backend.attn[0][2]._gather(x)
    assert cross[5, ::64, 0].tolist() == [1.0, 5.0]


def test_seeded_construction_is_deterministic():
    a, b = build_toy_backend(ToyConfig(seed=3)), build_toy_backend(ToyConfig(seed=3))
    assert a.weights_hash() == b.weights_hash()
    assert build_toy_backend(ToyConfig(seed=4)).weights_hash() != a.weights_hash()


def test_config_validation():
    with pytest.raises(ValueError):
        ToyConfig(channels=0)
    with pytest.raises(ValueError):
        ToyConfig(image_side=30)


def test_noising_matches_closed_form():
    sched = NoiseSchedule()
    z0 = torch.ones(1000, 4, dtype=torch.float64) * 0.7
    noise = torch.randn(1000, 4, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    for t in (1, 50, 100):
        zt = sched.add_noise(z0, noise, t)
        expected = 1 - float(sched.alpha_bar(t))
        assert float(zt.var()) == pytest.approx(expected, rel=0.05)
        assert float(zt.mean()) == pytest.approx(0.7 * float(sched.alpha_bar(t)) ** 0.5, abs=0.05)
    assert float(sched.alpha_bar(0)) == 1.0


def test_gradient_reaches_input(untrained_toy):
    x = torch.rand(1, 3, 32, 32, requires_grad=True)
    z = untrained_toy.encode(x)
    batch = expand_batch(z, untrained_toy)
    noise = torch.randn(batch.latents.shape, generator=torch.Generator().manual_seed(0))
    pred, caps = untrained_toy.denoise_with_capture(untrained_toy.schedule.add_noise(batch.latents, noise, 40), 40, batch.condition)
    loss = pred.square().mean() + sum(c.map[..., :10].sum() for c in caps)
    (grad,) = torch.autograd.grad(loss, x)
    assert torch.isfinite(grad).all() and grad.abs().sum() > 0


def test_zero_epochs_is_a_no_op():
    backend = build_toy_backend(ToyConfig())
    before = backend.weights_hash()
    backend, curve = train_toy(backend, make_dataset(2, seed=0), epochs=0)
    assert curve == [] and backend.weights_hash() == before
    with pytest.raises(ValueError):
        train_toy(backend, [], epochs=1)


def test_training_is_deterministic():
    data = make_dataset(4, seed=1)
    a, ca = train_toy(build_toy_backend(ToyConfig()), data, epochs=2, seed=5, batch_size=2)
    b, cb = train_toy(build_toy_backend(ToyConfig()), data, epochs=2, seed=5, batch_size=2)
    assert ca == cb and a.weights_hash() == b.weights_hash()


def test_training_divergence_is_reported():
    backend = build_toy_backend(ToyConfig())
    with torch.no_grad():
        backend.conv_out.weight.fill_(float("nan"))
    with pytest.raises(DivergedError):
        train_toy(backend, make_dataset(2, seed=0), epochs=1)


def test_weights_roundtrip(tmp_path, untrained_toy):
    path = tmp_path / "w.pt"
    save_weights(untrained_toy, path)
    loaded = load_weights(path)
    assert loaded.weights_hash() == untrained_toy.weights_hash()
    assert loaded.config == untrained_toy.config


def test_generation_contract(untrained_toy):
    x = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(1))
    one = generate_views(untrained_toy, x, n_steps=1)
    assert one.shape == (4, 2, 3, 32, 32)
    assert torch.isfinite(one).all() and one.min() >= 0 and one.max() <= 1
    a = generate_views(untrained_toy, x, n_steps=3, seed=7)
    b = generate_views(untrained_toy, x, n_steps=3, seed=7)
    assert torch.equal(a, b)


def test_scene_rendering_is_deterministic_and_rotates():
    scene = ProceduralScene("triangle", (0.2, 0.4, 0.8), size=0.3, angle=10.0)
    a, b = scene.render_domains(), scene.render_domains()
    np.testing.assert_array_equal(a, b)
    assert a.shape == (4, 2, 3, 32, 32)
    assert not np.array_equal(a[0, 0], a[2, 0])
    # silhouette domain is a binary image
    assert set(np.unique(a[:, 1])) <= {0.0, 1.0}
    disc = ProceduralScene("disc", (0.5, 0.1, 0.1))
    np.testing.assert_allclose(disc.render(0)[0], disc.render(3)[0], atol=1e-12)


def test_scene_files_roundtrip(tmp_path):
    scenes = make_dataset(3, seed=2)
    index = save_scenes(scenes, tmp_path)
    assert len(list(tmp_path.glob("*.png"))) == 3 * 8
    back = load_scenes(index)
    for s, r in zip(scenes, back):
        assert s.shape == r.shape
        np.testing.assert_allclose(s.render_domains(), r.render_domains(), atol=1e-6)


def test_slot_indices():
    v, d = slot_indices(3, 2)
    assert v.tolist() == [0, 1, 2, 0, 1, 2] and d.tolist() == [0, 0, 0, 1, 1, 1]


@pytest.mark.slow
def test_trained_loss_halves(training_curve):
    assert len(training_curve) == 200
    assert training_curve[-1] < 0.5 * training_curve[0]


@pytest.mark.slow
def test_trained_beats_gray_on_held_out_square(trained_toy):
    rng = np.random.default_rng(77)
    from dualerase.toy.scenes import random_scene

    scene = random_scene(rng, shape="square")
    gt = scene.render_domains()
    gen = generate_views(trained_toy, torch.tensor(gt[0, 0], dtype=torch.float32)).numpy()
    model = np.mean([ssim(gen[v, d], gt[v, d]) for v in range(4) for d in range(2)])
    gray = np.mean([ssim(np.full_like(gt[v, d], 0.5), gt[v, d]) for v in range(4) for d in range(2)])
    assert model > gray


@pytest.mark.slow
def test_bundled_weights_are_the_reference_recipe(trained_toy):
    from dualerase.config import bundled_path

    bundled = load_weights(bundled_path("bundled:toy_weights.pt"))
    assert bundled.weights_hash() == trained_toy.weights_hash()
