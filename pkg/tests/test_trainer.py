import numpy as np
import pytest

from nestprune import gradients as G
from nestprune import layers as L
from nestprune import numerics as nx
from nestprune.data import synthetic_blobs
from nestprune.model import build_convnet, build_mlp
from nestprune.trainer import (NumericalError, TrainConfig, TrainState, adaptive_bn_recalibrate,
                               compute_bundle, gradient_magnitude_report, train, train_step)


def snapshot(model):
    return {k: v.copy() for k, v in model.parameters().items()}


def dense_grads(model, x, y):
    fwd = model.forward(x, model.dense_masks())
    _, gl = nx.softmax_cross_entropy(fwd.logits, y)
    return model.backward(fwd, gl)


def test_single_loss_is_plain_sgd(blobs, small_mlp):
    x, y = blobs.images[:16], blobs.labels[:16]
    before = snapshot(small_mlp)
    g = dense_grads(small_mlp, x, y)
    train_step(small_mlp, x, y, TrainConfig(capacities=(), lr=0.1))
    for name, arr in small_mlp.parameters().items():
        expected = before[name] - 0.1 * g.get(name, np.zeros_like(arr))
        assert np.array_equal(arr, expected), name


def test_identical_capacities_scale_gradient(blobs, small_mlp):
    x, y = blobs.images[:16], blobs.labels[:16]
    before = snapshot(small_mlp)
    g = dense_grads(small_mlp, x, y)
    train_step(small_mlp, x, y, TrainConfig(capacities=(1.0,), lr=0.1))
    for name, arr in small_mlp.parameters().items():
        expected = before[name] - 0.1 * 2 * g.get(name, np.zeros_like(arr))
        np.testing.assert_allclose(arr, expected, rtol=1e-13, atol=1e-15, err_msg=name)


def test_step_matches_composed_pipeline(rng):
    """One N=1 step equals forward_masked -> backward_masked -> enumerate_project -> integrate."""
    model = build_mlp(in_dim=5, hidden=(4,), embed_dim=None, classes=3, seed=3, batchnorm=False)
    layer, clf = model.backbone[1], model.classifier
    layer.bias[:] = rng.normal(size=4)
    x, y = rng.normal(size=(6, 5)), rng.integers(0, 3, size=6)
    cfg = TrainConfig(capacities=(0.5,), lr=0.2, seed=9)
    per_loss = []
    for capacity in (1.0, 0.5):
        mask = L.build_mask(layer.param, capacity)
        h, cache = L.forward_masked(layer, mask, x)
        a = np.maximum(h, 0)
        logits = a @ clf.weight.T + clf.bias
        _, dlogits = nx.softmax_cross_entropy(logits, y)
        dh = (dlogits @ clf.weight) * (h > 0)
        gw, gs, _ = L.backward_masked(layer, mask, cache, dh)
        per_loss.append([gw.ravel(), gs.ravel(), dh.sum(0), (dlogits.T @ a).ravel(), dlogits.sum(0)])
    orders = G.shuffle_orders(2, 5, np.random.default_rng([9, 0]))
    icfg = G.IntegrationConfig(alpha=cfg.alpha, shuffle_seed=9)
    combined = []
    for b in range(5):
        grads = [p[b] for p in per_loss]
        combined.append(G.integrate(grads, G.enumerate_project(grads, icfg, orders=orders[b]), icfg))
    expected = [layer.weight.ravel() - 0.2 * combined[0], layer.score.ravel() - 0.2 * combined[1],
                layer.bias - 0.2 * combined[2], clf.weight.ravel() - 0.2 * combined[3],
                clf.bias - 0.2 * combined[4]]
    train_step(model, x, y, cfg)
    got = [layer.weight.ravel(), layer.score.ravel(), layer.bias, clf.weight.ravel(), clf.bias]
    for e, g in zip(expected, got):
        np.testing.assert_allclose(g, e, rtol=1e-12, atol=1e-14)


def test_subnetwork_gradient_locality_conv(small_convnet):
    data = synthetic_blobs(3, 4, 64, seed=1)
    x = data.images.reshape(-1, 1, 8, 8)
    cfg = TrainConfig(capacities=(0.7, 0.3))
    bundle, _, _ = compute_bundle(small_convnet, x, data.labels, cfg)
    for k, c in enumerate(cfg.capacities, start=1):
        grads = small_convnet.unflatten(bundle.matrix[k])
        masks = iter(small_convnet.masks(c))
        for i, layer in enumerate(small_convnet.backbone):
            if layer.prunable:
                off = ~next(masks)
                assert np.all(grads[f"backbone.{i}.weight"][off] == 0)
                assert np.all(grads[f"backbone.{i}.score"][off] == 0)
    # the shared classifier receives a contribution from every loss
    b = [blk.name for blk in bundle.blocks].index("classifier.weight")
    assert np.all(np.abs(bundle.block(b)).sum(axis=1) > 0)


def test_locality_mlp(blobs, small_mlp):
    cfg = TrainConfig(capacities=(0.5, 0.25))
    bundle, _, _ = compute_bundle(small_mlp, blobs.images, blobs.labels, cfg)
    for k, c in enumerate(cfg.capacities, start=1):
        grads = small_mlp.unflatten(bundle.matrix[k])
        masks = iter(small_mlp.masks(c))
        for i, layer in enumerate(small_mlp.backbone):
            if layer.prunable:
                off = ~next(masks)
                assert np.all(grads[f"backbone.{i}.weight"][off] == 0)
                assert np.all(grads[f"backbone.{i}.score"][off] == 0)


@pytest.mark.parametrize("mode,frozen", [("frozen_scores", (".score",)),
                                         ("edge_popup_scores_only", (".weight", ".bias", ".gamma", ".beta"))])
def test_mode_freezes_parameters(blobs, small_mlp, mode, frozen):
    before = snapshot(small_mlp)
    train(small_mlp, blobs, TrainConfig(capacities=(0.5,), mode=mode, epochs=2, batch_size=16, lr=0.1))
    changed = set()
    for name, arr in small_mlp.parameters().items():
        if name.endswith(frozen):
            assert np.array_equal(arr, before[name]), name
        elif not np.array_equal(arr, before[name]):
            changed.add(name)
    assert changed


def test_edge_popup_conv_weights_unchanged(small_convnet):
    data = synthetic_blobs(3, 6, 64, seed=2)
    data.images = data.images.reshape(-1, 1, 8, 8)
    before = snapshot(small_convnet)
    train(small_convnet, data, TrainConfig(capacities=(), base_capacity=0.5,
                                           mode="edge_popup_scores_only", epochs=1, batch_size=6))
    for name, arr in small_convnet.parameters().items():
        if not name.endswith(".score"):
            assert np.array_equal(arr, before[name]), name


def test_determinism(blobs):
    runs = []
    for _ in range(2):
        m = build_mlp(in_dim=12, hidden=(10, 8), embed_dim=6, classes=3, seed=4)
        train(m, blobs, TrainConfig(capacities=(0.6, 0.3), epochs=2, batch_size=7, seed=5, momentum=0.9))
        runs.append(m)
    for name, arr in runs[0].parameters().items():
        assert np.array_equal(arr, runs[1].parameters()[name])
    for a, b in zip(runs[0].bn_stats[1.0], runs[1].bn_stats[1.0]):
        assert np.array_equal(a.mean, b.mean) and np.array_equal(a.var, b.var)


def test_zero_epochs_leaves_model_unchanged(blobs, small_mlp):
    before = snapshot(small_mlp)
    state = train(small_mlp, blobs, TrainConfig(epochs=0))
    assert state.step == 0
    for name, arr in small_mlp.parameters().items():
        assert np.array_equal(arr, before[name])


def test_empty_dataset(small_mlp, blobs):
    with pytest.raises(ValueError):
        train(small_mlp, blobs.subset(np.array([], dtype=int)), TrainConfig(epochs=1))


def test_nonfinite_loss_raises(blobs, small_mlp):
    small_mlp.classifier.weight[0, 0] = np.inf
    with pytest.raises(NumericalError):
        train_step(small_mlp, blobs.images[:8], blobs.labels[:8], TrainConfig())


@pytest.mark.parametrize("kwargs", [dict(capacities=(0.4, 0.6)), dict(capacities=(0.5, 0.5)),
                                    dict(capacities=(1.2,)), dict(mode="bogus"), dict(lr=0.0),
                                    dict(alpha=-1.0), dict(calibration_fraction=0.0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_all_losses_halve_on_separable_data():
    data = synthetic_blobs(4, 25, 16, seed=0)
    model = build_mlp(in_dim=16, hidden=(32, 16), embed_dim=8, classes=4, seed=0)
    state = TrainState()
    first = None
    for step in range(200):
        report = train_step(model, data.images, data.labels, TrainConfig(lr=0.05), state)
        first = first or report.losses
        if all(l <= 0.5 * f for l, f in zip(report.losses, first)):
            break
    assert all(l <= 0.5 * f for l, f in zip(report.losses, first)), (first, report.losses)


def test_reports_have_conflicts_and_norms(blobs, small_mlp):
    state = train(small_mlp, blobs, TrainConfig(capacities=(0.5,), epochs=1, batch_size=20))
    r = state.reports[-1]
    assert len(r.losses) == 2 and np.all(np.isfinite(r.losses))
    assert r.conflicts.shape == (len(small_mlp.blocks()),)
    assert r.grad_norms.shape == (2, len(small_mlp.blocks()))


def test_gradient_magnitude_report(rng):
    zero = G.GradientBundle.from_blocks([[np.zeros(3), np.zeros(2)]] * 3)
    assert np.all(gradient_magnitude_report(zero) == 0)
    g = [rng.normal(size=3), rng.normal(size=5)]
    same = gradient_magnitude_report(G.GradientBundle.from_blocks([g, g]))
    assert np.array_equal(same[0], same[1])
    per_loss = [[rng.normal(size=k) for k in (4, 1, 6)] for _ in range(3)]
    rep = gradient_magnitude_report(G.GradientBundle.from_blocks(per_loss))
    oracle = [[np.linalg.norm(v) for v in row] for row in per_loss]
    np.testing.assert_allclose(rep, oracle, rtol=1e-14)


def masked_activation_oracle(model, x, masks):
    """Inputs to every BN layer, collected with a hand-rolled forward in batch-stat mode."""
    feats = []
    h = x
    p = 0
    for layer in model.backbone:
        if layer.prunable:
            h, _ = layer.forward(h, masks[p])
            p += 1
        elif isinstance(layer, L.BatchNorm):
            feats.append(h.copy())
            h, _ = layer.forward(h, None)
        else:
            h, _ = layer.forward(h)
    return feats


@pytest.mark.parametrize("kind", ["mlp", "conv"])
def test_recalibration_matches_two_pass_moments(blobs, kind):
    if kind == "mlp":
        model = build_mlp(in_dim=12, hidden=(10, 8), embed_dim=6, classes=3, seed=0)
        data = blobs
    else:
        model = build_convnet(1, 8, channels=(4, 6), fc=10, classes=3, seed=0)
        data = synthetic_blobs(3, 20, 64, seed=0)
        data.images = data.images.reshape(-1, 1, 8, 8)
    train(model, data, TrainConfig(capacities=(0.6, 0.2), epochs=1, batch_size=16))
    before = snapshot(model)
    stats = adaptive_bn_recalibrate(model, 0.2, data.images, batch_size=7)
    for name, arr in model.parameters().items():
        assert np.array_equal(arr, before[name])
    assert model.bn_stats[0.2] is stats
    # oracle: the same calibration batches through a hand-rolled forward, pooled by concatenation
    feats = None
    for lo in range(0, len(data.images), 7):
        f = masked_activation_oracle(model, data.images[lo:lo + 7], model.masks(0.2))
        feats = f if feats is None else [np.concatenate([a, b]) for a, b in zip(feats, f)]
    for st, a in zip(stats, feats):
        axes = (0,) if a.ndim == 2 else (0, 2, 3)
        mean = a.mean(axis=axes)
        var = ((a - mean.reshape((1, -1) + (1,) * (a.ndim - 2))) ** 2).mean(axis=axes)
        assert np.abs(st.mean - mean).max() <= 1e-6
        assert np.abs(st.var - var).max() <= 1e-6


def test_recalibration_constant_input_gives_zero_variance(small_mlp):
    stats = adaptive_bn_recalibrate(small_mlp, 0.5, np.full((9, 12), 0.3))
    for st in stats:
        assert np.abs(st.var).max() <= 1e-20


def test_recalibration_dense_matches_training_stats():
    data = synthetic_blobs(4, 100, 16, seed=3)
    model = build_mlp(in_dim=16, hidden=(12,), embed_dim=None, classes=4, seed=0)
    # a vanishing learning rate keeps the network fixed while the running averages settle
    train(model, data, TrainConfig(capacities=(), lr=1e-9, batch_size=50, epochs=20))
    running = [s.copy() for s in model.bn_stats[1.0]]
    recal = adaptive_bn_recalibrate(model, 1.0, data.images)
    for r, s in zip(running, recal):
        scale = np.sqrt(s.var)
        assert np.abs(r.mean - s.mean).max() <= 0.1 * scale.max()
        np.testing.assert_allclose(r.var, s.var, rtol=0.15)


def test_recalibration_empty(small_mlp):
    with pytest.raises(ValueError):
        adaptive_bn_recalibrate(small_mlp, 0.5, np.zeros((0, 12)))


def test_missing_stats_warn_and_fall_back(small_mlp):
    with pytest.warns(UserWarning):
        stats = small_mlp.stats_for(0.3)
    assert stats is small_mlp.bn_stats[1.0]
