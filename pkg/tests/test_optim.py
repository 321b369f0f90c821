"""Optimizer and gradient clipping contracts."""

import numpy as np

from mambasplat import autodiff as ad
from mambasplat.optim import AdamW, clip_grad_norm


def test_zero_gradient_zero_decay_leaves_params():
    p = ad.tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2, dtype=p.data.dtype)
    opt = AdamW([p], lr=1e-2, weight_decay=0.0)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_defaults_match_training_configuration():
    from mambasplat.config import Config
    cfg = Config()
    assert cfg.lr == 1e-4
    assert cfg.weight_decay == 0.05
    assert cfg.grad_clip == 1.0
    opt = AdamW([ad.tensor(1.0, requires_grad=True)])
    assert (opt.beta1, opt.beta2, opt.eps) == (0.9, 0.999, 1e-8)


def test_single_scalar_step_matches_hand_computation():
    with ad.precision("double"):
        lr, wd, b1, b2, eps = 1e-4, 0.05, 0.9, 0.999, 1e-8
        p0, g = 1.0, 0.5
        p = ad.tensor(p0, requires_grad=True)
        p.grad = np.array(g, dtype=np.float64)
        opt = AdamW([p], lr=lr, weight_decay=wd, beta1=b1, beta2=b2, eps=eps)
        opt.step()
        # decoupled decay first, then bias-corrected moment update
        m_hat = ((1 - b1) * g) / (1 - b1)
        v_hat = ((1 - b2) * g * g) / (1 - b2)
        expected = p0 * (1 - lr * wd) - lr * m_hat / (np.sqrt(v_hat) + eps)
        assert abs(float(p.data) - expected) < 1e-10


def test_step_counter_strictly_increases():
    p = ad.tensor(1.0, requires_grad=True)
    opt = AdamW([p])
    seen = []
    for _ in range(4):
        p.grad = np.array(0.1, dtype=p.data.dtype)
        opt.step()
        seen.append(opt.step_count)
    assert seen == sorted(set(seen))


def test_moment_shapes_match_parameters():
    shapes = [(3, 2), (5,), (1, 1, 4)]
    params = [ad.tensor(np.zeros(s), requires_grad=True) for s in shapes]
    opt = AdamW(params)
    for p, m, v in zip(params, opt.m, opt.v):
        assert m.shape == p.data.shape and v.shape == p.data.shape


def test_clip_scales_down_and_reports_preclip_norm():
    a = ad.tensor(np.zeros(2), requires_grad=True)
    b = ad.tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([1.2, 0.0], dtype=np.float32)
    b.grad = np.array([0.0, 1.6], dtype=np.float32)  # global norm 2.0
    norm = clip_grad_norm([a, b], 1.0)
    assert abs(norm - 2.0) < 1e-6
    np.testing.assert_allclose(a.grad, [0.6, 0.0], rtol=1e-6)
    np.testing.assert_allclose(b.grad, [0.0, 0.8], rtol=1e-6)


def test_clip_leaves_small_gradients():
    a = ad.tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([0.3, 0.4], dtype=np.float32)
    norm = clip_grad_norm([a], 1.0)
    assert abs(norm - 0.5) < 1e-6
    np.testing.assert_array_equal(a.grad, np.array([0.3, 0.4], dtype=np.float32))


def test_postclip_norm_bounded_for_random_gradients():
    rng = np.random.default_rng(7)
    for _ in range(20):
        params = []
        for shape in ((4, 3), (7,), (2, 2)):
            p = ad.tensor(np.zeros(shape), requires_grad=True)
            p.grad = rng.normal(0, 3.0, shape).astype(np.float32)
            params.append(p)
        clip_grad_norm(params, 1.0)
        post = np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
        assert post <= 1.0 + 1e-6
