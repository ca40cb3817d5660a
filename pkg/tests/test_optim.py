import numpy as np
import pytest

from frameprompt.errors import ConfigError
from frameprompt.optim import Adam, Sgd, cosine_warmup_lr, make_optimizer


def test_sgd_momentum_accumulates():
    opt = Sgd(lr=0.1, momentum=0.9)
    p = np.zeros(3)
    g = np.ones(3)
    p = opt.step("p", p, g)
    assert np.allclose(p, -0.1)
    p = opt.step("p", p, g)  # velocity = 0.9*1 + 1 = 1.9
    assert np.allclose(p, -0.1 - 0.19)


def test_adam_matches_reference_formula():
    opt = Adam(lr=0.01)
    p = np.array([1.0, -2.0])
    g = np.array([0.3, -0.7])
    got = opt.step("p", p, g)
    m = 0.1 * g
    v = 0.001 * g * g
    mhat = m / (1 - 0.9)
    vhat = v / (1 - 0.999)
    want = p - 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
    assert np.allclose(got, want, atol=1e-15)


def test_zero_grad_zero_state_is_identity():
    p = np.array([0.5, -1.5])
    for opt in (Sgd(0.3, momentum=0.9), Adam(0.3)):
        out = opt.step("p", p, np.zeros(2))
        assert np.array_equal(out, p)


def test_state_is_per_key():
    opt = Adam(lr=0.1)
    a = opt.step("a", np.zeros(1), np.ones(1))
    b = opt.step("b", np.zeros(1), np.ones(1))
    assert np.array_equal(a, b)  # fresh state for each key


def test_weight_decay_pulls_toward_zero():
    opt = Sgd(lr=0.1, momentum=0.0, weight_decay=1.0)
    p = np.array([2.0])
    out = opt.step("p", p, np.zeros(1))
    assert out[0] < p[0]


def test_make_optimizer():
    assert isinstance(make_optimizer("sgd", 0.1), Sgd)
    assert isinstance(make_optimizer("adam", 0.1), Adam)
    with pytest.raises(ConfigError):
        make_optimizer("lion", 0.1)


def test_schedule_shape():
    base = 0.5
    total, warmup = 20, 10
    lrs = [cosine_warmup_lr(base, e, total, warmup) for e in range(total)]
    # linear ramp reaches base exactly at the end of warmup
    assert lrs[0] == pytest.approx(base / warmup)
    assert lrs[warmup - 1] == pytest.approx(base)
    assert lrs[warmup] == pytest.approx(base)  # cos(0)
    assert all(b <= a + 1e-15 for a, b in zip(lrs[warmup:], lrs[warmup + 1:]))
    assert lrs[-1] > 0.0
    mid = warmup + (total - warmup) // 2
    assert lrs[mid] == pytest.approx(0.5 * base * (1 + np.cos(np.pi * 0.5)), abs=1e-12)


def test_schedule_all_warmup():
    lrs = [cosine_warmup_lr(1.0, e, 5, 10) for e in range(5)]
    assert lrs == pytest.approx([0.2, 0.4, 0.6, 0.8, 1.0])


def test_schedule_bounds_checked():
    with pytest.raises(ConfigError):
        cosine_warmup_lr(0.1, 5, 5, 2)
    with pytest.raises(ConfigError):
        cosine_warmup_lr(0.1, -1, 5, 2)
