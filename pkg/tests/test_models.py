import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from steptune import autodiff as ad
from steptune import models as m
from steptune.diffusion import make_schedule
from conftest import tiny_models


def test_time_embedding_shape_and_padding():
    e = m.time_embedding(3, 5, 4)
    assert e.shape == (4, 5)
    assert np.all(e[:, -1] == 0)
    np.testing.assert_array_equal(e[0], e[3])
    assert not np.allclose(m.time_embedding(1, 6, 1), m.time_embedding(2, 6, 1))


def test_denoiser_output_shape_and_input_checks():
    den, _ = tiny_models(0)
    y = den(np.zeros((4, 3)), 2, [0, 1, 1, 0])
    assert y.shape == (4, 3)
    with pytest.raises(ad.ShapeError):
        den(np.zeros((4, 2)), 2, [0, 1, 1, 0])
    with pytest.raises(ValueError):
        den(np.zeros((2, 3)), 2, [0, 5])
    with pytest.raises(ValueError):
        m.Denoiser(0, 2)


def test_reward_is_bounded_by_temperature():
    _, rew = tiny_models(1)
    r = rew(np.random.default_rng(0).standard_normal((8, 3)) * 5, 1, [0, 1] * 4).data
    assert r.shape == (8,)
    assert np.all(np.abs(r) <= rew.tau + 1e-12)


def test_score_matrix_matches_call():
    _, rew = tiny_models(2)
    X = np.random.default_rng(1).standard_normal((3, 3))
    S = rew.score_matrix(X, [0, 1])
    with ad.no_grad():
        np.testing.assert_allclose(S[:, 1], rew(X, 0, [1, 1, 1]).data)


def test_reward_and_denoiser_gradients_match_finite_differences():
    den, rew = tiny_models(3)
    s = make_schedule(4)
    x = np.random.default_rng(2).standard_normal((3, 3))
    c = [0, 1, 0]
    assert ad.finite_diff_check(lambda: ad.sum(rew(x, 2, c)), rew.parameters()) < 1e-4
    assert ad.finite_diff_check(lambda: ad.sum(den(x, 2, c)), den.parameters()) < 1e-4
    f = lambda: ad.sum(m.reward(x, 3, c, rew, "one_step", den, s))
    assert ad.finite_diff_check(f, den.parameters() + rew.parameters()) < 1e-4
    xv = ad.parameter(x)
    assert ad.finite_diff_check(lambda: ad.sum(rew(xv, 2, c)), [xv]) < 1e-4


def test_reward_modes():
    den, rew = tiny_models(4)
    s = make_schedule(4)
    x = np.ones((2, 3))
    with ad.no_grad():
        np.testing.assert_array_equal(m.reward(x, 2, [0, 1], rew).data, rew(x, 2, [0, 1]).data)
        np.testing.assert_array_equal(m.reward(x, 0, [0, 1], rew, "one_step", den, s).data,
                                      rew(x, 0, [0, 1]).data)
        a = m.reward(x, 2, [0, 1], rew, "one_step", den, s).data
    assert not np.allclose(a, rew(x, 2, [0, 1]).data)
    with pytest.raises(ValueError):
        m.reward(x, 2, [0, 1], rew, "one_step")
    with pytest.raises(ValueError):
        m.reward(x, 2, [0, 1], rew, "oracle")


def test_lr_schedules():
    assert m.LRSchedule("constant", 0.1)(7) == 0.1
    assert m.LRSchedule("inverse", 1.0)(3) == 0.25
    with pytest.raises(ValueError):
        m.LRSchedule("cosine", 0.1)
    with pytest.raises(ValueError):
        m.LRSchedule("constant", -1.0)


def test_adam_first_step_moves_by_lr_times_sign():
    p = ad.parameter(np.array([1.0, -1.0, 2.0]))
    opt = m.Adam([p], m.LRSchedule("constant", 0.01))
    p.grad[...] = [3.0, -0.5, 0.0]
    assert opt.step()
    np.testing.assert_allclose(p.data, [0.99, -0.99, 2.0], atol=1e-8)


def test_adam_skips_non_finite_gradients():
    p = ad.parameter(np.array([1.0]))
    opt = m.Adam([p])
    assert not opt.step(grads=[np.array([np.nan])])
    assert p.data[0] == 1.0 and opt.skipped == 1 and opt.step_count == 0


def test_adam_targets_leave_parameters_untouched():
    p = ad.parameter(np.array([1.0]))
    work = p.data.copy()
    m.Adam([p]).step(grads=[np.array([1.0])], targets=[work], lr=0.1)
    assert p.data[0] == 1.0 and work[0] == pytest.approx(0.9)


@settings(max_examples=30, deadline=None)
@given(st.floats(1, 5), st.booleans(), st.floats(1e-4, 0.1))
def test_adam_descends_a_quadratic(mag, neg, lr):
    # Adam moves at most about lr per step; total travel under the inverse
    # schedule is below lr * H_50 < 0.5, so it cannot cross the minimum.
    x0 = -mag if neg else mag
    with ad.use_tape(ad.Tape()):
        p = ad.parameter(np.array([x0]))
        opt = m.Adam([p], m.LRSchedule("inverse", lr))
        prev = abs(x0)
        for k in range(50):
            p.grad[...] = 2 * p.data
            opt.step()
            assert abs(p.data[0]) < prev
            assert prev - abs(p.data[0]) <= lr / (k + 1) * (1 + 1e-9)
            prev = abs(p.data[0])


def test_checkpoint_round_trip(tmp_path):
    den, rew = tiny_models(5)
    for model in (den, rew):
        path = tmp_path / f"{model.kind}.npz"
        m.save_checkpoint(path, model, extra={"note": 1})
        back, meta = m.load_checkpoint(path, expect_kind=model.kind)
        np.testing.assert_array_equal(back.flat(), model.flat())
        assert back.config() == model.config() and meta["extra"] == {"note": 1}


def test_checkpoint_errors(tmp_path):
    den, _ = tiny_models(6)
    path = tmp_path / "d.npz"
    m.save_checkpoint(path, den)
    with pytest.raises(m.CheckpointError):
        m.load_checkpoint(path, expect_kind="reward")
    with pytest.raises(m.CheckpointError):
        m.load_checkpoint(path, expect_config={"hidden": 99})
    junk = tmp_path / "junk.npz"
    junk.write_bytes(b"not a zip")
    with pytest.raises(m.CheckpointError):
        m.load_checkpoint(junk)
    with pytest.raises(m.CheckpointError):
        den.load_state_dict({"W1": np.zeros(1)})


def test_clone_is_independent():
    den, _ = tiny_models(7)
    twin = den.clone()
    np.testing.assert_array_equal(twin.flat(), den.flat())
    twin.set_flat(twin.flat() + 1.0)
    assert not np.allclose(twin.flat(), den.flat())
