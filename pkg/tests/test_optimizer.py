import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clothrecon import optimizer as opt
from clothrecon.errors import NonFiniteEnergy, ShapeMismatch, SolverDiverged
from clothrecon.geometry import Camera, grid_template
from clothrecon.io import generate_synthetic, procedural_texture
from clothrecon.optimizer import (ABLATIONS, AdamMoments, AdaptiveState, OptimConfig, ablation_run, adam_update,
                                  reconstruct, static_states)
from clothrecon.physics import SimConfig, default_params


@pytest.fixture(scope="module")
def small_scene():
    t = grid_template(4, 4, 0.3)
    p = default_params(6, t.n_vertices)
    p.wind = np.array([0.3, 0.0, 0.0])
    cfg = SimConfig(pinned=(0, 3), gravity=(0, 0, -0.1))
    cam = Camera.look_at((0.15, -0.6, 0.4), (0.15, 0.15, -0.05), (0, 0, 1), 80, 80, 40, 40)
    bundle = generate_synthetic(t, p, cfg, cam, 6, texture=procedural_texture(32))
    return t, p, cfg, cam, bundle


def test_adam_first_step_moves_by_lr():
    cfg = OptimConfig(learning_rate=0.01)
    new, m = adam_update(np.array([1.0, -2.0, 0.5]), np.array([3.0, -0.2, 0.0]), None, cfg)
    # bias correction makes the first step +-lr for any non-zero gradient
    np.testing.assert_allclose(new, [0.99, -1.99, 0.5], atol=1e-8)
    assert m.t == 1


def test_adam_matches_reference_sequence():
    cfg = OptimConfig(learning_rate=0.05)
    rng = np.random.default_rng(0)
    p = rng.standard_normal(4)
    m = v = np.zeros(4)
    mom = None
    q = p.copy()
    for t in range(1, 6):
        g = rng.standard_normal(4)
        q, mom = adam_update(q, g, mom, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p = p - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(q, p, rtol=1e-14)


def test_adam_zero_gradient_and_clamp():
    cfg = OptimConfig(learning_rate=0.1)
    p = np.array([0.05, 1.0])
    new, _ = adam_update(p, np.zeros(2), None, cfg)
    np.testing.assert_array_equal(new, p)
    new, _ = adam_update(p, np.array([1.0, 1.0]), None, cfg, lower=0.0)
    np.testing.assert_allclose(new, [0.0, 0.9])
    with pytest.raises(ShapeMismatch):
        adam_update(p, np.zeros(3), None, cfg)


def test_config_validation_and_ablations():
    with pytest.raises(ValueError):
        OptimConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        OptimConfig(initial_window=0)
    with pytest.raises(ValueError):
        OptimConfig.for_ablation("nothing")
    assert OptimConfig.for_ablation("no_F").trainable() == ("density", "stretch", "bend", "wind")
    assert OptimConfig.for_ablation("only_F").trainable() == ("correctives",)
    assert OptimConfig.for_ablation("no_Es").effective_lam == 0.0
    assert OptimConfig.for_ablation("no_adaptive").no_adaptive
    assert OptimConfig.for_ablation("full", lam=0.3).effective_lam == 0.3
    assert set(ABLATIONS) == {"full", "no_F", "no_adaptive", "no_Es", "only_F"}


@given(energies=st.lists(st.floats(0.0, 10.0), min_size=1, max_size=200),
       n_frames=st.integers(5, 12), cap=st.integers(1, 20))
def test_adaptive_schedule_properties(energies, n_frames, cap):
    ad = AdaptiveState(5, n_frames, cap)
    windows = []
    for it, e in enumerate(energies):
        windows.append(ad.t_a)
        action = ad.observe(it, e)
        if action == "done":
            break
    # the window never shrinks, grows one frame at a time and stays inside 1..T
    assert all(b - a in (0, 1) for a, b in zip(windows, windows[1:]))
    assert all(5 <= w <= n_frames for w in windows)
    # no frame is worked on longer than the cap
    counts = np.unique(windows, return_counts=True)[1]
    assert counts.max() <= cap
    adds = [e for e in ad.events if e[1] > 5 and e[2] in ("threshold", "cap")]
    if adds:
        assert ad.b == adds[0][3]
        for it, _, reason, e in ad.events[1:]:
            if reason == "threshold":
                assert e < ad.b


def test_adaptive_threshold_and_cap_examples():
    ad = AdaptiveState(5, 7, cap=3)
    assert [ad.observe(i, 1.0) for i in range(3)] == [None, None, "add"]
    assert ad.t_a == 6 and ad.b == 1.0 and ad.events[0][2] == "cap"
    assert ad.observe(3, 0.5) == "add"
    assert ad.events[-1][2] == "threshold" and ad.t_a == 7
    assert ad.observe(4, 2.0) is None
    assert ad.observe(5, 0.9) == "done"
    tol = AdaptiveState(5, 6, cap=50, tol=1e-7)
    assert tol.observe(0, 1e-9) == "add" and tol.observe(1, 1e-9) == "done"


def test_fixed_point_converges_immediately(small_scene):
    t, p, cfg, cam, bundle = small_scene
    res = reconstruct(t, bundle.observation_dict(), cam, cfg, texture=bundle.texture, init=p)
    assert res.status == "converged"
    assert len(res.history) < 10
    assert res.history[0].energy < 1e-6
    for a, b in zip(res.states, bundle.ground_truth):
        np.testing.assert_allclose(a.positions, b, atol=1e-6)


def test_reconstruct_improves_energy_and_logs(small_scene, tmp_path):
    t, p, cfg, cam, bundle = small_scene
    log = tmp_path / "energy.jsonl"
    seen = []
    res = reconstruct(t, bundle.observation_dict(), cam, cfg,
                      OptimConfig(global_max_iters=12, max_iters_per_frame=4),
                      texture=bundle.texture, log_path=log, callback=lambda it, *a: seen.append(it))
    assert seen == list(range(len(res.history)))
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["iteration"] for r in rows] == seen
    assert rows[0]["energy"] == res.history[0].energy
    assert set(rows[0]) == {"iteration", "t_a", "energy", "photometric", "silhouette", "seconds"}
    assert len(res.states) == 6
    assert res.params.correctives.shape == (5, t.n_vertices, 3)
    same = [h.energy for h in res.history if h.t_a == res.history[0].t_a]
    assert min(same) < same[0]


def test_reconstruct_is_deterministic(small_scene):
    t, p, cfg, cam, bundle = small_scene
    kw = dict(texture=bundle.texture)
    oc = OptimConfig(learning_rate=0.02, global_max_iters=4)
    a = reconstruct(t, bundle.observation_dict(), cam, cfg, oc, **kw)
    b = reconstruct(t, bundle.observation_dict(), cam, cfg, oc, **kw)
    assert [h.energy for h in a.history] == [h.energy for h in b.history]
    np.testing.assert_array_equal(a.params.wind, b.params.wind)
    np.testing.assert_array_equal(a.params.correctives, b.params.correctives)


def test_ablation_flags_freeze_blocks(small_scene):
    t, p, cfg, cam, bundle = small_scene
    oc = OptimConfig(learning_rate=0.02, global_max_iters=3)
    no_f = ablation_run(t, bundle.observation_dict(), cam, cfg, "no_F", oc, texture=bundle.texture)
    assert not np.any(no_f.params.correctives)
    assert np.any(no_f.params.wind)
    only_f = ablation_run(t, bundle.observation_dict(), cam, cfg, "only_F", oc, texture=bundle.texture)
    assert not np.any(only_f.params.wind)
    np.testing.assert_array_equal(only_f.params.stretch, default_params().stretch)
    no_es = ablation_run(t, bundle.observation_dict(), cam, cfg, "no_Es", oc, texture=bundle.texture)
    assert all(h.energy == pytest.approx(sum(h.photometric.values())) for h in no_es.history)
    no_ad = ablation_run(t, bundle.observation_dict(), cam, cfg, "no_adaptive", oc, texture=bundle.texture)
    assert all(h.t_a == 6 for h in no_ad.history)


def test_stretch_clamp_keeps_blocks_semidefinite():
    p = default_params()
    pm = opt._Parametrization(p, OptimConfig())
    z = pm.get(p, "stretch").copy().reshape(4, 6)
    z[1] += 1e3
    z[0, 0] = -5.0
    pm.set(p, "stretch", z.reshape(-1))
    s = p.stretch.reshape(4, 6)
    assert np.all(s[[0, 2, 3]] >= 0)
    assert np.all(np.abs(s[1]) <= np.sqrt(s[0] * s[2]) + 1e-12)
    pm.set(p, "density", np.array([-1.0]))
    assert p.density > 0


def test_non_finite_energy_raises(small_scene, monkeypatch):
    t, p, cfg, cam, bundle = small_scene
    real = opt.total_energy

    def broken(*a, **k):
        rep, g = real(*a, **k)
        rep.photometric[min(rep.photometric)] = float("nan")
        return rep, g

    monkeypatch.setattr(opt, "total_energy", broken)
    with pytest.raises(NonFiniteEnergy):
        reconstruct(t, bundle.observation_dict(), cam, cfg, texture=bundle.texture)


def test_solver_divergence_reports_iteration(small_scene, monkeypatch):
    t, p, cfg, cam, bundle = small_scene
    calls = {"n": 0}
    real = opt.simulate

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 3:
            raise SolverDiverged("forced")
        return real(*a, **k)

    monkeypatch.setattr(opt, "simulate", flaky)
    with pytest.raises(SolverDiverged) as info:
        reconstruct(t, bundle.observation_dict(), cam, cfg, OptimConfig(global_max_iters=5), texture=bundle.texture)
    assert info.value.iteration == 2


def test_needs_two_frames(small_scene):
    t, p, cfg, cam, bundle = small_scene
    with pytest.raises(ValueError):
        reconstruct(t, {1: bundle.observations[0]}, cam, cfg, texture=bundle.texture)


def test_static_states(grid4):
    s = static_states(grid4, 3)
    assert [x.time_index for x in s] == [1, 2, 3]
    assert all(np.array_equal(x.positions, grid4.vertices) for x in s)


def test_adam_moments_dataclass():
    m = AdamMoments(np.zeros(2), np.zeros(2))
    assert m.t == 0
