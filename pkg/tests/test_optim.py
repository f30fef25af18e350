import numpy as np
import numpy.testing as npt
import pytest

from loopformer.optim import (
    Optimizer,
    ParamGroup,
    default_groups,
    ema_update,
    lr_schedule,
    newton_schulz_orthogonalize,
)
from loopformer.tensor import NumericError, Tensor


def scalar_param(value=1.0):
    p = Tensor(np.array([value], dtype=np.float64), requires_grad=True)
    return {"w": p}


def make_opt(params, lr=0.1, wd=0.0, kind="adam_atan2", **kw):
    groups = [ParamGroup(names=list(params), lr=lr, weight_decay=wd, kind=kind)]
    return Optimizer(params, groups, **kw)


# ---------------------------------------------------------------------------
# adam_atan2


def test_zero_gradient_only_weight_decay():
    params = {"w": Tensor(np.full((3,), 2.0), requires_grad=True)}
    opt = make_opt(params, lr=0.1, wd=0.5)
    params["w"].grad = np.zeros(3, dtype=np.float32)
    opt.step()
    npt.assert_allclose(params["w"].data, 2.0 * (1 - 0.1 * 0.5), rtol=1e-6)


def test_adam_atan2_matches_scalar_reference():
    params = scalar_param(1.0)
    opt = make_opt(params, lr=0.01)
    # scalar reference with plain floats
    w, m, v = 1.0, 0.0, 0.0
    b1, b2, lr = 0.9, 0.95, 0.01
    for t in range(1, 11):
        params["w"].grad = np.array([1.0])
        opt.step()
        m = b1 * m + (1 - b1) * 1.0
        v = b2 * v + (1 - b2) * 1.0
        w -= lr * np.arctan2(m / (1 - b1 ** t), np.sqrt(v / (1 - b2 ** t)))
        assert abs(params["w"].data[0] - w) <= 1e-12, t


def test_adam_atan2_scale_invariance_and_bound():
    lr = 0.05
    for c in [1e-6, 1e-3, 1.0, 1e3, 1e6]:
        params = scalar_param(0.0)
        opt = make_opt(params, lr=lr)
        params["w"].grad = np.array([c])
        opt.step()
        step_size = abs(params["w"].data[0])
        assert step_size <= lr * np.pi / 2 + 1e-12
        # first-step update direction is identical for every positive scale
        npt.assert_allclose(step_size, lr * np.arctan2(1.0, 1.0), rtol=1e-9)


def test_adam_update_bounded_over_random_sweeps():
    rng = np.random.default_rng(40)
    lr = 0.3
    params = {"w": Tensor(rng.normal(size=16), requires_grad=True)}
    opt = make_opt(params, lr=lr)
    for _ in range(25):
        before = params["w"].data.copy()
        params["w"].grad = (rng.normal(size=16) * 10.0 ** rng.integers(-6, 7)).astype(np.float32)
        opt.step()
        assert np.abs(params["w"].data - before).max() <= lr * np.pi / 2 + 1e-6


def test_nan_gradient_aborts_with_diagnostic():
    params = scalar_param()
    opt = make_opt(params)
    params["w"].grad = np.array([np.nan])
    with pytest.raises(NumericError, match="w"):
        opt.step()


# ---------------------------------------------------------------------------
# muon


def test_newton_schulz_orthogonal_input_direction_preserved():
    # the de-facto quintic oscillates around 1 instead of converging, so an
    # orthogonal input comes back as an exact scalar multiple inside the band
    eye = np.eye(4)
    out = newton_schulz_orthogonalize(eye)
    scale = out[0, 0]
    npt.assert_allclose(out, scale * eye, atol=1e-12)
    assert 0.68 <= scale <= 1.15


def test_newton_schulz_singular_values_in_band():
    rng = np.random.default_rng(19)
    g = rng.normal(size=(4, 4))
    sv = np.linalg.svd(newton_schulz_orthogonalize(g), compute_uv=False)
    assert sv.min() >= 0.7 and sv.max() <= 1.3


def test_newton_schulz_rank_deficient():
    rng = np.random.default_rng(42)
    u = rng.normal(size=(4, 2))
    g = u @ u.T  # rank 2
    out = newton_schulz_orthogonalize(g)
    sv = np.linalg.svd(out, compute_uv=False)
    assert 0.65 <= sv[1] and sv[0] <= 1.3  # nonzero directions pushed toward 1
    assert sv[2] < 1e-6 and sv[3] < 1e-6   # null space stays null


def test_newton_schulz_zero_matrix_skipped():
    z = np.zeros((3, 3))
    npt.assert_array_equal(newton_schulz_orthogonalize(z), z)


def test_muon_rectangular_scale_and_transpose():
    rng = np.random.default_rng(43)
    for shape in [(6, 3), (3, 6)]:
        params = {"w": Tensor(np.zeros(shape, dtype=np.float64), requires_grad=True)}
        opt = make_opt(params, lr=1.0, kind="muon", nesterov=False)
        params["w"].grad = rng.normal(size=shape)
        opt.step()
        sv = np.linalg.svd(params["w"].data, compute_uv=False)
        expected_scale = np.sqrt(max(1.0, shape[0] / shape[1]))
        # orthogonalization lands singular values in the quintic's oscillation
        # band, then the rows/cols factor scales the whole update
        assert sv.max() <= expected_scale * 1.35
        assert sv.min() >= expected_scale * 0.65


def test_muon_rejects_non_matrix_params():
    params = {"w": Tensor(np.zeros(4), requires_grad=True)}
    with pytest.raises(ValueError, match="non-matrix"):
        make_opt(params, kind="muon")


def test_muon_zero_grad_only_weight_decay():
    params = {"w": Tensor(np.full((3, 3), 2.0), requires_grad=True)}
    opt = make_opt(params, lr=0.1, wd=0.5, kind="muon")
    params["w"].grad = np.zeros((3, 3), dtype=np.float32)
    opt.step()
    npt.assert_allclose(params["w"].data, 2.0 * (1 - 0.1 * 0.5), rtol=1e-6)


# ---------------------------------------------------------------------------
# partition / groups


def test_partition_must_cover_exactly_once():
    params = {"a": Tensor(np.zeros(2), requires_grad=True),
              "b": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(ValueError, match="missing"):
        Optimizer(params, [ParamGroup(names=["a"], lr=0.1)])
    with pytest.raises(ValueError, match="duplicated"):
        Optimizer(params, [ParamGroup(names=["a", "b"], lr=0.1),
                           ParamGroup(names=["a"], lr=0.1)])


def test_default_groups_partition():
    from loopformer.model import LoopedModel, ModelConfig

    cfg = ModelConfig(depth=2, hidden=16, heads=2, loops=2, forward_only_loops=0,
                      act_max_steps=1, vocab_size=7, max_seq_len=8, ffn_width=16,
                      puzzle_vocab=4)
    model = LoopedModel.init(cfg, seed=0)
    named = model.params.named()
    groups = default_groups(named, lr=1e-3, puzzle_lr=1e-2, weight_decay=0.1, use_muon=True)
    opt = Optimizer(named, groups)  # validates the partition
    kinds = {g.kind for g in groups}
    assert kinds == {"adam_atan2", "muon"}
    muon_names = [n for g in groups if g.kind == "muon" for n in g.names]
    assert all(named[n].ndim == 2 for n in muon_names)
    assert "embed.token_table" not in muon_names
    assert "head.unembed" not in muon_names
    assert not any(n.endswith("w_dwconv") for n in muon_names)
    puzzle_groups = [g for g in groups if "embed.puzzle_table" in g.names]
    assert puzzle_groups and puzzle_groups[0].lr == 1e-2
    assert opt.state.step == 0


# ---------------------------------------------------------------------------
# EMA


def test_ema_limits():
    params = {"w": Tensor(np.full(3, 5.0), requires_grad=True)}
    shadow = {"w": np.zeros(3)}
    ema_update(params, shadow, decay=0.0)
    npt.assert_array_equal(shadow["w"], params["w"].data)
    shadow = {"w": np.zeros(3)}
    ema_update(params, shadow, decay=1.0)
    npt.assert_array_equal(shadow["w"], np.zeros(3))


def test_ema_geometric_convergence():
    params = {"w": Tensor(np.full(1, 1.0), requires_grad=True)}
    shadow = {"w": np.zeros(1)}
    decay = 0.9
    for k in range(1, 21):
        ema_update(params, shadow, decay)
        npt.assert_allclose(shadow["w"][0], 1.0 - decay ** k, rtol=1e-9)


# ---------------------------------------------------------------------------
# schedule


def test_lr_schedule_warmup():
    assert lr_schedule(0, warmup=10, base_lr=1.0) == 0.0
    assert lr_schedule(10, warmup=10, base_lr=1.0) == 1.0
    assert lr_schedule(5, warmup=10, base_lr=1.0) == 0.5
    assert lr_schedule(500, warmup=10, base_lr=1.0) == 1.0


def test_lr_schedule_cosine():
    assert lr_schedule(10, 10, 1.0, total_steps=110, kind="cosine") == 1.0
    npt.assert_allclose(lr_schedule(60, 10, 1.0, total_steps=110, kind="cosine"), 0.5)
    npt.assert_allclose(lr_schedule(110, 10, 1.0, total_steps=110, kind="cosine"), 0.0, atol=1e-12)


# ---------------------------------------------------------------------------
# state round trip


def test_optimizer_state_round_trip_resumes_bitwise(tmp_path):
    from loopformer.serialize import load_checkpoint, save_checkpoint

    rng = np.random.default_rng(44)

    def fresh():
        params = {"w": Tensor(np.ones((4, 4), dtype=np.float32), requires_grad=True),
                  "b": Tensor(np.zeros(4, dtype=np.float32), requires_grad=True)}
        groups = [ParamGroup(names=["w"], lr=0.05, weight_decay=0.1, kind="muon"),
                  ParamGroup(names=["b"], lr=0.05, weight_decay=0.0)]
        return params, Optimizer(params, groups, ema_decay=0.99)

    def grads(step):
        g = np.random.default_rng(100 + step)
        return g.normal(size=(4, 4)).astype(np.float32), g.normal(size=4).astype(np.float32)

    # uninterrupted: 6 steps
    params_a, opt_a = fresh()
    for s in range(6):
        params_a["w"].grad, params_a["b"].grad = grads(s)
        opt_a.step()

    # interrupted: 3 steps, checkpoint, reload, 3 more
    params_b, opt_b = fresh()
    for s in range(3):
        params_b["w"].grad, params_b["b"].grad = grads(s)
        opt_b.step()
    path = str(tmp_path / "opt.ckpt")
    tensors = {f"param.{k}": v.data for k, v in params_b.items()}
    tensors.update(opt_b.state_arrays())
    save_checkpoint(path, tensors, {"note": "mid"})
    arrays, _ = load_checkpoint(path)

    params_c, opt_c = fresh()
    for k in params_c:
        params_c[k].data = arrays[f"param.{k}"].astype(np.float32)
    opt_c.load_state_arrays(arrays)
    assert opt_c.state.step == 3
    for s in range(3, 6):
        params_c["w"].grad, params_c["b"].grad = grads(s)
        opt_c.step()

    for k in params_a:
        assert params_a[k].data.tobytes() == params_c[k].data.tobytes(), k
    for k, v in opt_a.state_arrays().items():
        assert v.tobytes() == opt_c.state_arrays()[k].tobytes(), k
