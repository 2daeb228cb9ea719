import numpy as np
import pytest

from mirrordepth import tensor as T
from mirrordepth.gradcheck import grad_check, model_loss_check, run_primitive_suite
from mirrordepth.model import DepthModel, toy_config
from mirrordepth.synth import training_frames
from mirrordepth.tensor import ContractError, Tensor
from mirrordepth.training import LossConfig, silog_loss


def test_matmul_sum_passes_tight(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    assert grad_check(lambda: T.tsum(T.matmul(a, b)), [a, b], tolerance=1e-4).passed


def test_silog_on_random_maps_passes(rng):
    pred = Tensor(rng.uniform(0.5, 5, (6, 7)), requires_grad=True)
    gt = rng.uniform(0.5, 5, (6, 7)).astype(np.float32)
    assert grad_check(lambda: silog_loss(pred, gt, LossConfig()), {"pred": pred}).passed


def test_corrupted_rule_fails(rng):
    x = Tensor(rng.standard_normal(5), requires_grad=True)

    def bad_square(a):
        return T.custom_op(a.data * a.data, (a,), lambda g: (g * a.data,), "bad_square")  # should be 2*a

    rep = grad_check(lambda: T.tsum(bad_square(x)), {"x": x})
    assert not rep.passed
    assert "FAIL" in str(rep)


def test_nondeterministic_function_detected():
    x = Tensor(np.ones(3), requires_grad=True)
    counter = iter(range(100))
    with pytest.raises(ContractError):
        grad_check(lambda: T.tsum(x * float(next(counter))), {"x": x})


def test_leaves_restored_to_float32(rng):
    x = Tensor(rng.standard_normal(4).astype(np.float32), requires_grad=True)
    before = x.data.copy()
    grad_check(lambda: T.tsum(T.exp(x)), {"x": x})
    assert x.data.dtype == np.float32 and np.array_equal(x.data, before)


def test_primitive_suite_passes():
    reports = run_primitive_suite()
    assert len(reports) >= 20
    failing = {k: r.max_rel_error for k, r in reports.items() if not r.passed}
    assert not failing


def test_toy_model_mirror_gradient():
    model = DepthModel(toy_config())
    rep = model_loss_check(model, training_frames(1), max_entries=6)
    mirror = [leaf for leaf in rep.leaves if leaf.name == "mirror"][0]
    assert mirror.passed, str(rep)


def test_probe_near_kink_goes_one_sided():
    a = T.tensor(np.array([1e-9, -1e-9, 0.5]), requires_grad=True)
    f = lambda: T.tsum(T.relu(a) * T.Tensor(np.array([2.0, 3.0, 4.0])))
    rep = grad_check(f, {"a": a}, step=1e-4)
    assert rep.passed and rep.max_rel_error < 1e-9
    assert rep.leaves[0].kink_probes == 2
    naive = grad_check(f, {"a": a}, step=1e-4, kink_retries=0)
    assert not naive.passed  # plain central differences halve the slope at the kink


def test_record_kinks_tracks_branches():
    x = T.Tensor(np.array([-1.0, 2.0]))
    with T.record_kinks() as a:
        T.relu(x)
        T.clamp_min(x, 0.5)
    x.data[0] = 1.0
    with T.record_kinks() as b:
        T.relu(x)
        T.clamp_min(x, 0.5)
    assert len(a) == 2 and a != b
    with T.record_kinks() as c:
        pass
    assert c == []
