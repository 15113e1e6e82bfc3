import math

import numpy as np
import pytest

from tsnf import autodiff as ad
from tsnf.autodiff import NonFiniteError, Tensor
from tsnf.distributions import GaussianLogDensity, UnnormalizedLogDensity, make_rng
from tsnf.flows import ActNorm, FlowModel, build_flow
from tsnf.training import (
    OUTSIDE_SUPPORT_LOG_DENSITY,
    AdamState,
    LossTrace,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    fit,
    forward_kl_loss,
    reverse_kl_loss,
)

from conftest import make_layer


class Shifted(UnnormalizedLogDensity):
    """target + log C"""

    def __init__(self, inner, log_c):
        self.inner, self.log_c, self.dim = inner, log_c, inner.dim

    def log_prob(self, x):
        return self.inner.log_prob(x) + self.log_c

    def support(self, x):
        return self.inner.support(x)


class HalfPlane(UnnormalizedLogDensity):
    """Standard normal restricted to x_0 > 0."""

    dim = 1

    def log_prob(self, x):
        return ad.sum_(ad.square(x), axis=-1) * -0.5

    def support(self, x):
        return x[:, 0] > 0


class NaNTarget(UnnormalizedLogDensity):
    dim = 1

    def log_prob(self, x):
        return Tensor(np.full(x.shape[0], np.nan))


def small_spline_model(dim, seed):
    rng = make_rng(seed)
    model = FlowModel(dim, [make_layer("affine_coupling", dim, rng), make_layer("ar_rq_spline", dim, rng)])
    return model


# --- config ---------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs", [{"iterations": -1}, {"batch_size": 0}, {"betas": (0.0, 0.9)}, {"betas": (0.9, 1.0)}, {"schedule": "step"}]
)
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_cosine_schedule_endpoints():
    cfg = TrainConfig(iterations=100, learning_rate=1e-3)
    assert cfg.lr_at(0) == pytest.approx(1e-3)
    assert cfg.lr_at(50) == pytest.approx(5e-4)
    assert TrainConfig(learning_rate=1e-3, schedule="constant").lr_at(999) == 1e-3


# --- forward KL ----------------------------------------------------------------


def test_forward_loss_identity_model_is_mean_negative_normal_log_density():
    x = make_rng(0).standard_normal((64, 2))
    model = FlowModel(2)
    loss = forward_kl_loss(model, x).item()
    assert loss == -np.mean(model.log_prob_np(x))
    expected = np.mean(0.5 * np.sum(x * x, axis=1) + math.log(2 * math.pi))
    assert loss == pytest.approx(expected, abs=1e-12)


def test_forward_loss_batch_order_invariant():
    x = make_rng(1).standard_normal((50, 2))
    model = small_spline_model(2, 2)
    a = forward_kl_loss(model, x).item()
    b = forward_kl_loss(model, x[::-1]).item()
    assert a == pytest.approx(b, rel=1e-14)


def test_forward_loss_rejects_bad_batch():
    with pytest.raises(ValueError):
        forward_kl_loss(FlowModel(2), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        forward_kl_loss(FlowModel(2), np.zeros((0, 2)))


def test_forward_loss_nonfinite_names_sample():
    model = FlowModel(1, [ActNorm(1, log_scale=np.array([-700.0]), shift=np.zeros(1))])
    with pytest.raises(NonFiniteError) as info:
        forward_kl_loss(model, np.array([[0.0], [1.0]]))
    assert "sample 1" in str(info.value)


def test_actnorm_fit_recovers_closed_form_mle():
    data = make_rng(3).normal(3.0, 2.0, (4000, 1))
    model = FlowModel(1, [ActNorm(1, log_scale=np.zeros(1), shift=np.zeros(1))])
    fit(model, "forward", data, TrainConfig(iterations=3000, batch_size=4000, learning_rate=0.05, seed=0))
    # MLE of a Gaussian: sample mean and (biased) sample standard deviation
    assert model.transforms[0].shift.data[0] == pytest.approx(data.mean(), abs=1e-3)
    assert math.exp(model.transforms[0].log_scale.data[0]) == pytest.approx(data.std(), abs=1e-3)


def test_forward_fit_to_banana_improves_held_out_likelihood():
    rng = make_rng(4)

    def banana(n):
        x = rng.standard_normal(n)
        return np.column_stack([x, x * x + 0.3 * rng.standard_normal(n)])

    train, held = banana(4000), banana(2000)
    model = build_flow(2, [{"kind": "affine_coupling", "hidden": (32, 32)}] * 2 + [{"kind": "actnorm"}], make_rng(5))
    model.initialize(train)
    before = model.log_prob_np(held).mean()
    _, trace = fit(model, "forward", train, TrainConfig(iterations=600, learning_rate=5e-3, seed=6))
    assert trace.losses[-1] < trace.losses[0]
    assert model.log_prob_np(held).mean() > before + 0.2


def test_forward_fit_not_worse_than_identity_baseline():
    data = make_rng(7).normal([1.0, -2.0], [0.5, 3.0], (2000, 2))
    model = build_flow(2, [{"kind": "affine_coupling", "hidden": (16,)}, {"kind": "actnorm"}], make_rng(8))
    fit(model, "forward", data, TrainConfig(iterations=300, learning_rate=5e-3, seed=9))
    assert forward_kl_loss(model, data).item() <= forward_kl_loss(FlowModel(2), data).item()


def test_zero_iteration_fit_leaves_identity_model_unchanged():
    model = build_flow(2, [{"kind": "affine_coupling"}, {"kind": "ar_rq_spline"}], make_rng(10))
    before = [p.data.copy() for p in model.parameters()]
    _, trace = fit(model, "forward", make_rng(11).standard_normal((10, 2)), TrainConfig(iterations=0))
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))
    assert trace.losses == []


def test_fit_is_bit_reproducible():
    data = make_rng(12).standard_normal((500, 2))
    traces = []
    for _ in range(2):
        model = build_flow(2, [{"kind": "ar_rq_spline", "hidden": (8,)}, {"kind": "actnorm"}], make_rng(13))
        _, trace = fit(model, "forward", data, TrainConfig(iterations=30, log_interval=1, seed=14))
        traces.append(trace.losses)
    assert traces[0] == traces[1]


def test_fit_validates_objective_and_source():
    model = FlowModel(1)
    with pytest.raises(ValueError):
        fit(model, "sideways", np.zeros((2, 1)), TrainConfig(iterations=1))
    with pytest.raises(TypeError):
        fit(model, "reverse", np.zeros((2, 1)), TrainConfig(iterations=1))
    with pytest.raises(ValueError):
        fit(model, "forward", np.zeros((2, 3)), TrainConfig(iterations=1))


def test_divergence_detector_aborts_after_ten_bad_steps():
    with pytest.raises(TrainingDiverged):
        fit(FlowModel(1), "reverse", NaNTarget(), TrainConfig(iterations=50, batch_size=4))


def test_loss_trace_csv(tmp_path):
    trace = LossTrace([0, 10], [1.5, 0.25])
    trace.to_csv(tmp_path / "loss.csv")
    assert (tmp_path / "loss.csv").read_text() == "step,loss\n0,1.5\n10,0.25\n"


# --- reverse KL ----------------------------------------------------------------


def test_reverse_loss_of_identity_against_standard_normal_is_zero():
    n = 4000
    target = GaussianLogDensity(np.zeros(2), np.eye(2))
    loss = reverse_kl_loss(FlowModel(2), target, n, make_rng(15)).item()
    assert abs(loss) <= 3 / math.sqrt(n)


def test_reverse_loss_constant_shift():
    target = GaussianLogDensity(np.array([0.5, -0.5]), np.array([[1.0, 0.3], [0.3, 2.0]]))
    model = small_spline_model(2, 16)
    results = []
    for log_c in (0.0, 7.25):
        ad.zero_grads(model.parameters())
        loss = reverse_kl_loss(model, Shifted(target, log_c), 64, make_rng(17))
        ad.backward(loss)
        results.append((loss.item(), [p.grad.copy() for p in model.parameters()]))
    (l0, g0), (l1, g1) = results
    assert l1 - l0 == pytest.approx(-7.25, abs=1e-12)
    assert max(np.max(np.abs(a - b)) for a, b in zip(g0, g1)) < 1e-10


def test_reverse_loss_out_of_support_penalty():
    # identity model: about half of the base draws land outside x > 0
    model = FlowModel(1)
    n = 100
    loss = reverse_kl_loss(model, HalfPlane(), n, make_rng(18)).item()
    u = make_rng(18).standard_normal((n, 1))
    n_out = int(np.sum(u[:, 0] <= 0))
    log_q = -0.5 * u[:, 0] ** 2 - 0.5 * math.log(2 * math.pi)
    inside = u[:, 0] > 0
    expected = (log_q.sum() + 0.5 * np.sum(u[inside, 0] ** 2) - n_out * OUTSIDE_SUPPORT_LOG_DENSITY) / n
    assert loss == pytest.approx(expected, rel=1e-12)


def test_reverse_loss_nan_target_raises():
    with pytest.raises(NonFiniteError):
        reverse_kl_loss(FlowModel(1), NaNTarget(), 5, make_rng(0))


def test_reverse_loss_dimension_and_count_checked():
    with pytest.raises(ValueError):
        reverse_kl_loss(FlowModel(2), HalfPlane(), 5, make_rng(0))
    with pytest.raises(ValueError):
        reverse_kl_loss(FlowModel(1), HalfPlane(), 0, make_rng(0))


def test_reverse_fit_to_correlated_gaussian():
    mean = np.array([1.0, -0.5])
    cov = np.array([[1.0, 0.8], [0.8, 1.0]])
    layers = [{"kind": "affine_coupling", "hidden": (16,)}, {"kind": "affine_coupling", "hidden": (16,)}, {"kind": "actnorm"}]
    model = build_flow(2, layers, make_rng(19))
    fit(model, "reverse", GaussianLogDensity(mean, cov), TrainConfig(iterations=1500, learning_rate=1e-2, seed=20))
    x = model.sample(200_000, make_rng(21))
    assert np.max(np.abs(x.mean(axis=0) - mean)) < 0.02
    assert np.max(np.abs(np.cov(x, rowvar=False) - cov)) < 0.05


# --- Adam ----------------------------------------------------------------------


def test_adam_first_step_moves_by_learning_rate():
    p = np.array([1.0])
    adam_step([p], [np.array([0.5])], AdamState.zeros_like([p]), lr=1e-3)
    assert p[0] == pytest.approx(1.0 - 1e-3, abs=1e-10)


def test_adam_zero_gradient_is_a_no_op():
    p = np.array([1.0, -2.0])
    state = AdamState.zeros_like([p])
    for _ in range(5):
        adam_step([p], [np.zeros(2)], state, lr=0.1)
    assert p.tolist() == [1.0, -2.0]
    assert state.step == 5


def test_adam_minimizes_quadratic():
    p = np.array([0.0])
    state = AdamState.zeros_like([p])
    for _ in range(200):
        adam_step([p], [2.0 * (p - 2.0)], state, lr=0.1)
    assert p[0] == pytest.approx(2.0, abs=1e-3)


def test_adam_rejects_nonfinite_and_misaligned():
    p = np.zeros(2)
    with pytest.raises(NonFiniteError):
        adam_step([p], [np.array([np.nan, 0.0])], AdamState.zeros_like([p]), lr=0.1)
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(3)], AdamState.zeros_like([p]), lr=0.1)
