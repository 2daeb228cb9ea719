"""Central-difference verification of taped gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import ContractError, Tensor, record_kinks


@dataclass
class LeafReport:
    name: str
    max_rel_error: float
    entries: int
    passed: bool
    kink_probes: int = 0  # probes that went one-sided or shrank to avoid a kink


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    leaves: list[LeafReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(leaf.passed for leaf in self.leaves)

    @property
    def max_rel_error(self) -> float:
        return max((leaf.max_rel_error for leaf in self.leaves), default=0.0)

    def __str__(self) -> str:
        lines = [
            f"{'PASS' if leaf.passed else 'FAIL'}  {leaf.name:<40s} rel_err={leaf.max_rel_error:.3e} (n={leaf.entries}"
            + (f", {leaf.kink_probes} near kinks)" if leaf.kink_probes else ")")
            for leaf in self.leaves
        ]
        lines.append(f"{'PASS' if self.passed else 'FAIL'}  overall max rel_err={self.max_rel_error:.3e} tol={self.tolerance:g}")
        return "\n".join(lines)


def grad_check(
    f: Callable[[], Tensor],
    leaves: Mapping[str, Tensor] | Sequence[Tensor],
    step: float | Mapping[str, float] = 1e-6,
    tolerance: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
    atol: float = 1e-6,
    kink_retries: int = 3,
) -> GradCheckReport:
    """Compare ``f``'s analytic gradients with central differences.

    Leaves are promoted to float64 for the duration of the check and restored
    afterwards. For each leaf the error is ``max|analytic - numeric|`` over the
    probed entries, divided by ``max(max|analytic|, max|numeric|, atol)`` with
    the analytic maximum taken over the whole leaf. With ``max_entries`` set,
    the largest analytic entry plus a seeded random subset is probed.

    Central differences are meaningless across a ReLU or clamp kink. Each
    probe compares the branch pattern at ``x +- h`` with the one at ``x``.
    If one side crossed, a second-order one-sided stencil on the other side
    is used; if both did, the step shrinks tenfold, up to ``kink_retries``
    times.
    """
    if not isinstance(leaves, Mapping):
        leaves = {f"leaf{i}": t for i, t in enumerate(leaves)}
    saved = {name: (t.data, t.grad) for name, t in leaves.items()}
    rng = np.random.default_rng(seed)
    steps = {name: float(step[name] if isinstance(step, Mapping) else step) for name in leaves}
    report = GradCheckReport(tolerance=tolerance, step=min(steps.values(), default=0.0))
    try:
        for t in leaves.values():
            t.data = t.data.astype(np.float64)
            t.grad = np.zeros_like(t.data)
        with record_kinks() as branches:
            first = f()
        second = f()
        base_value = float(first.data)
        if first.data.shape != ():
            raise ContractError("grad_check needs a scalar-valued function")
        if not np.array_equal(first.data, second.data):
            raise ContractError("function is not deterministic: repeated evaluation differs")
        first.backward()

        for name, t in leaves.items():
            h = steps[name]
            analytic = t.grad.copy()
            flat = t.data.reshape(-1)
            n = flat.size
            if max_entries is None or n <= max_entries:
                idx = np.arange(n)
            else:  # the largest analytic entry plus a random sample
                top = int(np.argmax(np.abs(analytic.reshape(-1))))
                rest = rng.choice(np.delete(np.arange(n), top), max_entries - 1, replace=False)
                idx = np.sort(np.concatenate([[top], rest]))
            numeric = np.empty(len(idx))
            near_kinks = 0
            for j, i in enumerate(idx):
                numeric[j], dodged = _probe_entry(f, flat, i, h, base_value, branches, kink_retries)
                near_kinks += dodged
            a = analytic.reshape(-1)[idx]
            scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), atol)
            err = float(np.max(np.abs(a - numeric)) / scale)
            report.leaves.append(LeafReport(name, err, len(idx), err <= tolerance, near_kinks))
    finally:
        for name, t in leaves.items():
            t.data, t.grad = saved[name]
    return report


# ---------------------------------------------------------------- suites


def _eval_at(f, flat, i, value):
    orig = flat[i]
    flat[i] = value
    try:
        with record_kinks() as branches:
            out = float(f().data)
    finally:
        flat[i] = orig
    return out, branches


def _probe_entry(f, flat, i, h, f0, branches, retries) -> tuple[float, bool]:
    """Numeric derivative along one entry and whether a kink had to be avoided."""
    x = flat[i]
    for attempt in range(retries + 1):
        hi, b_hi = _eval_at(f, flat, i, x + h)
        lo, b_lo = _eval_at(f, flat, i, x - h)
        if (b_hi == branches and b_lo == branches) or attempt == retries:
            return (hi - lo) / (2.0 * h), attempt > 0
        for sign, near, clean in ((1.0, hi, b_hi == branches), (-1.0, lo, b_lo == branches)):
            if clean:
                far, b_far = _eval_at(f, flat, i, x + 2.0 * sign * h)
                if b_far == branches:
                    return sign * (4.0 * near - 3.0 * f0 - far) / (2.0 * h), True
        h /= 10.0
    raise AssertionError("unreachable")


def _probe(y: Tensor, seed: int) -> Tensor:
    """Reduce ``y`` to a scalar with fixed random weights so every entry matters."""
    from . import tensor as T

    w = np.random.default_rng([seed, 7]).standard_normal(y.shape)
    return T.tsum(T.mul(y, Tensor(w)))


def primitive_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]]:
    """One small randomized case per differentiable primitive."""
    from . import tensor as T

    rng = np.random.default_rng(seed)

    def leaf(*shape, positive=False, away=False):
        x = rng.standard_normal(shape)
        if positive:
            x = np.abs(x) + 0.5
        if away:  # keep clear of kinks
            x = np.where(np.abs(x) < 0.1, 0.3, x)
        return Tensor(x.astype(np.float32), requires_grad=True)

    cases: dict = {}

    def add(name, fn, **leaves):
        cases[name] = (lambda: _probe(fn(**leaves), seed), leaves)

    add("add", lambda a, b: T.add(a, b), a=leaf(3, 4), b=leaf(4))
    add("sub", lambda a, b: T.sub(a, b), a=leaf(3, 4), b=leaf(3, 4))
    add("mul", lambda a, b: T.mul(a, b), a=leaf(2, 5), b=leaf(5))
    add("neg", lambda a: T.neg(a), a=leaf(4))
    add("exp", lambda a: T.exp(a), a=leaf(3, 3))
    add("log", lambda a: T.log(a), a=leaf(3, 3, positive=True))
    add("sqrt", lambda a: T.sqrt(a), a=leaf(5, positive=True))
    add("clamp_min", lambda a: T.clamp_min(a, 0.0), a=leaf(6, away=True))
    add("relu", lambda a: T.relu(a), a=leaf(2, 6, away=True))
    add("gelu", lambda a: T.gelu(a), a=leaf(2, 6))
    add("softplus", lambda a: T.softplus(a), a=leaf(2, 6))
    add("sum", lambda a: T.tsum(a, axis=1), a=leaf(3, 4))
    add("mean", lambda a: T.mean(a, axis=0), a=leaf(3, 4))
    add("reshape", lambda a: T.reshape(a, (4, 3)), a=leaf(3, 4))
    add("transpose", lambda a: T.transpose(a, (1, 0, 2)), a=leaf(2, 3, 4))
    add("take", lambda a: T.take(a, np.array([0, 2, 2, 1])), a=leaf(3, 2))
    add("concat", lambda a, b: T.concat([a, b], axis=1), a=leaf(2, 3), b=leaf(2, 2))
    add("stack", lambda a, b: T.stack([a, b]), a=leaf(2, 3), b=leaf(2, 3))
    add("matmul", lambda a, b: T.matmul(a, b), a=leaf(2, 3, 4), b=leaf(4, 5))
    add("matmul_batched", lambda a, b: T.matmul(a, b), a=leaf(2, 3, 4), b=leaf(2, 4, 2))
    add("linear", lambda x, w, b: T.linear(x, w, b), x=leaf(3, 4), w=leaf(4, 5), b=leaf(5))
    add("layer_norm", lambda x, g, b: T.layer_norm(x, g, b), x=leaf(3, 6), g=leaf(6), b=leaf(6))
    add("softmax", lambda x: T.softmax(x, axis=-1), x=leaf(3, 5))
    mask = np.tril(np.ones((4, 4), dtype=bool))
    add("softmax_masked", lambda x: T.softmax(x, axis=-1, mask=mask), x=leaf(4, 4))
    add("conv2d", lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1), x=leaf(2, 5, 5), w=leaf(3, 2, 3, 3), b=leaf(3))
    add("conv_transpose2d", lambda x, w, b: T.conv_transpose2d(x, w, b, stride=2, padding=1),
        x=leaf(2, 3, 3), w=leaf(2, 3, 4, 4), b=leaf(3))
    add("bilinear_resize", lambda x: T.bilinear_resize(x, 7, 5), x=leaf(2, 4, 3))
    return cases


def run_primitive_suite(seed: int = 0, tolerance: float = 1e-3) -> dict[str, GradCheckReport]:
    return {name: grad_check(f, leaves, tolerance=tolerance) for name, (f, leaves) in primitive_cases(seed).items()}


def model_loss_check(model, frames, loss_cfg=None, max_entries: int = 4, tolerance: float = 1e-3,
                     seed: int = 0, step: float = 1e-4, mirror_step: float = 1e-6) -> GradCheckReport:
    """End-to-end check: training loss w.r.t. every trainable parameter.

    Decoder gradients at init are around 1e-6 on a loss near 10, so a 1e-6
    step drowns in float64 roundoff and ``step`` defaults to 1e-4. The mirror
    sits behind the text encoder where curvature is higher, so it gets the
    smaller ``mirror_step``. Probes that straddle a ReLU kink in the
    deconvolution stack retry with a smaller step (see ``grad_check``).
    """
    from .training import LossConfig, batch_loss, encode_dataset

    loss_cfg = loss_cfg or LossConfig()
    feats = encode_dataset(model, frames)
    idx = list(range(len(frames)))
    leaves = {p.name: p.tensor for p in model.trainable()}
    steps = {name: mirror_step if name == "mirror" else step for name in leaves}
    return grad_check(lambda: batch_loss(model, feats, frames, idx, loss_cfg), leaves,
                      tolerance=tolerance, max_entries=max_entries, seed=seed, step=steps)
