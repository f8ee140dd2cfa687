"""Central-difference gradient checks for ops, blocks and whole networks.

The scalar objective is ``sum(out * proj)`` with a fixed random ``proj`` so
every output element contributes with a distinct weight.  Coordinates whose
+/- step flips a ReLU, max-pool or max decision are reported as excluded
rather than compared.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from recalnet import ops
from recalnet.tensor import Tensor

STEP = 1e-3
OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    checked: int
    excluded: int
    tol: float
    zeros: int = 0

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_err <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel err {self.max_rel_err:.2e} (tol {self.tol:.0e}), "
                f"{self.checked} coords checked ({self.zeros} agreed zeros), "
                f"{self.excluded} kink-adjacent excluded")


def _evaluate(fn, proj_holder):
    ops.branch_log = []
    try:
        out = fn()
        branches = ops.branch_log
    finally:
        ops.branch_log = None
    if proj_holder[0] is None:
        proj_holder[0] = np.random.default_rng(1234).uniform(0.5, 1.5, out.shape)
    return out, branches


def _same_branches(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def rel_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(name: str, fn: Callable[[], Tensor], wrt: dict[str, Tensor], tol: float = OP_TOL,
                    step: float = STEP, max_coords: int | None = None, seed: int = 0,
                    floor: float = 1e-6) -> GradCheckResult:
    """Compare reverse-mode gradients of ``fn`` w.r.t. ``wrt`` against central differences.

    ``max_coords`` caps the number of coordinates sampled per tensor (all
    coordinates when None).  ``fn`` must rebuild its tape on every call.
    Coordinates where both derivatives sit below the finite-difference
    resolution count as agreed zeros (e.g. a conv bias feeding batch norm).
    """
    proj = [None]
    for t in wrt.values():
        t.grad = None
    out, base = _evaluate(fn, proj)
    obj = ops.sum_all(ops.mul(out, Tensor(proj[0])))
    # leaves outside ``wrt`` may hold grads from an earlier call; only ``wrt`` is read
    obj.backward(accumulate=True)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in wrt.items()}
    for t in wrt.values():
        t.grad = None

    def objective():
        o, br = _evaluate(fn, proj)
        return float(np.sum(o.data * proj[0])), br

    # Smallest derivative a central difference can resolve: a few ulps of the
    # objective's summands over the step.  Below it both sides read as zero.
    resolution = 4.0 * np.finfo(np.float64).eps * float(np.sum(np.abs(out.data * proj[0]))) / step

    rng = np.random.default_rng(seed)
    worst, checked, excluded, zeros = 0.0, 0, 0, 0
    for key, t in wrt.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = analytic[key].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            f_plus, br_plus = objective()
            flat[i] = orig - step
            f_minus, br_minus = objective()
            flat[i] = orig
            if not (_same_branches(br_plus, base) and _same_branches(br_minus, base)):
                excluded += 1
                continue
            numeric = (f_plus - f_minus) / (2 * step)
            checked += 1
            if abs(a_flat[i]) <= resolution and abs(numeric) <= resolution:
                zeros += 1
                continue
            worst = max(worst, rel_error(a_flat[i], numeric, floor))
    return GradCheckResult(name, worst, checked, excluded, tol, zeros)


# ---------------------------------------------------------------------------
# suites


def _rand(rng, *shape, requires_grad=True) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=requires_grad)


def _op_cases(rng) -> dict[str, Callable[[], GradCheckResult]]:
    def conv(groups, stride, padding, name):
        x = _rand(rng, 2, 4, 6, 6)
        w = _rand(rng, 6, 4 // groups, 3, 3)
        b = _rand(rng, 6)
        return lambda: check_gradients(name, lambda: ops.conv2d(x, w, b, stride, padding, groups),
                                       {"x": x, "w": w, "b": b})

    def unary(name, f, shape=(2, 3, 6, 6)):
        x = _rand(rng, *shape)
        return lambda: check_gradients(name, lambda: f(x), {"x": x})

    def avg(k):
        return unary(f"avg_pool{k}", lambda x: ops.avg_pool(x, k), (2, 3, 8, 8))

    def mul_case(name, other_shape):
        x = _rand(rng, 2, 4, 5, 5)
        y = _rand(rng, *other_shape)
        return lambda: check_gradients(name, lambda: ops.mul(x, y), {"x": x, "y": y})

    def binary(name, f):
        x, y = _rand(rng, 2, 3, 4, 4), _rand(rng, 2, 3, 4, 4)
        return lambda: check_gradients(name, lambda: f(x, y), {"x": x, "y": y})

    def concat_case():
        x, y = _rand(rng, 2, 3, 4, 4), _rand(rng, 2, 5, 4, 4)
        return lambda: check_gradients("channel_concat", lambda: ops.channel_concat([x, y]), {"x": x, "y": y})

    def norm_case(name, training):
        x = _rand(rng, 2, 3, 4, 4)
        g, b = _rand(rng, 3), _rand(rng, 3)
        if name == "layer_norm":
            fn = lambda: ops.layer_norm(x, g, b)
        else:
            rm, rv = np.zeros(3), np.ones(3) * 1.5
            fn = lambda: ops.batch_norm(x, g, b, rm.copy(), rv.copy(), training=training)
        return lambda: check_gradients(name, fn, {"x": x, "gamma": g, "beta": b})

    def loss_case():
        from recalnet.train import loss

        p = Tensor(rng.uniform(0.1, 0.9, (1, 1, 2, 2)), requires_grad=True)
        t = (rng.uniform(size=(1, 1, 2, 2)) > 0.5).astype(float)
        return lambda: check_gradients("loss", lambda: loss(p, t), {"pred": p})

    return {
        "conv2d": conv(1, 1, 1, "conv2d"),
        "conv2d_grouped": conv(2, 1, 1, "conv2d_grouped"),
        "conv2d_strided": conv(1, 2, 0, "conv2d_strided"),
        "avg_pool": avg(3),
        "avg_pool5": avg(5),
        "avg_pool7": avg(7),
        "global_avg_pool": unary("global_avg_pool", ops.global_avg_pool),
        "max_pool2": unary("max_pool2", ops.max_pool2),
        "bilinear_upsample2": unary("bilinear_upsample2", ops.bilinear_upsample2, (2, 3, 3, 5)),
        "relu": unary("relu", ops.relu),
        "sigmoid": unary("sigmoid", ops.sigmoid),
        "mul": binary("mul", ops.mul),
        "mul_region": mul_case("mul_region", (2, 1, 5, 5)),
        "mul_channel": mul_case("mul_channel", (2, 4, 1, 1)),
        "maximum": binary("maximum", ops.maximum),
        "channel_concat": concat_case(),
        "interleave_channels": binary("interleave_channels", ops.interleave_channels),
        "batch_norm": norm_case("batch_norm", True),
        "batch_norm_eval": norm_case("batch_norm_eval", False),
        "layer_norm": norm_case("layer_norm", False),
        "loss": loss_case(),
    }


OP_NAMES = tuple(_op_cases(np.random.default_rng(0)))
BLOCK_NAMES = ("recal", "res", "chs", "se", "scse")


def run_op(name: str, seed: int = 0) -> GradCheckResult:
    cases = _op_cases(np.random.default_rng(seed))
    if name not in cases:
        raise KeyError(f"unknown op {name!r}; choose from {sorted(cases)}")
    return cases[name]()


def run_block(name: str, shape=(2, 4, 6, 6), seed: int = 0) -> GradCheckResult:
    from recalnet import blocks
    from recalnet.nn import ParamStore

    rng = np.random.default_rng(seed)
    c = shape[1]
    factory = {"recal": blocks.ReCal, "res": blocks.RegionSqueeze, "chs": blocks.ChannelSqueeze,
               "se": blocks.SE, "scse": blocks.SCSE}
    if name not in factory:
        raise KeyError(f"unknown block {name!r}; choose from {BLOCK_NAMES}")
    block = factory[name](c, rng)
    # non-zero biases so ReLU-gated paths are exercised away from their kinks
    for pname, p in ParamStore(block):
        if p.kind != "weight":
            p.data[...] = rng.normal(scale=0.5, size=p.shape)
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    wrt = {"input": x, **{k: p for k, p in ParamStore(block)}}
    return check_gradients(f"block:{name}", lambda: block(x), wrt)


def run_model(width_scale: int = 8, size: int = 32, variant: str = "recal", seed: int = 0,
              max_coords: int = 4) -> GradCheckResult:
    from recalnet.model import ModelConfig, build_model

    cfg = ModelConfig(variant=variant, width_scale=width_scale, input_size=(size, size), seed=seed)
    model = build_model(cfg)
    model.train()
    rng = np.random.default_rng(seed + 1)
    x = Tensor(rng.uniform(size=(1, 3, size, size)), requires_grad=True)
    wrt = {"input": x, **dict(model.named_parameters())}
    return check_gradients(f"model:{variant}", lambda: model(x), wrt, tol=MODEL_TOL,
                           max_coords=max_coords, seed=seed)


def run_scope(scope: str) -> list[GradCheckResult]:
    """``op:<name>``, ``op:all``, ``block:<name>``, ``block:all`` or ``model``."""
    if scope == "model":
        return [run_model()]
    kind, _, name = scope.partition(":")
    if kind == "op":
        return [run_op(n) for n in (OP_NAMES if name == "all" else [name])]
    if kind == "block":
        return [run_block(n) for n in (BLOCK_NAMES if name == "all" else [name])]
    raise KeyError(f"unknown scope {scope!r}; use op:<name>, block:<name> or model")
