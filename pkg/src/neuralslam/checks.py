"""Finite-difference gradient battery for the primitives, the memory
addressing path and a toy end-to-end agent loss."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import env as gw
from . import memory as mem
from .autodiff import Tensor
from .model import TOY_ARCH, ModelParams, Variant, forward, initial_state


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_rel_error: float
    instances: int
    tolerance: float
    seconds: float = 0.0

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag} {self.name:<28} max_rel_err={self.max_rel_error:.3e} "
                f"tol={self.tolerance:.0e} n={self.instances}")


def _flip_grad(t: Tensor) -> Tensor:
    # identity forward, negated backward; used to inject faults
    return ad._emit("flip_grad", (t,), t.data.copy(), lambda g: (-g,))


def _maybe_flip(name: str, faults, t: Tensor) -> Tensor:
    return _flip_grad(t) if faults and name in faults else t


def _probe(rng, shape) -> Tensor:
    # random read-out weights so no structural zero gradient hides errors
    return Tensor(rng.normal(size=shape))


def _simplex(rng, shape) -> np.ndarray:
    w = rng.random(shape) + 0.05
    return w / w.sum()


# each case builds (function, points) from a generator; function maps tracked
# tensors to a scalar
def _cases(faults):
    def unary(name, fn, sampler):
        def make(rng):
            x = sampler(rng)
            r = _probe(rng, fn(Tensor(x)).shape)
            return (lambda a: ad.sum_(ad.mul(_maybe_flip(name, faults, fn(a)), r))), [x]
        return name, make

    def binary(name, fn, sa, sb):
        def make(rng):
            a, b = sa(rng), sb(rng)
            r = _probe(rng, fn(Tensor(a), Tensor(b)).shape)
            return (lambda x, y: ad.sum_(ad.mul(_maybe_flip(name, faults, fn(x, y)), r))), [a, b]
        return name, make

    vec = lambda n: (lambda rng: rng.normal(size=n))  # noqa: E731
    pos = lambda n: (lambda rng: rng.uniform(0.2, 2.0, size=n))  # noqa: E731
    scal = lambda rng: rng.normal(size=())  # noqa: E731

    yield binary("matvec", ad.matvec, lambda r: r.normal(size=(4, 5)), vec(5))
    yield binary("vecmat", ad.vecmat, vec(4), lambda r: r.normal(size=(4, 3)))
    yield binary("outer", ad.outer, vec(3), vec(4))
    yield binary("add", ad.add, vec(6), vec(6))
    yield binary("add_scalar", ad.add, scal, vec(6))
    yield binary("sub", ad.sub, vec(6), vec(6))
    yield binary("mul", ad.mul, vec(6), vec(6))
    yield binary("mul_scalar", ad.mul, vec(6), scal)
    yield binary("div", ad.div, vec(5), lambda r: r.uniform(0.5, 2.0, size=()))
    yield unary("neg", ad.neg, vec(5))
    yield unary("sigmoid", ad.sigmoid, vec(6))
    yield unary("tanh", ad.tanh, vec(6))
    yield unary("softplus", ad.softplus, vec(6))
    yield unary("exp", ad.exp, vec(6))
    yield unary("log", ad.log, pos(6))
    yield unary("power_const", lambda a: ad.power(a, 2.5), pos(6))
    yield binary("power", ad.power, pos(6), lambda r: r.uniform(1.0, 3.0, size=()))
    yield unary("softmax", ad.softmax, lambda r: r.normal(size=(3, 3)))
    yield unary("log_softmax", ad.log_softmax, vec(5))
    yield binary("concat", lambda a, b: ad.concat([a, b]), vec(3), vec(4))
    yield unary("sum", ad.sum_, lambda r: r.normal(size=(2, 3)))
    yield unary("reshape", lambda a: ad.reshape(a, (3, 2)), vec(6))
    yield unary("getitem", lambda a: ad.getitem(a, slice(1, 4)), vec(6))
    yield binary("cosine_similarity", ad.cosine_similarity, lambda r: r.normal(size=(5, 3)), vec(3))
    yield binary("conv2d_3x3", ad.conv2d_3x3, lambda r: r.normal(size=(4, 5)),
                 lambda r: r.normal(size=(3, 3)))
    yield binary("conv2d_3x3_zero", lambda a, b: ad.conv2d_3x3(a, b, circular=False),
                 lambda r: r.normal(size=(4, 5)), lambda r: r.normal(size=(3, 3)))

    # memory addressing path, parameterised by raw (unsquashed) controls
    H, W, C = 4, 5, 3

    def mem_case(name, build):
        def make(rng):
            fn, pts = build(rng)
            r = _probe(rng, fn(*[Tensor(p) for p in pts]).shape)
            return (lambda *xs: ad.sum_(ad.mul(_maybe_flip(name, faults, fn(*xs)), r))), pts
        return name, make

    yield mem_case("content_weight", lambda rng: (
        lambda M, k, b: mem.content_weight(M, k, ad.softplus(b), (H, W)),
        [rng.normal(size=(H * W, C)), rng.normal(size=C), rng.normal(size=())]))
    yield mem_case("interpolate", lambda rng: (
        lambda wc, wb, g: mem.interpolate(wc, wb, ad.sigmoid(g)),
        [_simplex(rng, (H, W)), _simplex(rng, (H, W)), rng.normal(size=())]))
    yield mem_case("shift", lambda rng: (
        lambda w, logits: mem.shift(w, ad.reshape(ad.softmax(logits), (3, 3))),
        [_simplex(rng, (H, W)), rng.normal(size=9)]))
    yield mem_case("sharpen", lambda rng: (
        lambda w, z: mem.sharpen(w, ad.add(1.0, ad.softplus(z))),
        [_simplex(rng, (H, W)), rng.normal(size=())]))
    yield mem_case("sharpen_zeta2", lambda rng: (
        lambda w: mem.sharpen(w, Tensor(2.0)),
        [_simplex(rng, (H, W))]))
    yield mem_case("write", lambda rng: (
        lambda M, w, e, a: mem.write(M, w, ad.sigmoid(e), a),
        [rng.normal(size=(H * W, C)), _simplex(rng, (H, W)), rng.normal(size=C), rng.normal(size=C)]))
    yield mem_case("read", lambda rng: (
        lambda M, w: mem.read(M, w),
        [rng.normal(size=(H * W, C)), _simplex(rng, (H, W))]))

    def addressing(rng):
        def fn(M, k, b, g, logits, z, prev):
            st = mem.address(M, prev, k, ad.softplus(b), ad.sigmoid(g),
                             ad.reshape(ad.softmax(logits), (3, 3)), ad.add(1.0, ad.softplus(z)))
            return st["weight"]
        return fn, [rng.normal(size=(H * W, C)), rng.normal(size=C), rng.normal(size=()),
                    rng.normal(size=()), rng.normal(size=9), rng.normal(size=()), _simplex(rng, (H, W))]
    yield mem_case("addressing_pipeline", addressing)


def run_case(name, make, instances: int, tolerance: float, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    t0 = time.time()
    worst, ok = 0.0, True
    for _ in range(instances):
        fn, pts = make(rng)
        rep = ad.gradcheck(fn, pts, tolerance=tolerance)
        worst = max(worst, rep.max_rel_error)
        ok &= rep.passed
    return CheckResult(name, bool(ok), worst, instances, tolerance, time.time() - t0)


def toy_episode_loss_check(seed: int = 0, steps: int = 3, variant: str = "neural_slam",
                           tolerance: float = 1e-3, eps: float = 1e-5) -> CheckResult:
    """Gradient of a multi-step actor-critic style loss w.r.t. every parameter
    of a toy agent (4x4x4 memory, 8 hidden units), against central
    differences. The motion-predicted beliefs are held at their recorded
    values, matching the stopped gradient on that path."""
    t0 = time.time()
    rng = np.random.default_rng(seed)
    params = ModelParams.create(variant, TOY_ARCH, seed=seed)
    pose = gw.AgentPose(0, 1, gw.Heading.EAST)
    actions = [int(a) for a in rng.integers(0, 4, size=steps)]
    sensors = [rng.choice([0.0, 0.5, 1.0], size=gw.N_SENSOR) for _ in range(steps)]
    weights = rng.normal(size=steps)

    def run(recorded=None):
        state = initial_state(params, pose)
        total = Tensor(np.zeros(()))
        priors = []
        prev = 0
        for t in range(steps):
            obs = gw.Observation(sensors[t], prev)
            pri = None if recorded is None else recorded[t]
            pi, v, state = forward(params, state, obs, priors=pri)
            if params.variant is Variant.NEURAL_SLAM:
                priors.append((state.extras["write_prior"].data, state.extras["read_prior"].data))
            lp = ad.getitem(state.extras["log_pi"], actions[t])
            total = ad.add(total, ad.add(ad.mul(lp, weights[t]), ad.mul(ad.sum_(v), 0.5)))
            prev = actions[t]
        return total, priors

    with ad.Tape() as tape:
        loss, priors = run()
    grads = ad.backward(tape, loss)
    recorded = priors or None
    worst = 0.0
    for name, p in params.params.items():
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            fp = float(run(recorded)[0].data)
            flat[j] = old - eps
            fm = float(run(recorded)[0].data)
            flat[j] = old
            num = (fp - fm) / (2 * eps)
            a = grads[name].reshape(-1)[j]
            err = abs(a - num) / max(abs(a), abs(num), 1e-5)
            worst = max(worst, err)
    return CheckResult(f"toy_agent_{variant}", worst < tolerance, worst, 1, tolerance, time.time() - t0)


def run_battery(scale: str = "toy", tolerance: float = 1e-4, faults=None, seed: int = 0) -> list[CheckResult]:
    """``toy`` runs 10 instances per operation, ``full`` runs 100."""
    if scale not in ("toy", "full"):
        raise ValueError(f"unknown scale {scale!r}")
    n = 10 if scale == "toy" else 100
    results = [run_case(name, make, n, tolerance, seed) for name, make in _cases(faults)]
    results.append(toy_episode_loss_check(seed, variant="neural_slam"))
    results.append(toy_episode_loss_check(seed, variant="a3c_ext"))
    if scale == "full":
        for v in ("a3c", "a3c_nav1", "a3c_nav2"):
            results.append(toy_episode_loss_check(seed, variant=v))
    return results
