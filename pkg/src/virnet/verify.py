"""Oracle battery behind ``virnet verify``.

Every check returns :class:`CheckResult` rows holding the worst error seen
and the tolerance it was held to. The KL routines are injectable so a
deliberately broken implementation can be shown to fail.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import distributions as D
from . import objective, oracles, specfun
from . import tensor as T
from .degradation import DegradationSpec, KernelSpec, apply_degradation, make_kernel, reestimate_kernel
from .metrics import ssim
from .networks import NetworkConfig, init_params
from .objective import Batch
from .priors import HyperParams, compute_xi, filter_weights
from .tensor import Tensor

GRAD_TOL = 1e-4
KL_SIGMAS = 3.0


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    passed: bool
    detail: str = ""


def _result(name, err, tol, detail="") -> CheckResult:
    return CheckResult(name, float(err), tol, bool(err <= tol), detail)


# ------------------------------------------------------------ special functions


def check_specfun(rng: np.random.Generator, n: int = 200) -> list[CheckResult]:
    x = rng.uniform(0.05, 40.0, n)
    out = [
        _result("specfun.lgamma_recurrence",
                np.max(np.abs(specfun.lgamma(x + 1) - specfun.lgamma(x) - np.log(x))), 1e-11),
        _result("specfun.digamma_recurrence",
                np.max(np.abs(specfun.digamma(x + 1) - specfun.digamma(x) - 1 / x)), 1e-11),
        _result("specfun.trigamma_recurrence",
                np.max(np.abs(specfun.trigamma(x) - specfun.trigamma(x + 1) - 1 / x**2)) / 400, 1e-11),
    ]
    # duplication formula: lnG(2x) = (2x-1)ln2 - 0.5 ln(pi) + lnG(x) + lnG(x+1/2)
    dup = (specfun.lgamma(2 * x) - (2 * x - 1) * math.log(2) + 0.5 * math.log(math.pi)
           - specfun.lgamma(x) - specfun.lgamma(x + 0.5))
    out.append(_result("specfun.lgamma_duplication", np.max(np.abs(dup)), 1e-10))
    # reflection for the trigamma: psi1(x) + psi1(1-x) = pi^2 / sin^2(pi x)
    u = rng.uniform(0.05, 0.95, n)
    refl = specfun.trigamma(u) + specfun.trigamma(1 - u) - (math.pi / np.sin(math.pi * u)) ** 2
    out.append(_result("specfun.trigamma_reflection",
                       np.max(np.abs(refl) / (math.pi / np.sin(math.pi * u)) ** 2), 1e-10))
    known = [abs(specfun.lgamma(0.5) - 0.5 * math.log(math.pi)),
             abs(specfun.digamma(1.0) + 0.5772156649015329),
             abs(specfun.trigamma(1.0) - math.pi**2 / 6),
             abs(specfun.lgamma(1.0)), abs(specfun.lgamma(2.0))]
    out.append(_result("specfun.known_values", max(known), 1e-12))
    h = 1e-5
    fd = (specfun.lgamma(x + h) - specfun.lgamma(x - h)) / (2 * h)
    out.append(_result("specfun.lgamma_derivative", oracles.relative_error(fd, specfun.digamma(x)), 1e-7))
    return out


# ------------------------------------------------------------------ gradients


def _pos(rng, shape, lo=0.5, hi=2.0):
    return T.tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _any(rng, shape):
    return T.tensor(rng.standard_normal(shape), requires_grad=True)


def _weighted(out: Tensor, rng_seed: int = 99) -> Tensor:
    # a random projection so that the test sees every output entry
    w = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return T.sum(out * w)


def op_cases(rng: np.random.Generator) -> dict:
    """name -> (fn(list[Tensor]) -> scalar Tensor, inputs)."""
    k7 = np.random.default_rng(3).uniform(0, 1, (2, 5, 5))
    return {
        "add": (lambda t: _weighted(t[0] + t[1]), [_any(rng, (3, 4)), _any(rng, (4,))]),
        "sub": (lambda t: _weighted(t[0] - t[1]), [_any(rng, (3, 4)), _any(rng, (3, 1))]),
        "mul": (lambda t: _weighted(t[0] * t[1]), [_any(rng, (2, 3, 4)), _any(rng, (3, 4))]),
        "div": (lambda t: _weighted(t[0] / t[1]), [_any(rng, (3, 4)), _pos(rng, (3, 4))]),
        "neg": (lambda t: _weighted(-t[0]), [_any(rng, (5,))]),
        "log": (lambda t: _weighted(T.log(t[0])), [_pos(rng, (3, 4))]),
        "exp": (lambda t: _weighted(T.exp(t[0])), [_any(rng, (3, 4))]),
        "square": (lambda t: _weighted(T.square(t[0])), [_any(rng, (3, 4))]),
        "sqrt": (lambda t: _weighted(T.sqrt(t[0])), [_pos(rng, (3, 4))]),
        "softplus": (lambda t: _weighted(T.softplus(t[0])), [T.tensor(rng.uniform(-30, 30, (4, 5)), True)]),
        "leaky_relu": (lambda t: _weighted(T.leaky_relu(t[0])), [_any(rng, (4, 5))]),
        "lgamma": (lambda t: _weighted(T.lgamma(t[0])), [_pos(rng, (3, 4), 0.2, 30.0)]),
        "digamma": (lambda t: _weighted(T.digamma(t[0])), [_pos(rng, (3, 4), 0.2, 30.0)]),
        "sum": (lambda t: T.sum(T.square(t[0])), [_any(rng, (3, 4))]),
        "mean": (lambda t: T.mean(T.square(t[0])), [_any(rng, (3, 4))]),
        "conv2d": (lambda t: _weighted(T.conv2d(t[0], t[1], t[2], padding=1)),
                   [_any(rng, (2, 3, 6, 5)), _any(rng, (4, 3, 3, 3)), _any(rng, (4,))]),
        "conv2d_stride": (lambda t: _weighted(T.conv2d(t[0], t[1], None, stride=2, padding=1)),
                          [_any(rng, (1, 2, 7, 9)), _any(rng, (3, 2, 3, 3))]),
        "avgpool2": (lambda t: _weighted(T.avgpool2(t[0])), [_any(rng, (2, 2, 6, 4))]),
        "upsample": (lambda t: _weighted(T.upsample(t[0], 3)), [_any(rng, (1, 2, 3, 2))]),
        "concat": (lambda t: _weighted(T.concat([t[0], t[1]])), [_any(rng, (2, 1, 3, 3)), _any(rng, (2, 2, 3, 3))]),
        "slice_channels": (lambda t: _weighted(T.slice_channels(t[0], 1, 3)), [_any(rng, (2, 4, 3, 3))]),
        "pad_reflect": (lambda t: _weighted(T.pad_reflect(t[0], 2)), [_any(rng, (2, 1, 5, 4))]),
        "kernel_conv": (lambda t: _weighted(T.kernel_conv(t[0], k7, stride=2)), [_any(rng, (2, 1, 9, 10))]),
        "kl_gaussian": (lambda t: D.kl_gaussian(D.GaussianPosterior(t[0], t[1]), D.ZPrior(np.full((3, 3), 0.3), 0.5)),
                        [_any(rng, (3, 3)), _pos(rng, (3, 3), 0.1, 2.0)]),
        "kl_inverse_gamma": (lambda t: D.kl_inverse_gamma(D.InvGammaPosterior(t[0], t[1]),
                                                          D.SigmaPrior(3.0, np.full((3, 3), 0.7))),
                             [_pos(rng, (3, 3), 1.5, 8.0), _pos(rng, (3, 3), 0.1, 3.0)]),
    }


def check_gradients(rng: np.random.Generator, points: int = 25) -> list[CheckResult]:
    out = []
    for name, (fn, inputs) in op_cases(rng).items():
        err = oracles.gradcheck(fn, inputs, rng, points=points)
        out.append(_result(f"grad.{name}", err, GRAD_TOL))
    return out


def _toy_batch(rng: np.random.Generator, task: str, n: int = 2, size: int = 8) -> tuple[Batch, NetworkConfig, HyperParams]:
    hp = HyperParams(eps0_sq=1e-2, p=3, filter_kind="gaussian")
    x = rng.uniform(0, 1, (n, 1, size, size))
    if task == "sr":
        k = make_kernel(KernelSpec(kind="isotropic", d=1.0, support=5))
        spec = DegradationSpec(task="sr", kernel=KernelSpec(kind="isotropic", d=1.0, support=5), scale=2)
        hx = np.stack([apply_degradation(xi, spec) for xi in x])
        y = hx + 0.05 * rng.standard_normal(hx.shape)
        kernels = np.stack([k] * n)
        cfg = NetworkConfig(snet_channels=4, rnet_base_channels=4, t=2, scale=2)
        code = rng.standard_normal((n, 2, 1, 1)) * np.ones((1, 1, size // 2, size // 2))
    else:
        hx = x
        y = x + 0.1 * rng.standard_normal(x.shape)
        kernels, code = None, None
        cfg = NetworkConfig(snet_channels=4, rnet_base_channels=4)
    prior = compute_xi(y, hx, hp)
    batch = Batch(y=y, x=x, beta0=prior.beta0, alpha0=prior.alpha0, kernels=kernels,
                  scale=2 if task == "sr" else 1, code=code)
    return batch, cfg, hp


def elbo_param_gradcheck(rng: np.random.Generator, task: str = "denoise", count: int = 10,
                         step: float = 1e-6) -> float:
    """Relative error of d(-ELBO)/d(theta) on ``count`` random network weights."""
    batch, cfg, hp = _toy_batch(rng, task)
    params = init_params(cfg, rng)
    names = list(params)

    def value():
        return objective.loss(batch, params, cfg, hp, np.random.default_rng(11))[0]

    for p in params.values():
        p.grad = None
    T.backward(value())
    worst = 0.0
    for _ in range(count):
        name = names[rng.integers(len(names))]
        data = params[name].data
        i = np.unravel_index(int(rng.integers(data.size)), data.shape)
        analytic = params[name].grad[i]
        orig = data[i]
        with T.no_grad():
            data[i] = orig + step
            up = value().item()
            data[i] = orig - step
            down = value().item()
        data[i] = orig
        numeric = (up - down) / (2 * step)
        worst = max(worst, oracles.relative_error(analytic, numeric, floor=1e-3))
    return worst


# ----------------------------------------------------------------------- KL


def random_gaussian_case(rng: np.random.Generator) -> dict:
    eps0_sq = 10 ** rng.uniform(-3, 0)
    x = rng.uniform(0, 1)
    # mu sits within a few prior std of x so the quadratic term matters
    return {"mu": x + rng.normal(0, 2 * math.sqrt(eps0_sq)), "x": x,
            "m2": eps0_sq * 10 ** rng.uniform(-0.7, 0.7), "eps0_sq": eps0_sq}


def random_invgamma_case(rng: np.random.Generator) -> dict:
    return {"alpha": rng.uniform(1.5, 30.0), "beta": 10 ** rng.uniform(-2, 1),
            "alpha0": rng.uniform(1.5, 60.0), "beta0": 10 ** rng.uniform(-2, 1)}


def _kl_gauss_value(fn, c) -> float:
    q = D.GaussianPosterior(np.array([c["mu"]]), np.array([c["m2"]]))
    return fn(q, D.ZPrior(np.array([c["x"]]), c["eps0_sq"])).item()


def _kl_ig_value(fn, c) -> float:
    q = D.InvGammaPosterior(np.array([c["alpha"]]), np.array([c["beta"]]))
    return fn(q, D.SigmaPrior(c["alpha0"], np.array([c["beta0"]]))).item()


def check_kl(rng: np.random.Generator, draws: int = 10, samples: int = 200_000,
             kl_gaussian=D.kl_gaussian, kl_inverse_gamma=D.kl_inverse_gamma) -> list[CheckResult]:
    """Analytic KL against Monte Carlo; error is measured in standard errors."""
    zg, zi = [], []
    for _ in range(draws):
        c = random_gaussian_case(rng)
        est, se = D.kl_mc_gaussian(c["mu"], c["m2"], c["x"], c["eps0_sq"], samples, rng)
        zg.append(abs(_kl_gauss_value(kl_gaussian, c) - est) / se)
        c = random_invgamma_case(rng)
        est, se = D.kl_mc_invgamma(c["alpha"], c["beta"], c["alpha0"], c["beta0"], samples, rng)
        zi.append(abs(_kl_ig_value(kl_inverse_gamma, c) - est) / se)
    return [_result("kl.gaussian_vs_mc", max(zg), KL_SIGMAS, f"{draws} draws, {samples} samples, error in SE"),
            _result("kl.inverse_gamma_vs_mc", max(zi), KL_SIGMAS, f"{draws} draws, {samples} samples, error in SE")]


# --------------------------------------------------------------- degradation


def check_degradation(rng: np.random.Generator, instances: int = 10) -> list[CheckResult]:
    deg, xi_err, ssim_err = 0.0, 0.0, 0.0
    for _ in range(instances):
        h = 6 * int(rng.integers(2, 4))
        z = rng.uniform(0, 1, (h, h + 6))
        support = int(rng.choice([3, 5, 7]))
        if rng.uniform() < 0.5:
            ks = KernelSpec(kind="isotropic", d=rng.uniform(0.3, 2.0), support=support)
        else:
            ks = KernelSpec(kind="anisotropic", theta=rng.uniform(0, math.pi), l1=rng.uniform(0.3, 3),
                            l2=rng.uniform(0.3, 3), support=support)
        s = int(rng.choice([2, 3]))
        spec = DegradationSpec(task="sr", kernel=ks, scale=s)
        fast = apply_degradation(z, spec)
        deg = max(deg, float(np.max(np.abs(fast - oracles.naive_degradation(z, make_kernel(ks), s)))))

        hp = HyperParams(eps0_sq=1e-6, p=int(rng.choice([3, 5, 7])),
                         filter_kind=str(rng.choice(["gaussian", "average"])))
        y = z + 0.1 * rng.standard_normal(z.shape)
        xi = compute_xi(y, z, hp).xi
        ref = np.maximum(oracles.naive_filter((y - z) ** 2, filter_weights(hp.p, hp.filter_kind)), 1e-8)
        xi_err = max(xi_err, float(np.max(np.abs(xi - ref))))

        a = rng.uniform(0, 1, (14, 15))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
        ssim_err = max(ssim_err, abs(ssim(a, b) - oracles.naive_ssim(a, b)))
    out = [_result("degradation.apply_vs_bruteforce", deg, 1e-10),
           _result("priors.xi_vs_bruteforce", xi_err, 1e-10),
           _result("metrics.ssim_vs_bruteforce", ssim_err, 1e-10)]

    probes = [rng.uniform(0, 1, (16, 16)) for _ in range(3)]
    k_d = make_kernel(KernelSpec(kind="isotropic", d=1.2, support=5))
    fast = reestimate_kernel(k_d, 2, probes)
    ref = oracles.normal_equations_kernel(k_d, 2, probes)
    out.append(_result("degradation.reestimate_vs_normal_equations", np.max(np.abs(fast - ref)), 1e-8))
    return out


# -------------------------------------------------------------------- driver


def run_all(seed: int = 0, kl_draws: int = 10, kl_samples: int = 200_000, instances: int = 10,
            kl_gaussian=D.kl_gaussian, kl_inverse_gamma=D.kl_inverse_gamma) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = check_specfun(rng)
    results += check_gradients(rng)
    for task in ("denoise", "sr"):
        results.append(_result(f"grad.neg_elbo_{task}", elbo_param_gradcheck(rng, task), GRAD_TOL))
    results += check_kl(rng, kl_draws, kl_samples, kl_gaussian, kl_inverse_gamma)
    results += check_degradation(rng, instances)
    return results


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'max error':>11}  {'tolerance':>9}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_error:11.3e}  {r.tolerance:9.1e}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        lines.append("failed: " + ", ".join(failed))
    return "\n".join(lines)


def write_report(results: list[CheckResult], path) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["check", "max_error", "tolerance", "passed", "detail"])
        for r in results:
            w.writerow([r.name, repr(r.max_error), repr(r.tolerance), int(r.passed), r.detail])
