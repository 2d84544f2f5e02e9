"""Self-verification suites: oracle equivalences and gradient checks.

Each suite compares an optimized code path against an independent reference
(closed forms, sequential loops, finite differences) over randomized inputs
and reports the worst observed error against a fixed tolerance. The CLI's
``check`` command drives these; the acceptance tests call them directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.random import PCG64, Generator

from . import numkit as nk
from .errors import UsageError
from .model import Model, ModelConfig
from .numkit import Tensor
from .ssm_core import (SelectiveSequence, SsmParams, build_kernel, conv_apply,
                       discretize_zoh, recurrent_scan, selective_scan)


@dataclass
class SuiteResult:
    """Outcome of one verification suite: labeled worst errors vs tolerances."""

    name: str
    trials: int
    checks: list[tuple[str, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(err <= tol for _, err, tol in self.checks)

    def lines(self) -> list[str]:
        out = []
        for label, err, tol in self.checks:
            verdict = "PASS" if err <= tol else "FAIL"
            out.append(f"{self.name}: {label} trials={self.trials} "
                       f"max_err={err:.3e} tol={tol:.0e} {verdict}")
        return out


def _rel(got: np.ndarray, want: np.ndarray) -> float:
    return float(np.max(np.abs(got - want)) / max(1.0, float(np.max(np.abs(want)))))


def suite_zoh(seed: int = 0, trials: int = 100) -> SuiteResult:
    """Discretization identities: exact scalar closed form and the A->0 limit."""
    disc = discretize_zoh(SsmParams(np.array([-1.0]), np.array([1.0]),
                                    np.array([1.0]), math.log(2.0)))
    err_exact = max(abs(float(disc.a_bar[0]) - 0.5), abs(float(disc.b_bar[0]) - 0.5))

    rng = Generator(PCG64([seed, 101]))
    err_limit = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 9))
        a = rng.uniform(0.01, 2.0, n) * rng.choice([-1.0, 1.0], n)
        b = rng.normal(size=n)
        b = np.where(np.abs(b) < 0.1, 0.5, b)  # keep the ratio well-defined
        delta = 1e-9 / float(np.max(np.abs(a)))
        disc = discretize_zoh(SsmParams(a, b, np.ones(n), delta))
        err_limit = max(err_limit, float(np.max(np.abs(disc.b_bar / (delta * b) - 1.0))))

    res = SuiteResult(name="zoh", trials=trials)
    res.checks.append(("closed-form A=-1 step=ln2", err_exact, 1e-12))
    res.checks.append(("limit B_bar=step*B", err_limit, 1e-9))
    return res


def suite_kernel(seed: int = 0, trials: int = 100) -> SuiteResult:
    """Convolution kernel vs step-by-step recurrence on random stable systems."""
    rng = Generator(PCG64([seed, 202]))
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 17))
        t_len = int(rng.integers(1, 513))
        params = SsmParams(a=-rng.uniform(0.05, 2.0, n),
                           b=rng.normal(size=n), c=rng.normal(size=n),
                           delta=float(rng.uniform(0.01, 0.5)))
        x = rng.normal(size=t_len)
        y_rec = recurrent_scan(discretize_zoh(params), x, c=params.c)
        y_conv = conv_apply(build_kernel(params, t_len), x)
        worst = max(worst, _rel(y_conv, y_rec))
    res = SuiteResult(name="kernel", trials=trials)
    res.checks.append(("recurrence-vs-kernel", worst, 1e-10))
    return res


def _random_selective(rng: Generator, t_len: int):
    """One random selective configuration plus its input."""
    d = int(rng.integers(1, 4))
    n = int(rng.integers(1, 9))
    shared = bool(rng.integers(0, 2))
    a = -rng.uniform(0.05, 2.0, size=(n,) if shared else (d, n))
    seq = SelectiveSequence(delta=rng.uniform(0.005, 0.2, size=t_len),
                            b=rng.normal(size=(t_len, n)),
                            c=rng.normal(size=(t_len, n)))
    x = rng.normal(size=(t_len, d))
    return a, seq, x


def suite_scan(seed: int = 0, trials: int = 100) -> SuiteResult:
    """Parallel composite scan vs the sequential reference loop."""
    rng = Generator(PCG64([seed, 303]))
    worst = 0.0
    for trial in range(trials):
        # Mostly moderate lengths, with guaranteed large ones in the mix.
        t_len = 4096 if trial % 10 == 0 else int(2 ** rng.uniform(0.0, 12.0))
        a, seq, x = _random_selective(rng, t_len)
        y_par = selective_scan(Tensor(a), seq, Tensor(x)).data
        y_seq = recurrent_scan(seq, x, a=a)
        worst = max(worst, _rel(y_par, y_seq))
    res = SuiteResult(name="scan", trials=trials)
    res.checks.append(("parallel-vs-sequential", worst, 1e-10))
    return res


def _grad_check_scan(seed: int):
    rng = Generator(PCG64([seed, 404]))
    t_len = int(rng.integers(6, 13))
    d, n = 2, 3
    a = Tensor(-rng.uniform(0.2, 1.5, size=(d, n)), trainable=True, name="a")
    delta = Tensor(rng.uniform(0.05, 0.3, size=t_len), trainable=True, name="delta")
    b = Tensor(rng.normal(size=(t_len, n)), trainable=True, name="b")
    c = Tensor(rng.normal(size=(t_len, n)), trainable=True, name="c")
    x = Tensor(rng.normal(size=(t_len, d)), trainable=True, name="x")
    w = rng.normal(size=(t_len, d))

    def f(*params):
        y = selective_scan(a, SelectiveSequence(delta=delta, b=b, c=c), x)
        return nk.tsum(y * Tensor(w))

    return nk.grad_check(f, [a, delta, b, c, x])


def _grad_check_model(seed: int):
    rng = Generator(PCG64([seed, 505]))
    cfg = ModelConfig(d_in=5, n_phases=4, d_model=16, n_state=4, n_layers=1,
                      drop_path_rate=0.0)
    model = Model(cfg, rng)
    # Two conditioning choices keep every coordinate inside the validity
    # window of a single finite-difference epsilon. First, move the step-size
    # bias to a well-scaled operating point: at the tiny default init the
    # gradients through it sit near float64 FD noise, so the comparison would
    # measure roundoff rather than correctness. Second, scalarize through a
    # dense random projection of both heads instead of the training loss:
    # a near-saturated softmax cancels some weight gradients down to ~1e-8,
    # where no epsilon resolves them, while the projection keeps gradient
    # magnitudes well above the noise floor yet still flows through every
    # parameter. The composed loss gradients are FD-verified separately at a
    # smaller width where these pathologies do not arise.
    for layer in model.layers:
        for direction in (layer.fwd, layer.bwd):
            direction.b_delta.data[:] = np.log(np.expm1(0.1))
    t_len = 12
    x = rng.normal(size=(t_len, cfg.d_in))
    w = rng.normal(size=(t_len, cfg.n_phases))
    v = rng.normal(size=(t_len,))

    def f(*params):
        out = model.run(x)
        return (nk.tsum(out.recognition_logits * Tensor(w))
                + nk.tsum(out.anticipation * Tensor(v)))

    return nk.grad_check(f, model.parameters(), epsilon=1e-4)


def suite_grad(seed: int = 0, trials: int = 20) -> SuiteResult:
    """Finite-difference comparison: isolated scan and the full toy model."""
    err_scan = 0.0
    err_model = 0.0
    for i in range(trials):
        err_scan = max(err_scan, _grad_check_scan(seed + i).max_rel_err)
        err_model = max(err_model, _grad_check_model(seed + i).max_rel_err)
    res = SuiteResult(name="grad", trials=trials)
    res.checks.append(("selective-scan", err_scan, 1e-4))
    res.checks.append(("toy-model", err_model, 1e-4))
    return res


SUITES = {
    "zoh": suite_zoh,
    "kernel": suite_kernel,
    "scan": suite_scan,
    "grad": suite_grad,
}

_DEFAULT_TRIALS = {"zoh": 100, "kernel": 100, "scan": 100, "grad": 20}


def run_suites(names, seed: int = 0, trials: int | None = None) -> list[SuiteResult]:
    """Run the named suites ('all' for every one) in a fixed order."""
    if names == "all" or names == ["all"]:
        names = list(SUITES)
    if isinstance(names, str):
        names = [names]
    results = []
    for name in names:
        if name not in SUITES:
            raise UsageError(f"unknown suite {name!r}; choose from "
                             f"{', '.join([*SUITES, 'all'])}")
        results.append(SUITES[name](seed=seed, trials=trials or _DEFAULT_TRIALS[name]))
    return results
