"""
Oracle suite behind ``vsmlab gradcheck``.

Every check compares an implementation against something computed a
different way: central finite differences, an algebraic expansion, a closed
form or a dense grid search. Each returns a CheckResult; the CLI turns any
failure into an AcceptanceError.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from ..config import defaults
from ..errors import AcceptanceError
from ..logging import get_logger
from ..utils import make_generator
from .diffcore import DTYPE, Activation, MlpSpec, ParamVector, mlp_forward, mlp_jacobian, mlp_vjp
from .evalsuite import latent_mmd, marginal_fd_score, nll_importance
from .gaussmodel import (
    GaussianVae,
    LinearGaussToy,
    data_score_constant,
    encode,
    encoder_scores,
    exact_posterior_toy,
    gaussian_fd_closed,
    likelihood_score_x,
    log_likelihood,
    log_q,
    sample_latents,
    toy_as_vae,
)
from .inference import (
    CLOSED_FORM_GRADS,
    GradientFamily,
    gaussian_biased_fisher_grad,
    gaussian_kl_grad,
    laplace_biased_location_grad,
    univariate_gradients_mc,
)
from .objectives import (
    PER_DATUM,
    ObjectiveKind,
    autoenc_losses,
    elbo_estimate,
    elbo_reference,
    estimate_objective,
    gamma_optimal,
    joint_fd_per_datum,
    lk_per_datum,
    m1_tilde_per_datum,
    m2_per_datum,
    m3_per_datum,
    posterior_fd_estimate,
    posterior_fd_per_datum,
)
from .posterior_toys import ToyLikelihood, ToyPosteriorSpec
from .recovery import RecoveryMethod, jfd_surface, recover_theta
from .trainer import bilevel_theta_grad

logger = get_logger(__name__)

# Sampled toy oracles pass within this many standard errors
TOY_ORACLE_SE = 4.0


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# ============================================================================
# 1. Helpers
# ============================================================================

def relative_error(actual, expected) -> float:
    """||actual - expected|| / max(||expected||, 1e-12)."""
    a = torch.as_tensor(actual, dtype=DTYPE).reshape(-1)
    b = torch.as_tensor(expected, dtype=DTYPE).reshape(-1)
    return float(torch.linalg.norm(a - b) / max(float(torch.linalg.norm(b)), 1e-12))


def central_difference(fn: Callable[[torch.Tensor], float], point: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Gradient of a scalar function by central differences, one coordinate at a time."""
    point = point.detach().clone().reshape(-1)
    grad = torch.zeros_like(point)
    for i in range(point.numel()):
        step = torch.zeros_like(point)
        step[i] = h
        grad[i] = (fn(point + step) - fn(point - step)) / (2.0 * h)
    return grad


def random_spec(generator: torch.Generator) -> MlpSpec:
    """Small smooth network with 1-2 hidden layers."""
    def draw(low: int, high: int) -> int:
        return int(torch.randint(low, high + 1, (1,), generator=generator))

    widths = [draw(1, 3)] + [draw(2, 5) for _ in range(draw(1, 2))] + [draw(1, 3)]
    activation = Activation.TANH if draw(0, 1) else Activation.SOFTPLUS
    return MlpSpec(tuple(widths), activation)


def random_params(spec: MlpSpec, generator: torch.Generator) -> ParamVector:
    params = ParamVector.initialize(spec, generator)
    noise = 0.3 * torch.randn(spec.n_params, generator=generator, dtype=DTYPE)
    return params.with_values(params.values + noise)


def random_model(generator: torch.Generator) -> GaussianVae:
    d_x = int(torch.randint(1, 4, (1,), generator=generator))
    d_z = int(torch.randint(1, 3, (1,), generator=generator))
    model = GaussianVae.initialize(d_x, d_z, (4,), Activation.SOFTPLUS, generator)
    log_gamma = float(torch.empty(1, dtype=DTYPE).uniform_(-1.0, 1.0, generator=generator))
    return GaussianVae(
        random_params(model.decoder.spec, generator),
        torch.tensor(log_gamma, dtype=DTYPE),
        random_params(model.encoder.spec, generator),
    )


def _timed(name: str, body: Callable[[], tuple[bool, str]]) -> CheckResult:
    started = time.perf_counter()
    try:
        passed, detail = body()
    except Exception as e:  # crash counts as a failure
        passed, detail = False, f"{type(e).__name__}: {e}"
    result = CheckResult(name, passed, detail, time.perf_counter() - started)
    logger.debug(f"{name}: {'pass' if passed else 'FAIL'} ({detail})")
    return result


# ============================================================================
# 2. Derivative Checks
# ============================================================================

def check_mlp_vjp(n_networks: int, rel_tol: float, seed: int) -> CheckResult:
    def body():
        generator = make_generator(seed)
        worst = 0.0
        for _ in range(n_networks):
            spec = random_spec(generator)
            params = random_params(spec, generator)
            x = torch.randn(spec.input_dim, generator=generator, dtype=DTYPE)
            c = torch.randn(spec.output_dim, generator=generator, dtype=DTYPE)
            grad_params, grad_input = mlp_vjp(spec, params, x, c)
            fd_params = central_difference(
                lambda v: float(c @ mlp_forward(spec, params.with_values(v), x)), params.values
            )
            fd_input = central_difference(lambda inp: float(c @ mlp_forward(spec, params, inp)), x)
            worst = max(worst, relative_error(grad_params.values, fd_params), relative_error(grad_input, fd_input))
        return worst < rel_tol, f"max rel err {worst:.2e} over {n_networks} nets"

    return _timed("mlp_vjp vs finite differences", body)


def check_mlp_jvp(n_networks: int, rel_tol: float, seed: int) -> CheckResult:
    def body():
        generator = make_generator(seed + 1)
        worst = 0.0
        for _ in range(n_networks):
            spec = random_spec(generator)
            params = random_params(spec, generator)
            x = torch.randn(spec.input_dim, generator=generator, dtype=DTYPE)
            J = mlp_jacobian(spec, params, x)
            h = 1e-5
            columns = []
            for j in range(spec.input_dim):
                e = torch.zeros(spec.input_dim, dtype=DTYPE)
                e[j] = h
                columns.append((mlp_forward(spec, params, x + e) - mlp_forward(spec, params, x - e)) / (2 * h))
            worst = max(worst, relative_error(J, torch.stack(columns, dim=1)))
        return worst < rel_tol, f"max rel err {worst:.2e} over {n_networks} nets"

    return _timed("mlp_jvp Jacobian vs finite differences", body)


def check_objective_gradients(n_models: int, rel_tol: float, seed: int) -> list[CheckResult]:
    results = []
    for kind in ObjectiveKind:
        def body(kind=kind):
            generator = make_generator(seed + 2)
            worst = 0.0
            for _ in range(n_models):
                model = random_model(generator)
                x = torch.randn((3, model.d_x), generator=generator, dtype=DTYPE)
                latents = sample_latents(model, x, 4, generator)
                estimate = estimate_objective(kind, model, x, latents)
                per_datum = PER_DATUM[kind]

                def value(theta: torch.Tensor) -> float:
                    return float(per_datum(model.with_theta(theta), x, latents.z).mean().detach())

                fd = central_difference(value, model.theta_values)
                worst = max(worst, relative_error(estimate.grad_theta, fd))
            return worst < rel_tol, f"max rel err {worst:.2e} over {n_models} models"

        results.append(_timed(f"{kind.value} theta-gradient vs finite differences", body))
    return results


def check_model_scores(n_models: int, rel_tol: float, seed: int) -> CheckResult:
    """likelihood_score_x and both encoder scores against differences of the log-densities."""
    def body():
        generator = make_generator(seed + 5)
        worst = 0.0
        for _ in range(n_models):
            model = random_model(generator)
            x = torch.randn(model.d_x, generator=generator, dtype=DTYPE)
            z = torch.randn(model.d_z, generator=generator, dtype=DTYPE)
            with torch.no_grad():
                mu, log_sigma = encode(model, x)
                fd_lik = central_difference(lambda v: float(log_likelihood(model, v, z)), x)
                fd_z = central_difference(lambda v: float(log_q(mu, log_sigma, v)), z)
                fd_x = central_difference(lambda v: float(log_q(*encode(model, v), z)), x)
            score_z, score_x = encoder_scores(model, x, z.unsqueeze(0))
            worst = max(
                worst,
                relative_error(likelihood_score_x(model, x, z), fd_lik),
                relative_error(score_z[0], fd_z),
                relative_error(score_x[0], fd_x),
            )
        return worst < rel_tol, f"max rel err {worst:.2e} over {n_models} models"

    return _timed("likelihood and encoder scores vs finite differences", body)


def check_bilevel(rel_tol: float, seed: int) -> CheckResult:
    def body():
        model = toy_as_vae(exact_posterior_toy(1.2, gamma=0.5, alpha=0.6))
        x = torch.tensor([[0.7], [-1.1], [1.9]], dtype=DTYPE)
        worst = 0.0
        for objective in (ObjectiveKind.M2, ObjectiveKind.M3):
            def run(theta: torch.Tensor):
                return bilevel_theta_grad(
                    model.with_theta(theta), x, 1, 0.05, objective, 4, make_generator(seed + 3)
                )

            grad = run(model.theta_values).grad_theta
            fd = central_difference(lambda t: run(t).value, model.theta_values)
            worst = max(worst, relative_error(grad, fd))
        return worst < max(rel_tol, 1e-4), f"max rel err {worst:.2e} (K=1, m2 and m3)"

    return _timed("bi-level theta-gradient vs finite differences", body)


# ============================================================================
# 3. Identities and Closed Forms
# ============================================================================

def check_autoencoding_identities(n_cases: int, seed: int) -> list[CheckResult]:
    def cases():
        generator = make_generator(seed + 4)
        for _ in range(n_cases):
            model = random_model(generator)
            x = torch.randn((5, model.d_x), generator=generator, dtype=DTYPE)
            yield model, x, sample_latents(model, x, 8, generator)

    def m1_body():
        worst = 0.0
        for model, x, latents in cases():
            with torch.no_grad():
                lhs = m1_tilde_per_datum(model, x, latents.z)
                g = float(model.gamma)
                rhs = lk_per_datum(model, x, latents.z) / (2 * g * g) - model.d_x / g
            worst = max(worst, relative_error(lhs, rhs))
        return worst < 1e-8, f"max rel err {worst:.2e} over {n_cases} cases"

    def m2_body():
        worst = 0.0
        for model, x, latents in cases():
            with torch.no_grad():
                value = float(m2_per_datum(model, x, latents.z).mean())
            losses = autoenc_losses(model, x, latents)
            g = float(model.gamma)
            expansion = losses.l_2_exact / (2 * g * g) - model.d_x / g
            worst = max(worst, relative_error(value, expansion))
        return worst < 1e-8, f"max rel err {worst:.2e} over {n_cases} cases"

    def m3_body():
        worst = 0.0
        for model, x, latents in cases():
            value = float(m3_per_datum(model, x, latents.z).mean().detach())
            losses = autoenc_losses(model, x, latents)
            g = float(model.gamma)
            expansion = losses.recon / (2 * g * g) - (losses.cross + model.d_x) / g
            worst = max(worst, relative_error(value, expansion))
        return worst < 1e-8, f"max rel err {worst:.2e} over {n_cases} cases"

    def elbo_body():
        worst = 0.0
        for model, x, latents in cases():
            worst = max(worst, relative_error(elbo_estimate(model, x, latents).value, elbo_reference(model, x, latents)))
        return worst < 1e-10, f"max rel err {worst:.2e} over {n_cases} cases"

    return [
        _timed("M1 equals L_K / (2 gamma^2) - d_x / gamma", m1_body),
        _timed("M2 equals its autoencoding expansion", m2_body),
        _timed("M3 equals its autoencoding expansion", m3_body),
        _timed("ELBO matches per-sample reference", elbo_body),
    ]


def check_gamma_optimal(seed: int) -> CheckResult:
    def body():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(5):
            a, b = rng.uniform(0.1, 10.0, size=2)
            gamma_star, minimum = gamma_optimal(a, b)
            grid = np.geomspace(gamma_star / 100.0, gamma_star * 100.0, 1_000_000)
            values = a / (2 * grid**2) - b / grid
            k = int(np.argmin(values))
            worst = max(worst, abs(grid[k] - gamma_star) / gamma_star, abs(values[k] - minimum) / abs(minimum))
        return worst < 1e-4, f"max rel err {worst:.2e} vs 1e6-point grid"

    return _timed("gamma_optimal vs grid minimization", body)


def check_univariate_gradients(seed: int) -> list[CheckResult]:
    m1, s1, m2, s2 = 0.3, 0.8, -0.2, 1.3

    def proportionality():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(100):
            a1, b2 = rng.normal(size=2)
            t1, t2 = rng.uniform(0.3, 2.0, size=2)
            kl = gaussian_kl_grad(a1, t1, b2, t2)
            biased = gaussian_biased_fisher_grad(a1, t1, b2, t2)
            worst = max(
                worst,
                relative_error(biased[0], 2.0 / t1**2 * kl[0]),
                relative_error(biased[1], 4.0 / t1**2 * kl[1]),
            )
        return worst < 1e-12, f"max rel err {worst:.2e}"

    results = [_timed("biased FD gradient is 2/s^2 and 4/s^2 times the KL gradient", proportionality)]
    for offset, family in enumerate(GradientFamily):
        def body(family=family, offset=offset):
            mean, se = univariate_gradients_mc(
                family, m1, s1, m2, s2, 100_000, make_generator(seed + 10 + offset)
            )
            closed = np.array(CLOSED_FORM_GRADS[family](m1, s1, m2, s2))
            z = np.abs(mean - closed) / se
            return bool(np.all(z < 3.0)), f"|mc - closed| / se = {z[0]:.2f}, {z[1]:.2f}"

        results.append(_timed(f"{family.value} MC gradient vs closed form", body))
    return results


def check_laplace(seed: int) -> CheckResult:
    def body():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(1000):
            m, s = rng.normal(), rng.uniform(0.2, 2.0)
            samples = m + rng.laplace(0.0, s, size=16)
            worst = max(worst, abs(laplace_biased_location_grad(m, s, samples)))
        return worst == 0.0, f"max |grad| {worst:.1e} over 1000 sample sets"

    return _timed("biased FD Laplace location gradient is exactly zero", body)


def check_toy_origin() -> CheckResult:
    def body():
        score = ToyPosteriorSpec.default(ToyLikelihood.P_I).score(torch.zeros(2, dtype=DTYPE))
        return bool(torch.all(score == 0)), f"score at origin {score.tolist()}"

    return _timed("p_I posterior score vanishes at the origin", body)


def check_toy_oracles(seed: int, n_samples: int = 100_000) -> list[CheckResult]:
    """
    Sampled metrics and objectives on the linear toy against their Gaussian closed forms.

    Each passes within TOY_ORACLE_SE standard errors; the errors of the
    importance-sampled metrics come from 10 folds, so the margin is wider than
    a plain 3 SE.
    """
    theta, gamma = 1.2, 0.5
    marginal = theta**2 + gamma
    x_grid = torch.linspace(-2.0, 2.0, 10, dtype=DTYPE).unsqueeze(-1)
    exact = toy_as_vae(exact_posterior_toy(theta, gamma=gamma))
    inexact_toy = LinearGaussToy(theta=theta, gamma=gamma, phi=0.4, alpha=1.5)

    def draw_marginal(n: int, offset: int) -> torch.Tensor:
        return math.sqrt(marginal) * torch.randn((n, 1), generator=make_generator(seed + offset), dtype=DTYPE)

    def nll_body():
        estimate = nll_importance(toy_as_vae(inexact_toy), x_grid, n_samples, make_generator(seed + 20))
        closed = float(np.mean(0.5 * math.log(2 * math.pi * marginal) + x_grid[:, 0].numpy() ** 2 / (2 * marginal)))
        z = abs(estimate.value - closed) / estimate.se
        return z < TOY_ORACLE_SE, f"nll {estimate.value:.5f} vs {closed:.5f} ({z:.2f} se)"

    def marginal_fd_body():
        estimate = marginal_fd_score(exact, x_grid, n_samples, make_generator(seed + 21))
        closed = float((x_grid[:, 0] ** 2 / (2 * marginal**2) - 1 / marginal).mean())
        z = abs(estimate.value - closed) / estimate.se
        return z < TOY_ORACLE_SE, f"fd {estimate.value:.5f} vs {closed:.5f} ({z:.2f} se)"

    def mmd_body():
        estimate = latent_mmd(exact, draw_marginal(2000, 22), make_generator(seed + 23))
        z = abs(estimate.value) / estimate.se
        return z < TOY_ORACLE_SE, f"mmd {estimate.value:.2e} ({z:.2f} se)"

    def posterior_fd_body():
        x = draw_marginal(n_samples, 24)
        zero = posterior_fd_estimate(exact, x[:100], sample_latents(exact, x[:100], 4, make_generator(seed + 25)))
        model = toy_as_vae(inexact_toy)
        latents = sample_latents(model, x, 1, make_generator(seed + 26))
        terms = posterior_fd_per_datum(model, x, latents.z).detach()
        sd_q = math.sqrt(inexact_toy.q_variance)
        sd_post = math.sqrt(inexact_toy.v_star)
        n = x.shape[0]
        closed = 0.5 * gaussian_fd_closed(
            inexact_toy.phi * x[:, 0].numpy(), np.full(n, sd_q),
            inexact_toy.exact_slope * x[:, 0].numpy(), np.full(n, sd_post),
        ) / n
        z = abs(float(terms.mean()) - closed) / (float(terms.std()) / math.sqrt(n))
        return abs(zero) < 1e-12 and z < TOY_ORACLE_SE, f"exact {zero:.1e}, inexact {z:.2f} se"

    def joint_fd_body():
        theta_star = 2.0
        toy = LinearGaussToy(theta=theta_star, gamma=gamma, phi=0.4, alpha=defaults.TOY_ALPHA)
        v_pi = theta_star**2 + gamma
        x = math.sqrt(v_pi) * torch.randn((n_samples, 1), generator=make_generator(seed + 27), dtype=DTYPE)
        model = toy_as_vae(toy)
        latents = sample_latents(model, x, 1, make_generator(seed + 28))
        terms = joint_fd_per_datum(model, x, latents.z).detach() + data_score_constant(v_pi)
        closed = float(jfd_surface(toy.theta, toy.phi, theta_star, toy.alpha, gamma))
        z = abs(float(terms.mean()) - closed) / (float(terms.std()) / math.sqrt(n_samples))
        return z < TOY_ORACLE_SE, f"jfd {float(terms.mean()):.4f} vs {closed:.4f} ({z:.2f} se)"

    return [
        _timed("IS-NLL vs closed-form toy marginal", nll_body),
        _timed("marginal FD score vs closed form", marginal_fd_body),
        _timed("latent MMD null case", mmd_body),
        _timed("posterior FD vs closed form", posterior_fd_body),
        _timed("joint FD vs closed-form surface", joint_fd_body),
    ]


def check_recovery() -> list[CheckResult]:
    def exact_family():
        worst = 0.0
        for theta_star in defaults.RECOVER_THETA_GRID:
            for method in RecoveryMethod:
                row = recover_theta(theta_star, method, alpha=1.0, gamma=defaults.TOY_GAMMA, n_starts=2)
                worst = max(worst, abs(row.bias))
        return worst < 1e-3, f"max |bias| {worst:.2e}"

    def misspecified():
        jkld = recover_theta(2.0, RecoveryMethod.JKLD, defaults.TOY_ALPHA, defaults.TOY_GAMMA)
        jfd = recover_theta(2.0, RecoveryMethod.JFD, defaults.TOY_ALPHA, defaults.TOY_GAMMA)
        passed = jfd.converged and abs(jfd.bias) >= 5.0 * abs(jkld.bias)
        return passed, f"jkld bias {jkld.bias:.2e}, jfd bias {jfd.bias:.4f}"

    return [
        _timed("alpha=1 recovers theta* for both joint divergences", exact_family),
        _timed("alpha=0.6 joint FD bias dominates joint KL bias", misspecified),
    ]


# ============================================================================
# 4. Suite
# ============================================================================

def run_gradchecks(n_networks: int = 20, rel_tol: float = 1e-5, seed: int = 0) -> list[CheckResult]:
    """Run every oracle check in a fixed order."""
    results = [
        check_mlp_vjp(n_networks, rel_tol, seed),
        check_mlp_jvp(n_networks, rel_tol, seed),
    ]
    results += check_objective_gradients(n_networks, rel_tol, seed)
    results.append(check_model_scores(n_networks, rel_tol, seed))
    results.append(check_bilevel(rel_tol, seed))
    results += check_autoencoding_identities(100, seed)
    results.append(check_gamma_optimal(seed))
    results += check_univariate_gradients(seed)
    results.append(check_laplace(seed))
    results.append(check_toy_origin())
    results += check_toy_oracles(seed)
    results += check_recovery()
    return results


def require_all(results: list[CheckResult]) -> None:
    """Raise AcceptanceError naming every failed check."""
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise AcceptanceError(failed)
