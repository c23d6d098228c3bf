"""
Hybrid forward process and closed-form posteriors.

Positions diffuse with Gaussian noise, atom types with a categorical kernel that mixes
toward the uniform distribution. Every schedule-level operation has an ᾱ-level helper
underneath it so that limits such as ᾱ = 1 can be exercised directly.
"""
import math

import numpy as np
from scipy.special import rel_entr

from pocketdiff.api.dependencies.custom_exception import (
    InfiniteDivergenceError,
    InvalidDistributionError,
)
from pocketdiff.core import autodiff as ad
from pocketdiff.core.autodiff import Tensor
from pocketdiff.schemas.molecule import NoisyState, check_one_hot, one_hot
from pocketdiff.schemas.schedule import NoiseSchedule
from pocketdiff.utils.logger import get_logger


logger = get_logger(__name__)

# open-interval guard for Gumbel noise
_UNIFORM_EPS = 1e-12


class GaussianPosterior:
    """q(x_{t-1} | x_t, x_0) = N(mean, variance · I)."""

    __slots__ = ("mean", "variance")

    def __init__(self, mean: np.ndarray, variance: float):
        self.mean = mean
        self.variance = variance


class CategoricalPosterior:
    """q(v_{t-1} | v_t, v_0) = Categorical(probs), one row per atom."""

    __slots__ = ("probs",)

    def __init__(self, probs: np.ndarray):
        self.probs = probs


class DiffusionService:

    # forward process, ᾱ-level

    def forward_positions(self, x0: np.ndarray, alpha_bar: float, rng: np.random.Generator) -> np.ndarray:
        """x_t = √ᾱ x_0 + √(1-ᾱ) ε."""
        eps = rng.standard_normal(np.shape(x0))
        return math.sqrt(alpha_bar) * np.asarray(x0) + math.sqrt(1.0 - alpha_bar) * eps

    def marginal_type_probs(self, v0: np.ndarray, alpha_bar: float, K: int) -> np.ndarray:
        """ᾱ v_0 + (1-ᾱ)/K, row-wise."""
        return alpha_bar * np.asarray(v0, dtype=np.float64) + (1.0 - alpha_bar) / K

    def sample_categorical(self, probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One-hot draw per row via Gumbel-max over log-probabilities."""
        probs = np.asarray(probs, dtype=np.float64)
        u = np.clip(rng.random(probs.shape), _UNIFORM_EPS, 1.0 - _UNIFORM_EPS)
        gumbel = -np.log(-np.log(u))
        with np.errstate(divide="ignore"):
            scores = np.log(probs) + gumbel
        return one_hot(np.argmax(scores, axis=1), probs.shape[1])

    def forward_types(self, v0: np.ndarray, alpha_bar: float, K: int, rng: np.random.Generator) -> np.ndarray:
        return self.sample_categorical(self.marginal_type_probs(v0, alpha_bar, K), rng)

    # single-step transitions

    def forward_step_positions(
        self, x_prev: np.ndarray, t: int, schedule: NoiseSchedule, rng: np.random.Generator
    ) -> np.ndarray:
        """One q(x_t | x_{t-1}) draw: √(1-β_t) x_{t-1} + √β_t ε."""
        t = schedule.check_t(t)
        beta = schedule.beta(t)
        eps = rng.standard_normal(np.shape(x_prev))
        return math.sqrt(1.0 - beta) * np.asarray(x_prev) + math.sqrt(beta) * eps

    def forward_step_types_probs(self, probs_prev: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
        """Push a type distribution through one (1-β_t) v + β_t/K kernel."""
        t = schedule.check_t(t)
        beta = schedule.beta(t)
        K = np.shape(probs_prev)[1]
        return (1.0 - beta) * np.asarray(probs_prev) + beta / K

    # forward process, schedule-level

    def perturb_positions(
        self, x0: np.ndarray, t: int, schedule: NoiseSchedule, rng: np.random.Generator
    ) -> np.ndarray:
        t = schedule.check_t(t)
        return self.forward_positions(x0, schedule.alpha_bar(t), rng)

    def perturb_types(
        self, v0: np.ndarray, t: int, schedule: NoiseSchedule, K: int, rng: np.random.Generator
    ) -> np.ndarray:
        t = schedule.check_t(t)
        check_one_hot(np.asarray(v0), "v_0")
        return self.forward_types(v0, schedule.alpha_bar(t), K, rng)

    def type_marginal(self, v0: np.ndarray, t: int, schedule: NoiseSchedule, K: int) -> np.ndarray:
        t = schedule.check_t(t, lowest=0)
        return self.marginal_type_probs(v0, schedule.alpha_bar(t), K)

    def perturb(
        self, x0: np.ndarray, v0: np.ndarray, t: int, schedule: NoiseSchedule, rng: np.random.Generator
    ) -> NoisyState:
        """Both halves of the forward process; positions are drawn before types."""
        x_t = self.perturb_positions(x0, t, schedule, rng)
        v_t = self.perturb_types(v0, t, schedule, np.shape(v0)[1], rng)
        return NoisyState(x_t=x_t, v_t=v_t, t=t)

    # posteriors

    def gaussian_posterior(
        self, x_t: np.ndarray, x0: np.ndarray, t: int, schedule: NoiseSchedule
    ) -> GaussianPosterior:
        """
        Mean and variance of q(x_{t-1} | x_t, x_0).

        At t = 1 the posterior collapses onto x_0 (β̃_1 = 0) and x_0 is returned as is.
        """
        t = schedule.check_t(t)
        x0 = np.asarray(x0, dtype=np.float64)
        if t == 1:
            return GaussianPosterior(mean=x0.copy(), variance=0.0)
        beta = schedule.beta(t)
        alpha = schedule.alpha(t)
        ab = schedule.alpha_bar(t)
        ab_prev = schedule.alpha_bar(t - 1)
        coef_x0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
        coef_xt = math.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
        mean = coef_x0 * x0 + coef_xt * np.asarray(x_t, dtype=np.float64)
        variance = (1.0 - ab_prev) / (1.0 - ab) * beta
        return GaussianPosterior(mean=mean, variance=variance)

    def _posterior_factors(self, v_t: np.ndarray, t: int, schedule: NoiseSchedule):
        alpha = schedule.alpha(t)
        ab_prev = schedule.alpha_bar(t - 1)
        K = np.shape(v_t)[1]
        likelihood = alpha * np.asarray(v_t, dtype=np.float64) + (1.0 - alpha) / K
        return likelihood, ab_prev, K

    def categorical_posterior(
        self, v_t: np.ndarray, v0: np.ndarray, t: int, schedule: NoiseSchedule
    ) -> CategoricalPosterior:
        """
        c̃_t = c* / Σ_k c*_k with c* = [α_t v_t + (1-α_t)/K] ⊙ [ᾱ_{t-1} v_0 + (1-ᾱ_{t-1})/K].

        ``v0`` may be a soft probability row (a network prediction).
        """
        t = schedule.check_t(t)
        v0 = np.asarray(v0, dtype=np.float64)
        if np.any(v0 < 0):
            raise InvalidDistributionError("v_0 rows must be non-negative")
        likelihood, ab_prev, K = self._posterior_factors(v_t, t, schedule)
        c_star = likelihood * (ab_prev * v0 + (1.0 - ab_prev) / K)
        total = c_star.sum(axis=1, keepdims=True)
        if np.any(total <= 0):
            raise InvalidDistributionError(
                "categorical posterior has a zero-sum row",
                errors={"rows": np.flatnonzero(total[:, 0] <= 0).tolist(), "t": t},
            )
        return CategoricalPosterior(probs=c_star / total)

    def categorical_posterior_tensor(
        self, v_t: np.ndarray, v0_hat: Tensor, t: int, schedule: NoiseSchedule
    ) -> Tensor:
        """Taped c̃_t(v_t, v̂_0) so the KL term can be differentiated through v̂_0."""
        t = schedule.check_t(t)
        likelihood, ab_prev, K = self._posterior_factors(v_t, t, schedule)
        prior = ad.add(ad.scalar_mul(v0_hat, ab_prev), (1.0 - ab_prev) / K)
        c_star = ad.mul(prior, likelihood)
        return ad.div(c_star, ad.sum_(c_star, axis=1, keepdims=True))

    # divergences

    def kl_categorical(self, p: np.ndarray, q: np.ndarray) -> float:
        """Row-wise KL(p || q), averaged over rows; 0·log(0/q) counts as 0."""
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        if p.shape != q.shape:
            raise InvalidDistributionError(f"shape mismatch {p.shape} vs {q.shape}")
        if np.any((p > 0) & (q <= 0)):
            raise InfiniteDivergenceError("q vanishes where p has mass")
        return float(np.mean(np.sum(rel_entr(p, q), axis=1)))

    def kl_categorical_tensor(self, p: np.ndarray, q: Tensor) -> Tensor:
        """Taped KL(p || q) with constant p, averaged over rows."""
        p = np.asarray(p, dtype=np.float64)
        if np.any((p > 0) & (q.data <= 0)):
            raise InfiniteDivergenceError("q vanishes where p has mass")
        with np.errstate(divide="ignore", invalid="ignore"):
            log_p = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
        # rows where p is 0 contribute 0 regardless of q; the floor keeps log finite there
        safe_q = ad.add(q, np.finfo(np.float64).tiny)
        cross = ad.mul(ad.log(safe_q), p)
        per_row = ad.sub(np.sum(p * log_p, axis=1), ad.sum_(cross, axis=1))
        return ad.mean(per_row)


diffusion_service = DiffusionService()
