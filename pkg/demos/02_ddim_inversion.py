"""
DDIM inversion round trips on analytic priors
=============================================

With a closed-form denoiser the sampler's behavior is exactly checkable:
inverting a clean latent up to noise level t and denoising back must land
on the original. Random noising instead of inversion does not.
"""

import numpy as np

from splatgen.diffusion import (AnalyticDenoiser, DeltaPrior, GaussianPrior,
                                LatentImage, add_noise, ddim_denoise_n,
                                ddim_invert_n, make_schedule)

rng = np.random.default_rng(0)

# ---------------------------------------------------------------------
# A noise schedule is just the cumulative signal-retention table.

schedule = make_schedule(1000, "linear")
print("alpha_bar at t = 0, 250, 500, 999:",
      " ".join(f"{schedule.at(t):.4f}" for t in (0, 250, 500, 999)))

# ---------------------------------------------------------------------
# Delta prior: the posterior mean is the prior center regardless of noise,
# so the round trip is exact to machine precision.

z0 = rng.normal(size=(8, 8, 3))
den = AnalyticDenoiser(DeltaPrior(z0), schedule)

t = 600
zt = ddim_invert_n(LatentImage(z0, 0), t, 25, den, schedule)
back = ddim_denoise_n(zt, 25, den, schedule)
print(f"delta prior, invert to t={t} and back: "
      f"max abs error {np.abs(back.data - z0).max():.2e}")

# ---------------------------------------------------------------------
# Gaussian prior: epsilon-hat now depends on the latent, so discretization
# error creeps in. It shrinks with sampler steps and grows with depth t;
# going all the way to t=600 on this schedule strips ~97% of the signal.

prior = GaussianPrior(np.zeros((8, 8, 3)), 4.0)
den_g = AnalyticDenoiser(prior, schedule)
for n in (1, 5, 25):
    zt = ddim_invert_n(LatentImage(z0, 0), t, n, den_g, schedule)
    back = ddim_denoise_n(zt, n, den_g, schedule)
    print(f"gaussian prior, N={n:2d} steps each way: "
          f"max abs error {np.abs(back.data - z0).max():.2e}")

# ---------------------------------------------------------------------
# Contrast with the ablation: replace inversion by freshly sampled noise
# at the same level. Denoising then lands wherever the prior pulls it,
# not near z0, and the error is an order of magnitude worse than any
# inversion above. This is why the optimizer inverts.

eps = rng.standard_normal(z0.shape)
zt_rand = add_noise(LatentImage(z0, 0), eps, t, schedule)
back_rand = ddim_denoise_n(zt_rand, 25, den_g, schedule)
print(f"random noising instead of inversion: "
      f"max abs deviation from z0 {np.abs(back_rand.data - z0).max():.2e}")
