# %% [markdown]
# # Running an ODE block backward
#
# Recovering the input of a block from its output by integrating the field
# backward looks free. For dissipative dynamics it is not: the reverse flow
# amplifies whatever the forward flow damped, rounding error included.

# %%
import numpy as np

from anode.diagnostics import EPS32, matrix_relu_reversibility, rho
from anode.dynamics import ScalarLinear, ScalarRelu

# %% [markdown]
# A scalar decay `dz/dt = -100 z`. Forward then backward Euler multiplies `z0`
# by `(1 - (100 dt)^2)^N`, which only approaches 1 for very small steps.

# %%
for n in (200, 2_000, 20_000, 200_000):
    print(f"lambda=-100  N={n:>7}  rho={rho(ScalarLinear(-100.0), None, np.array([1.0]), 1.0, 'euler', n):.3e}")

# %% [markdown]
# A hundred times stiffer and nothing survives the round trip: the forward
# state underflows or the backward sweep overflows.

# %%
with np.errstate(all="ignore"):
    for n in (1_000, 10_000, 100_000):
        print(f"lambda=-1e4  N={n:>7}  rho={rho(ScalarLinear(-1e4), None, np.array([1.0]), 1.0, 'euler', n)}")

# %% [markdown]
# The kink of a ReLU field makes the backward pass ill-conditioned too.
# Dormand-Prince on a uniform grid, `dz/dt = -max(0, 10 z)`:

# %%
f = ScalarRelu(-1.0, 10.0)
for n in (8, 11, 32, 100):
    r = rho(f, None, np.array([1.0]), 1.0, "rk45_dormand_prince", n)
    print(f"N={n:>4}  rho={r:.2e}  {'<= eps32' if r <= EPS32 else ''}")

# %% [markdown]
# Random Gaussian weights have spectral norm near `2 sqrt(n)`; rescaling to
# unit norm is what makes the reverse pass usable.

# %%
print("n=100 unnormalized:", matrix_relu_reversibility(100, False, nsteps=1000))
print("n=100 normalized:  ", matrix_relu_reversibility(100, True, nsteps=1000))
