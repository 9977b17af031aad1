# %% [markdown]
# # Three ways to get the gradient of one ODE block
#
# * `dto`: reverse mode through the stored RK stages; exact for the computed map.
# * `otd_stored`: the continuous adjoint equation stepped on the stored grid.
# * `otd_reverse`: the adjoint equation solved together with a backward
#   reconstruction of `z`; no storage, but inherits the reconstruction error.

# %%
import numpy as np

from anode.adjoint_grad import block_gradient, dto_gradient, otd_gradient_stored
from anode.core_math import Rng, gaussian_tensor, relative_error
from anode.diagnostics import gradient_check, otd_dto_scan
from anode.dynamics import Composite, Dense, Quadratic

rng = Rng(7)
field = Composite([Dense(gaussian_tensor(rng, (4, 4), 0.0, 0.8), gaussian_tensor(rng, (4,)), "relu"),
                   Dense(gaussian_tensor(rng, (4, 4), 0.0, 0.8), None, "identity")])
z0, gbar = gaussian_tensor(rng, (4,)), gaussian_tensor(rng, (4,))

# %% [markdown]
# Against central differences of `J = gbar . z(T)`. This field is mild, the
# backward reconstruction is accurate, and the two continuous-adjoint variants
# land on nearly the same (inconsistent) gradient.

# %%
res = gradient_check(field, None, z0, 1.0, "rk4", 8, gbar)
for key in ("dto", "otd_stored", "otd_reverse"):
    print(f"{key:<12} relative error {res[key]:.2e}")

# %% [markdown]
# The continuous adjoint is consistent with the discrete map only up to the
# step size: halving `dt` halves the gap.

# %%
scan = otd_dto_scan(field, None, z0, 1.0, [2.0 ** -k for k in range(7)], "euler", gbar)
for dt, d in zip(scan.dts, scan.discrepancies):
    print(f"dt={dt:<10g} gap={d:.3e}")
print(f"fitted slope {scan.slope:.3f}")

# %% [markdown]
# The smallest case by hand: `f = z^2`, one Euler step of size 1 from `z0 = 1`.
# `z1 = z0 + z0^2`, so `dz1/dz0 = 1 + 2 z0 = 3`; the continuous adjoint
# evaluates the Jacobian at `z1 = 2` instead and reports `1 + 2 z1 = 5`.

# %%
one = np.array([1.0])
print(dto_gradient(Quadratic(1.0), None, one, 1.0, "euler", 1, one).grad_z0,
      otd_gradient_stored(Quadratic(1.0), None, one, 1.0, "euler", 1, one).grad_z0)

# %%
a = block_gradient("dto", field, None, z0, 1.0, "euler", 16, gbar)
b = block_gradient("otd_reverse", field, None, z0, 1.0, "euler", 16, gbar)
print("otd_reverse vs dto:", relative_error(b.flat, a.flat), " rho:", b.diagnostics["rho"])
