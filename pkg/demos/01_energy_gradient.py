"""
Attention as the gradient of an energy
======================================

The energy of one query row is F(zeta) = log sum_a exp(q . k_a + zeta . v_a).
Its gradient with respect to the source zeta, taken at zeta = 0, is exactly
the attention output. Higher derivatives of Z = exp(F) give higher moments.
"""

import numpy as np

from treeattn import attention_naive, energy, grad_energy_wrt_source, moment_via_source, seeded_random_tensor

# a single decoding query against 32 cached keys, 4 heads of size 8
q = seeded_random_tensor((1, 4, 1, 8), seed=1)
k = seeded_random_tensor((1, 4, 32, 8), seed=2)
v = seeded_random_tensor((1, 4, 32, 8), seed=3)

out = attention_naive(q, k, v)
grad = grad_energy_wrt_source(q, k, v)
print("max |dF/dzeta - attention| =", np.max(np.abs(grad - out)))

# the same gradient by central differences on the energy itself
h = 1e-5
zeta = np.zeros(q.shape)
fd = np.zeros(q.shape)
for idx in np.ndindex(q.shape):
    zp, zm = zeta.copy(), zeta.copy()
    zp[idx] += h
    zm[idx] -= h
    fd[idx] = (energy(q, k, v, zp).value.sum() - energy(q, k, v, zm).value.sum()) / (2 * h)
print("max |finite difference - attention| =", np.max(np.abs(fd - out)))

# the energy keeps its max and shifted logsumexp for a later gradient pass
ev = energy(q, k, v)
print("F = O + m holds exactly:", np.array_equal(ev.value, ev.O + ev.m))

# second moments of the value coordinates under the attention distribution
second = moment_via_source(q, k, v, order=2, coords=(0, 0))
print("E[v_0^2] per head:", np.round(second.ravel(), 4))
print("Var[v_0] per head:", np.round((second - out[..., 0] ** 2).ravel(), 4))
