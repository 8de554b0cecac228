"""Independent reference implementations used to check the package.

Each oracle takes a different computational route from the code it audits:
scalar loops instead of vectorised numpy, explicit enumeration instead of
recursion, quadrature instead of sampling, a counting recurrence instead
of arrangement enumeration.
"""

from __future__ import annotations

from functools import lru_cache
from itertools import combinations

import numpy as np
from scipy.integrate import quad


def finite_difference_gradients(loss_fn, store, h=1e-5):
    """Central differences of loss_fn() w.r.t. every parameter entry."""
    grads = {}
    for p in store:
        flat = p.value.ravel()
        g = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn()
            flat[i] = orig - h
            f_minus = loss_fn()
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * h)
        grads[p.name] = g.reshape(p.value.shape)
    return grads


def chain_forward(store, config, x, mask):
    """Explicit affine-chain evaluation of the branched network.

    Reads raw parameter arrays and applies base layers, then the arm stacks
    of the set bits in ascending index order, then the head. Mirrors the
    published recursion directly rather than reusing any model method.
    """
    relu = config.activation == "relu"
    h = np.asarray(x, dtype=float)
    for i in range(config.base_layers):
        h = store[f"base.{i}.W"].value @ h + store[f"base.{i}.b"].value
        if relu and i < config.base_layers - 1:
            h = np.maximum(h, 0.0)
    for j in range(config.k):
        if mask >> j & 1:
            for d in range(config.arm_depth):
                h = store[f"arm.{j}.{d}.W"].value @ h + store[f"arm.{j}.{d}.b"].value
                if config.arm_activation and relu:
                    h = np.maximum(h, 0.0)
    return float((store["head.W"].value @ h + store["head.b"].value)[0])


def chain_all_combinations(store, config, x):
    k = config.k
    return np.array([chain_forward(store, config, x, mask) for mask in range(1, 1 << k)])


def scalar_mixed_distance(x1, x2, schema):
    """Pure-scalar re-implementation of the mixed distance."""
    p = schema.p
    jac = 0.0
    if schema.discrete_indices:
        inter = union = 0
        for i in schema.discrete_indices:
            a, b = x1[i] == 1.0, x2[i] == 1.0
            inter += a and b
            union += a or b
        jac = 0.0 if union == 0 else 1.0 - inter / union
    cont = 0.0
    if schema.continuous_indices:
        for i in schema.continuous_indices:
            cont += abs(x1[i] - x2[i])
        cont /= len(schema.continuous_indices)
    return (
        len(schema.discrete_indices) / p * jac
        + len(schema.continuous_indices) / p * cont
    )


def subset_sum_outcome(singles, mask, coeffs, max_degree=5):
    """Combined outcome by iterating every submask of the treatment set."""
    active = [j for j in range(64) if mask >> j & 1]
    total = sum(singles[j] for j in active)
    degree = min(len(active), max_degree)
    sub = (mask - 1) & mask
    while sub:
        size = bin(sub).count("1")
        if 2 <= size <= degree:
            b = coeffs.get(sub, 0.0)
            if b:
                prod = 1.0
                for j in range(64):
                    if sub >> j & 1:
                        prod *= singles[j]
                total += b * prod
        sub = (sub - 1) & mask
    if 2 <= len(active) <= degree:
        b = coeffs.get(mask, 0.0)
        if b:
            prod = 1.0
            for j in active:
                prod *= singles[j]
            total += b * prod
    return total


def truncated_normal_mean(mean, sd, lower, upper):
    """Mean of the truncated normal by numerical quadrature."""

    def pdf(t):
        return np.exp(-0.5 * ((t - mean) / sd) ** 2)

    mass, _ = quad(pdf, lower, upper)
    weighted, _ = quad(lambda t: t * pdf(t), lower, upper)
    return weighted / mass


def hamming_nearest_mask(observed_masks, query):
    """Closest observed mask by Hamming distance, lowest mask on ties."""
    return min(observed_masks, key=lambda m: (bin(m ^ query).count("1"), m))


def linear_scan_nearest(candidate_scores, candidate_ids, centroid):
    """Index of the candidate nearest to centroid; lowest id on ties."""
    dists = [float(np.linalg.norm(s - centroid)) for s in candidate_scores]
    best = min(range(len(dists)), key=lambda i: (dists[i], candidate_ids[i]))
    return best


@lru_cache(maxsize=None)
def _u_counts(n_a: int, n_b: int) -> tuple:
    """Null distribution of the tie-free Mann-Whitney U statistic via the
    classic counting recurrence (independent of arrangement enumeration)."""
    if n_a == 0 or n_b == 0:
        return (1,)
    shifted = _u_counts(n_a - 1, n_b)  # last element of sample a is the maximum
    plain = _u_counts(n_a, n_b - 1)  # last element of sample b is the maximum
    size = n_a * n_b + 1
    counts = [0] * size
    for u, c in enumerate(shifted):
        counts[u + n_b] += c
    for u, c in enumerate(plain):
        counts[u] += c
    return tuple(counts)


def exact_mww_p_recurrence(n_a: int, n_b: int, u_obs: float) -> float:
    """Two-sided tail-doubled exact p for tie-free samples."""
    counts = _u_counts(n_a, n_b)
    total = sum(counts)
    below = sum(c for u, c in enumerate(counts) if u <= u_obs)
    above = sum(c for u, c in enumerate(counts) if u >= u_obs)
    return min(1.0, 2.0 * min(below, above) / total)


def u_statistic_bruteforce(a, b):
    """Pairwise-counting U for sample a (ties count one half)."""
    u = 0.0
    for x in a:
        for y in b:
            if x > y:
                u += 1.0
            elif x == y:
                u += 0.5
    return u
