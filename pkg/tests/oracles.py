"""Independent reference computations shared by the unit and acceptance tests."""
import numpy as np


def naive_transfer(stack):
    """Ordered product with explicit triple loops, independent of the library code."""
    L, N = stack.phases.theta.shape
    phis = [np.exp(1j * stack.phases.theta[l]) for l in range(L)]
    S = [[phis[0][i] if i == j else 0j for j in range(N)] for i in range(N)]
    for l in range(1, L):
        W = stack.cached_W[l + 1]
        new = [[0j] * N for _ in range(N)]
        for i in range(N):
            for j in range(N):
                acc = 0j
                for k in range(N):
                    acc += W[i][k] * S[k][j]
                new[i][j] = phis[l][i] * acc
        S = new
    return np.array(S)


def fd_gradient(f, theta, h=1e-6):
    """Central differences, one coordinate at a time."""
    g = np.empty_like(theta)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def relative_error(analytic, numeric):
    """Largest absolute deviation relative to the largest numeric component."""
    return np.max(np.abs(analytic - numeric)) / np.max(np.abs(numeric))
