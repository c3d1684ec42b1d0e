"""Independent reference implementations used as test oracles.

None of these call into msrs; they are deliberately slow and simple.
"""

import math

import numpy as np


def jacobi_eigh(a, sweeps=100, tol=1e-15):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues (descending) and eigenvectors as columns.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(sweeps):
        off = math.sqrt(sum(a[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off <= tol * max(1.0, np.abs(a).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def singular_values(m):
    """Singular values from Jacobi on the smaller Gram matrix."""
    m = np.asarray(m, dtype=np.float64)
    g = m.T @ m if m.shape[0] >= m.shape[1] else m @ m.T
    w, _ = jacobi_eigh(g)
    return np.sqrt(np.clip(w, 0.0, None))


def energy_rank_scan(sigma, threshold=0.9):
    """Exhaustive scan: first r whose sequential partial sum reaches the threshold share."""
    s = [float(x) for x in sigma]
    total = 0.0
    for x in s:
        total += x
    acc = 0.0
    for r, x in enumerate(s, start=1):
        acc += x
        if acc / total >= threshold:
            return r
    return len(s)


def gram_schmidt(vectors):
    """Classical Gram-Schmidt on rows, dropping numerically dependent ones."""
    out = []
    for v in np.asarray(vectors, dtype=np.float64):
        w = v.copy()
        for _ in range(2):
            for u in out:
                w = w - (u @ w) * u
        n = np.linalg.norm(w)
        if n > 1e-10 * max(1.0, np.linalg.norm(v)):
            out.append(w / n)
    return np.array(out).reshape(len(out), -1)


def streaming_mean(rows):
    """Welford running mean."""
    mean = None
    for k, x in enumerate(rows, start=1):
        x = np.asarray(x, dtype=np.float64)
        mean = x.copy() if mean is None else mean + (x - mean) / k
    return mean


def logsumexp_ce(logits, gold):
    z = [float(v) for v in np.ravel(logits)]
    m = max(z)
    return m + math.log(math.fsum(math.exp(v - m) for v in z)) - z[gold]


def central_difference(f, x, eps=1e-6):
    """Gradient of scalar f at array x by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2 * eps)
    return g


def phi_reference(h, R, W, b, m):
    """Per-entry loop evaluation of the gated low-rank edit."""
    h = np.ravel(h)
    r, d = R.shape
    out = [float(v) for v in h]
    for i in range(r):
        wi = math.fsum(W[i, j] * h[j] for j in range(d)) + float(np.ravel(b)[i])
        ri = math.fsum(R[i, j] * h[j] for j in range(d))
        coef = float(np.ravel(m)[i]) * (wi - ri)
        for j in range(d):
            out[j] += R[i, j] * coef
    return np.array(out)


def subspace_distance(a, b):
    """Spectral norm of the projector difference, a rotation-free span comparison."""
    pa = a.T @ a
    pb = b.T @ b
    return float(np.sqrt(max(jacobi_eigh((pa - pb) @ (pa - pb))[0][0], 0.0)))
