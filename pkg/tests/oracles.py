"""Independent reference computations, kept separate from the package code.

Values produced here are frozen into the tests as literals; the functions
stay importable so the frozen numbers can be regenerated and audited.
"""
import itertools
import math
from fractions import Fraction

import numpy as np
from scipy import integrate, special


def g0_d3_fourier():
    """g(0) in d=3 from the lattice Fourier integral with the k3 integral
    done in closed form: (1/π²) ∫∫_{[0,π]²} 3 / sqrt((3 - cos a - cos b)² - 1)."""

    def f(b, a):
        s = 3.0 - math.cos(a) - math.cos(b)
        return 3.0 / math.sqrt(s * s - 1.0)

    # split at the integrable corner singularity
    tot = 0.0
    for (a0, a1), (b0, b1) in itertools.product([(0, 0.5), (0.5, math.pi)], repeat=2):
        v, _ = integrate.dblquad(f, a0, a1, b0, b1, epsabs=1e-13, epsrel=1e-13)
        tot += v
    return tot / math.pi ** 2


def green_bessel_quad(x, d):
    """g(x) = ∫_0^∞ Π_i e^{-t/d} I_{x_i}(t/d) dt by adaptive quadrature,
    with the t^{-d/2} tail integrated from its leading asymptotic term."""
    x = [abs(int(v)) for v in x]

    def f(t):
        return math.prod(special.ive(xi, t / d) for xi in x)

    T = 4000.0 + 40.0 * sum(v * v for v in x)
    edges = [0.0, 1.0, 10.0, 100.0, 1000.0, T]
    head = sum(integrate.quad(f, a, b, epsabs=0, epsrel=1e-13, limit=500)[0]
               for a, b in zip(edges[:-1], edges[1:]))
    # ive(k, s) ~ (2πs)^{-1/2} (1 - (4k²-1)/(8s)); integrate the product tail
    k2 = sum(v * v for v in x)
    c = (d / (2 * math.pi)) ** (d / 2)
    lead = c * T ** (1 - d / 2) / (d / 2 - 1)
    corr = -c * (d * (4 * k2 - d) / 8) * T ** (-d / 2) / (d / 2)
    return head + lead + corr


def far_field_constant(d):
    """a_d = d Γ(d/2 - 1) / (2 π^{d/2})."""
    return d * math.gamma(d / 2 - 1) / (2 * math.pi ** (d / 2))


def ball_count(d, N):
    r = int(N)
    return sum(1 for p in itertools.product(range(-r, r + 1), repeat=d) if sum(v * v for v in p) <= N * N)


def path_survival(points, s):
    """Exact P_x(S_0..S_s stay in the set) for every x: the surviving
    s-step paths are enumerated one by one (depth first, abandoning a branch
    at its first step outside) and counted, as Fractions."""
    pts = [tuple(p) for p in points]
    inside = set(pts)
    d = len(pts[0])
    steps = []
    for i in range(d):
        for sg in (1, -1):
            e = [0] * d
            e[i] = sg
            steps.append(tuple(e))

    def count(z, left):
        if left == 0:
            return 1
        tot = 0
        for e in steps:
            y = tuple(a + b for a, b in zip(z, e))
            if y in inside:
                tot += count(y, left - 1)
        return tot

    return {x: Fraction(count(x, s), (2 * d) ** s) for x in pts}


def confined_paths(points, start, t):
    """All t-step nearest-neighbour paths from start staying in the set; under
    the conditioned law they are equally likely."""
    inside = set(tuple(p) for p in points)
    d = len(start)
    paths = [(tuple(start),)]
    for _ in range(t):
        nxt = []
        for p in paths:
            z = p[-1]
            for i in range(d):
                for sg in (1, -1):
                    y = list(z)
                    y[i] += sg
                    y = tuple(y)
                    if y in inside:
                        nxt.append(p + (y,))
        paths = nxt
    return paths


def star_eigen(d=3):
    """Principal pair of the killed kernel on {0, ±e_i}: λ² = 1/(2d),
    φ(0) = a, φ(±e_i) = λ a, a + 2d λ a = 1; other eigenvalues are 0 and -λ."""
    lam = 1 / math.sqrt(2 * d)
    a = 1 / (1 + 2 * d * lam)
    return lam, a, lam * a


def capacity_dense(points, green):
    """Capacity by a plain float64 solve of the Green system with an
    independently evaluated Green function `green(dx)`."""
    P = np.asarray(points)
    G = np.array([[green(tuple(a - b)) for b in P] for a in P])
    e = np.linalg.solve(G, np.ones(len(P)))
    return float(e.sum()), e


if __name__ == "__main__":
    print("g0 d=3 fourier", repr(g0_d3_fourier()))
    for d in range(3, 9):
        print("g0", d, repr(green_bessel_quad([0] * d, d)), "g(e1)", repr(green_bessel_quad([1] + [0] * (d - 1), d)))
    print("g(50,0,0)", repr(green_bessel_quad([50, 0, 0], 3)), "a3/50", far_field_constant(3) / 50)
    print("g(5,0,0)", repr(green_bessel_quad([5, 0, 0], 3)))
    print("g(1,0,0) d=3", repr(green_bessel_quad([1, 0, 0], 3)))
    print("counts", ball_count(3, 1), ball_count(3, 2), ball_count(3, 17), ball_count(3, 20))
    print("star", star_eigen())


def _naive_walks_impl():
    from numba import njit

    @njit(cache=True)
    def naive_ball_visits(start, N, R_big, n, seed):
        """|visited ∩ ball N| for plain SRWs from start, stopped at |z| >= R_big."""
        np.random.seed(seed)
        d = start.shape[0]
        side = 2 * N + 1
        out = np.zeros(n, dtype=np.int64)
        seen = np.zeros(side ** d, dtype=np.int64)
        z = np.empty(d, dtype=np.int64)
        for k in range(n):
            stamp = k + 1
            for i in range(d):
                z[i] = start[i]
            cnt = 0
            while True:
                r2 = 0
                for i in range(d):
                    r2 += z[i] * z[i]
                if r2 <= N * N:
                    key = 0
                    for i in range(d):
                        key = key * side + z[i] + N
                    if seen[key] != stamp:
                        seen[key] = stamp
                        cnt += 1
                if r2 >= R_big * R_big:
                    break
                j = np.random.randint(0, 2 * d)
                z[j >> 1] += 1 - 2 * (j & 1)
            out[k] = cnt
        return out

    return naive_ball_visits


def naive_ball_visits(start, N, R_big, n, seed):
    return _naive_walks_impl()(np.asarray(start, dtype=np.int64), int(N), int(R_big), int(n), int(seed))
