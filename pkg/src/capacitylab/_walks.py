"""numba kernels for simple random walks on Z^d.

Far from the watched set a walk moves in one go, either to the exit site of
an empty lattice ball (exact exit law, see jumps.py) or by the displacement
of a block of m steps (multinomial axis counts, binomial sign split). Both
are only used when the watched set cannot be reached inside the move, so
visit records are unchanged.
"""
import numpy as np
from numba import njit

from ._index import locate
from .green import green_row

ESCAPED = 0
HIT = 1
BUDGET = 2


@njit(cache=True)
def step(z, rng):
    k = rng.integers(0, 2 * z.shape[0])
    if k & 1:
        z[k >> 1] -= 1
    else:
        z[k >> 1] += 1


@njit(cache=True)
def jump(z, m, rng):
    """Advance z by the displacement of m SRW steps."""
    d = z.shape[0]
    rem = m
    for i in range(d - 1):
        k = 0
        if rem > 0:
            k = rng.binomial(rem, 1.0 / (d - i))
        rem -= k
        plus = rng.binomial(k, 0.5) if k > 0 else 0
        z[i] += 2 * plus - k
    plus = rng.binomial(rem, 0.5) if rem > 0 else 0
    z[d - 1] += 2 * plus - rem


@njit(cache=True)
def advance(z, clear, radii, offs, sites, cdf, msteps, rng):
    """Move z as an SRW when every watched point x has |x - z| > clear.

    Uses the exact exit law of the largest tabulated lattice ball of radius
    <= clear (an exit orbit drawn from its law, then a uniform signed
    permutation), a block of floor(clear) steps, or a single step, whichever
    travels farthest. Returns the step count (mean exit time for ball jumps).
    """
    m = int(np.floor(clear))
    k = -1
    for j in range(radii.shape[0]):
        if radii[j] <= clear:
            k = j
        else:
            break
    if k >= 0 and radii[k] * radii[k] >= m:
        u = rng.random()
        a = offs[k]
        b = offs[k + 1] - 1
        while a < b:
            mid = (a + b) // 2
            if cdf[mid] <= u:
                a = mid + 1
            else:
                b = mid
        # sites holds sorted orbit representatives: apply a random signed permutation
        d = z.shape[0]
        perm = np.arange(d)
        for i in range(d - 1, 0, -1):
            j = rng.integers(0, i + 1)
            t = perm[i]
            perm[i] = perm[j]
            perm[j] = t
        bits = rng.integers(0, 1 << d)
        for i in range(d):
            v = sites[a, perm[i]]
            if (bits >> i) & 1:
                v = -v
            z[i] += v
        return max(1, int(msteps[k]))
    if m >= 2:
        jump(z, m, rng)
        return m
    step(z, rng)
    return 1


@njit(cache=True)
def dist_to(z, c):
    s = 0.0
    for i in range(z.shape[0]):
        q = z[i] - c[i]
        s += q * q
    return np.sqrt(s)


@njit(cache=True)
def _block_empty(z, j, L, origin, Op, Olo, Oext, Ogrid, Ohtab, q):
    d = z.shape[0]
    n3 = 1
    for i in range(d):
        n3 *= 3
    q[0] = j
    for code in range(n3):
        c = code
        for i in range(d):
            q[1 + i] = (z[i] - origin[i]) // L + (c % 3) - 1
            c //= 3
        if locate(q, Op, Olo, Oext, Ogrid, Ohtab) >= 0:
            return False
    return True


@njit(cache=True)
def occupancy_jump(z, origin, levels, Op, Olo, Oext, Ogrid, Ohtab, q):
    """Largest cell size L such that the 3^d block of level-L cells around z
    holds no point of the set; the set is then at l-inf distance > L.
    Levels are successive powers of 2, so emptiness is monotone in the level
    and a binary search suffices."""
    lo = -1
    hi = levels.shape[0]
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _block_empty(z, mid, levels[mid], origin, Op, Olo, Oext, Ogrid, Ohtab, q):
            lo = mid
        else:
            hi = mid
    return levels[lo] if lo >= 0 else 0


@njit(cache=True)
def escape_walks(starts, Kp, Klo, Kext, Kgrid, Khtab,
                 Op, Olo, Oext, Ogrid, Ohtab, origin, levels,
                 center, rho, R, radii, offs, sites, cdf, msteps, rng, max_steps, out_esc, out_Z):
    """From each start (a point of K) walk until the first return to K or
    until |z - center| >= R. Returns 0, or 2 if a walk makes more than max_steps moves (steps or jumps)."""
    nw, d = starts.shape
    z = np.empty(d, dtype=np.int64)
    q = np.empty(d + 1, dtype=np.int64)
    use_occ = levels.shape[0] > 0
    for w in range(nw):
        for i in range(d):
            z[i] = starts[w, i]
        step(z, rng)
        steps = 1
        iters = 0
        cool = 0
        while True:
            if locate(z, Kp, Klo, Kext, Kgrid, Khtab) >= 0:
                out_esc[w] = False
                break
            r = dist_to(z, center)
            if r >= R:
                out_esc[w] = True
                for i in range(d):
                    out_Z[w, i] = z[i]
                break
            clear = r - rho - 1e-9
            if use_occ and clear < levels[levels.shape[0] - 1]:
                if cool == 0:
                    mo = occupancy_jump(z, origin, levels, Op, Olo, Oext, Ogrid, Ohtab, q)
                    if mo > clear:
                        clear = mo
                    if mo == 0:
                        cool = 3
                else:
                    cool -= 1
            if clear >= 2:
                steps += advance(z, clear, radii, offs, sites, cdf, msteps, rng)
            else:
                step(z, rng)
                steps += 1
            iters += 1
            if iters > max_steps:
                return BUDGET
    return ESCAPED


@njit(cache=True)
def teleport_target(z, Bp, Be, table, binom, r0sq, a_d, corr, wbuf, dx):
    """Fill wbuf[b] = g(z - Bp[b]) Be[b]; return the total Σ_b wbuf[b]."""
    green_row(z, Bp, 0, wbuf, table, binom, r0sq, a_d, corr)
    p = 0.0
    for b in range(Bp.shape[0]):
        wbuf[b] *= Be[b]
        p += wbuf[b]
    return p


@njit(cache=True)
def window_walk(z, Wp, Wlo, Wext, Wgrid, Whtab, Bp, Be, center, rho, R_out,
                table, binom, r0sq, a_d, corr, radii, offs, sites, cdf, msteps,
                Tp, Tlo, Text, Tgrid, Thtab, use_target,
                vis, label, record, rng, max_steps, wbuf, dx):
    """SRW from z (modified in place) recording window visits.

    Beyond R_out from the window the walk returns with probability
    Σ_y g(z-y) e(y) and is then placed at y drawn ∝ g(z-y) e(y); otherwise it
    never comes back. Returns (code, steps).
    """
    d = z.shape[0]
    steps = 0
    iters = 0
    cap_w = -1.0
    while True:
        idx = locate(z, Wp, Wlo, Wext, Wgrid, Whtab)
        if idx >= 0:
            if record and label < vis[idx]:
                vis[idx] = label
            if use_target:
                if locate(z, Tp, Tlo, Text, Tgrid, Thtab) >= 0:
                    return HIT, steps
            step(z, rng)
            steps += 1
        else:
            r = dist_to(z, center)
            if r >= R_out:
                if cap_w < 0.0:
                    cap_w = 0.0
                    for b in range(Be.shape[0]):
                        cap_w += Be[b]
                # cheap upper bound on the return probability settles most escapes
                v = rng.random()
                s_min = r - rho
                if s_min >= 3.0:
                    # g(x) <= (1 + (d-2)d(d-1)/(6|x|^2)) a_d |x|^{2-d} for |x| >= 3, d <= 8
                    ub = cap_w * (1.0 + (d - 2) * d * (d - 1) / (6.0 * s_min * s_min)) * a_d * s_min ** (2.0 - d)
                    if v >= ub:
                        return ESCAPED, steps
                p = teleport_target(z, Bp, Be, table, binom, r0sq, a_d, corr, wbuf, dx)
                if v >= p:
                    return ESCAPED, steps
                u = rng.random() * p
                acc = 0.0
                pick = Bp.shape[0] - 1
                for b in range(Bp.shape[0]):
                    acc += wbuf[b]
                    if u < acc:
                        pick = b
                        break
                for i in range(d):
                    z[i] = Bp[pick, i]
                continue
            clear = r - rho - 1e-9
            if clear >= 2:
                steps += advance(z, clear, radii, offs, sites, cdf, msteps, rng)
            else:
                step(z, rng)
                steps += 1
        iters += 1
        if iters > max_steps:
            return BUDGET, steps


@njit(cache=True)
def window_batch(starts, labels, Wp, Wlo, Wext, Wgrid, Whtab, Bp, Be, center, rho, R_out,
                 table, binom, r0sq, a_d, corr, radii, offs, sites, cdf, msteps,
                 Tp, Tlo, Text, Tgrid, Thtab, use_target, stop_on_hit,
                 vis, record, rng, max_steps):
    """Run one window walk per start. Returns (code, hits, total steps); with
    stop_on_hit the batch ends at the first target hit."""
    nw, d = starts.shape
    z = np.empty(d, dtype=np.int64)
    wbuf = np.empty(Bp.shape[0])
    dx = np.empty(d, dtype=np.int64)
    hits = 0
    total = 0
    for w in range(nw):
        for i in range(d):
            z[i] = starts[w, i]
        code, s = window_walk(z, Wp, Wlo, Wext, Wgrid, Whtab, Bp, Be, center, rho, R_out,
                              table, binom, r0sq, a_d, corr, radii, offs, sites, cdf, msteps,
                              Tp, Tlo, Text, Tgrid, Thtab, use_target,
                              vis, labels[w], record, rng, max_steps, wbuf, dx)
        total += s
        if code == BUDGET:
            return BUDGET, hits, total
        if code == HIT:
            hits += 1
            if stop_on_hit:
                return HIT, hits, total
    return ESCAPED, hits, total


@njit(cache=True)
def window_hits(starts, Wp, Wlo, Wext, Wgrid, Whtab, Bp, Be, center, rho, R_out,
                table, binom, r0sq, a_d, corr, radii, offs, sites, cdf, msteps,
                Tp, Tlo, Text, Tgrid, Thtab, rng, max_steps, out_hit):
    """Per-start indicator of ever hitting the target (window walks)."""
    nw, d = starts.shape
    z = np.empty(d, dtype=np.int64)
    wbuf = np.empty(Bp.shape[0])
    dx = np.empty(d, dtype=np.int64)
    vis = np.empty(0)
    for w in range(nw):
        for i in range(d):
            z[i] = starts[w, i]
        code, s = window_walk(z, Wp, Wlo, Wext, Wgrid, Whtab, Bp, Be, center, rho, R_out,
                              table, binom, r0sq, a_d, corr, radii, offs, sites, cdf, msteps,
                              Tp, Tlo, Text, Tgrid, Thtab, True,
                              vis, 0.0, False, rng, max_steps, wbuf, dx)
        if code == BUDGET:
            return BUDGET
        out_hit[w] = code == HIT
    return ESCAPED


@njit(cache=True)
def vacancy_batch(counts, Sp, Scdf, Wp, Wlo, Wext, Wgrid, Whtab, Bp, Be, center, rho, R_out,
                  table, binom, r0sq, a_d, corr, radii, offs, sites, cdf, msteps,
                  Tp, Tlo, Text, Tgrid, Thtab, rng, max_steps, out_vacant):
    """Replica r launches counts[r] walks from points of Sp drawn by the CDF
    Scdf; it is vacant when none visits the target. A replica stops drawing
    walks at its first hit."""
    nr = counts.shape[0]
    d = Sp.shape[1]
    z = np.empty(d, dtype=np.int64)
    wbuf = np.empty(Bp.shape[0])
    dx = np.empty(d, dtype=np.int64)
    vis = np.empty(0)
    for r in range(nr):
        vacant = True
        for w in range(counts[r]):
            k = np.searchsorted(Scdf, rng.random(), side="right")
            if k >= Sp.shape[0]:
                k = Sp.shape[0] - 1
            for i in range(d):
                z[i] = Sp[k, i]
            code, s = window_walk(z, Wp, Wlo, Wext, Wgrid, Whtab, Bp, Be, center, rho, R_out,
                                  table, binom, r0sq, a_d, corr, radii, offs, sites, cdf, msteps,
                                  Tp, Tlo, Text, Tgrid, Thtab, True,
                                  vis, 0.0, False, rng, max_steps, wbuf, dx)
            if code == BUDGET:
                return BUDGET
            if code == HIT:
                vacant = False
                break
        out_vacant[r] = vacant
    return ESCAPED
