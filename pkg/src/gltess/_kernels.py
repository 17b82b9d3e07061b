"""Compiled numerical core: periodic power-diagram clipping and the chain loop.

Everything in this module is numba-compiled and operates on flat preallocated
arrays owned by :class:`gltess._state.ChainCore`.  The Python layers in
``geometry``/``sampler`` are thin wrappers; no public API lives here.

Geometry representation
-----------------------
A cell is built in the local frame of its generator (generator at origin) by
half-space clipping.  The initial polytope is the unit cube centred on the
generator: the cube faces are exactly the radical planes of the generator's six
nearest periodic self-images, so every cell is contained in it.  Candidate
radical planes come from all generators within an adaptive search radius; a
plane with distance ``s`` from the origin can only cut while ``s`` is below the
current maximum vertex distance, which lets the sorted clip loop terminate
early.  Images outside the gathered radius are provably unable to cut once the
completeness bound ``(R^2 + r_i^2 - max_r^2) / (2R) > rmax`` holds; if it does
not, the search radius is escalated (up to a brute-force sweep over the full
3x3x3 image block).

Faces are stored as explicit polygons (coordinates duplicated per face), which
keeps Sutherland-Hodgman clipping branch-free and simple; the welded vertex
set is recovered afterwards through a quantised hash.
"""

import numpy as np
from numba import njit

# capacities (per cell / per proposal); overflow raises GeometryFailure upstream
MAXF = 192          # faces per cell
MAXFV = 64          # vertices per face polygon
MAXVS = 256         # welded vertices stored per cell
MAXNB = 192         # unique neighbours per cell
CMAX = 65536        # gathered cut candidates
AMAX = 4096         # cells rebuilt per proposal
JMAX = 64           # histogram bins per reconstructing potential
KMAX = 6            # reconstructing potentials per model
GRID_MMAX = 40      # grid resolution cap
HSZ = 4096          # vertex weld hash slots (power of two)
N_BRUTE = 96        # below this cardinality, skip the grid and sweep all images

# numeric tolerances (unit-torus length scale)
EPS_ON = 1e-12      # on-plane band for clipping
EPS_WELD = 1e-7     # vertex weld quantum
EPS_AFF = 1e-6      # affected-cell test slack, power units
EPS_EMPTY = 1e-14   # volume below this means the cell is empty
EPS_GUARD = 1e-9    # slack on the clip termination bound

# status codes returned by kernels (non-negative codes are successes)
OK = 0
STOPPED = 1
ERR_GROW_N = -10
ERR_GROW_GID = -11
ERR_AFF_OVERFLOW = -12
ERR_CAPACITY = -13
ERR_FIXPOINT = -14
ERR_CAND_OVERFLOW = -15
ERR_VOLUME_SUM = -16
ERR_COINCIDENT = -17
ERR_NEIGHBOR_MISSING = -18
ERR_REJECTION_BUDGET = -20

# proposal kinds
K_BIRTH = 0
K_DEATH = 1
K_MOVE = 2

# characteristic / functional codes shared with gltess.energy
CH_NOF = 0
CH_VOL = 1
CH_NVR = 2
CH_VOLDIFF = 3
CH_RADIUS = 4
F_MEAN = 0
F_VARIANCE = 1
F_DSC = 2

INF = np.inf

_U64_1 = np.uint64(1)


# ---------------------------------------------------------------------------
# RNG: splitmix64 seeding + xoshiro256** stream, inverse-CDF normals
# ---------------------------------------------------------------------------

@njit(cache=True)
def splitmix64(state):
    # state: uint64[1]; returns next uint64
    state[0] = state[0] + np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def rng_seed(s, seed):
    # s: uint64[4]
    tmp = np.empty(1, np.uint64)
    tmp[0] = np.uint64(seed)
    for i in range(4):
        s[i] = splitmix64(tmp)


@njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def rng_next(s):
    result = _rotl(s[1] * np.uint64(5), 7) * np.uint64(9)
    t = s[1] << np.uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@njit(cache=True)
def rng_u01(s):
    # in [0, 1), 53-bit resolution
    return np.float64(rng_next(s) >> np.uint64(11)) * 1.1102230246251565e-16


@njit(cache=True)
def norm_ppf(p):
    """Inverse standard normal CDF (Wichura's PPND16), |err| < 1e-15."""
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
                    + 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r
                  + 1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r
                + 1.3314166789178437745e2) * r + 3.3871328727963666080e0)
        den = (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
                    + 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r
                  + 5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r
                + 4.2313330701600911252e1) * r + 1.0)
        return q * num / den
    if q < 0.0:
        r = p
    else:
        r = 1.0 - p
    if r <= 0.0:
        r = 5e-324
    r = np.sqrt(-np.log(r))
    if r <= 5.0:
        r = r - 1.6
        num = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
                    + 2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r
                  + 3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r
                + 4.63033784615654529590e0) * r + 1.42343711074968357734e0)
        den = (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
                    + 1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r
                  + 6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r
                + 2.05319162663775882187e0) * r + 1.0)
    else:
        r = r - 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r
                  + 2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r
                + 5.46378491116411436990e0) * r + 6.65790464350110377720e0)
        den = (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
                    + 1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r
                  + 1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r
                + 5.99832206555887937690e-1) * r + 1.0)
    val = num / den
    if q < 0.0:
        return -val
    return val


@njit(cache=True)
def rng_normal(s):
    u = rng_u01(s)
    if u <= 0.0:
        u = 5.5e-17
    return norm_ppf(u)


@njit(cache=True)
def rng_radius(s, r0):
    # uniform on (0, r0]
    return r0 * (1.0 - rng_u01(s))


# ---------------------------------------------------------------------------
# torus helpers
# ---------------------------------------------------------------------------

@njit(cache=True)
def wrap01(x):
    r = x - np.floor(x)
    if r >= 1.0:
        r = 0.0
    return r


@njit(cache=True)
def wraphalf(d):
    # representative of d (mod 1) in [-0.5, 0.5)
    return d - np.floor(d + 0.5)


# ---------------------------------------------------------------------------
# uniform grid over the torus (linked lists per bucket)
# ---------------------------------------------------------------------------

@njit(cache=True)
def grid_bucket(x, y, z, m):
    ix = int(x * m)
    iy = int(y * m)
    iz = int(z * m)
    if ix >= m:
        ix = m - 1
    if iy >= m:
        iy = m - 1
    if iz >= m:
        iz = m - 1
    return (ix * m + iy) * m + iz


@njit(cache=True)
def grid_clear(ghead, m):
    for i in range(m * m * m):
        ghead[i] = -1


@njit(cache=True)
def grid_add(pos, i, m, ghead, gnext):
    b = grid_bucket(pos[i, 0], pos[i, 1], pos[i, 2], m)
    gnext[i] = ghead[b]
    ghead[b] = i


@njit(cache=True)
def grid_remove(pos, i, m, ghead, gnext):
    b = grid_bucket(pos[i, 0], pos[i, 1], pos[i, 2], m)
    cur = ghead[b]
    if cur == i:
        ghead[b] = gnext[i]
        return
    while cur >= 0:
        nxt = gnext[cur]
        if nxt == i:
            gnext[cur] = gnext[i]
            return
        cur = nxt


@njit(cache=True)
def grid_replace(pos, old_i, new_i, m, ghead, gnext):
    # old_i and new_i refer to the same position (row copy during deletion)
    b = grid_bucket(pos[new_i, 0], pos[new_i, 1], pos[new_i, 2], m)
    cur = ghead[b]
    if cur == old_i:
        ghead[b] = new_i
        gnext[new_i] = gnext[old_i]
        return
    while cur >= 0:
        nxt = gnext[cur]
        if nxt == old_i:
            gnext[cur] = new_i
            gnext[new_i] = gnext[old_i]
            return
        cur = nxt


@njit(cache=True)
def grid_build(pos, n, m, ghead, gnext):
    grid_clear(ghead, m)
    for i in range(n):
        grid_add(pos, i, m, ghead, gnext)


@njit(cache=True)
def grid_resolution(n):
    if n <= N_BRUTE:
        return 1
    m = int(np.cbrt(n / 3.0))
    if m < 8:
        m = 8
    if m > GRID_MMAX:
        m = GRID_MMAX
    return m


# ---------------------------------------------------------------------------
# candidate gathering for cell clipping
# ---------------------------------------------------------------------------

@njit(cache=True)
def _gather_grid(qx, qy, qz, rs, self_idx, skip_idx, pos, rad, n, m,
                 ghead, gnext, cw, cr2, cj, cs, qr2):
    """Min-image candidates within distance rs (< 0.49). Returns count or <0."""
    cnt = 0
    rs2 = rs * rs
    lo0 = int(np.floor((qx - rs) * m))
    hi0 = int(np.floor((qx + rs) * m))
    lo1 = int(np.floor((qy - rs) * m))
    hi1 = int(np.floor((qy + rs) * m))
    lo2 = int(np.floor((qz - rs) * m))
    hi2 = int(np.floor((qz + rs) * m))
    for a in range(lo0, hi0 + 1):
        ia = a % m
        if ia < 0:
            ia += m
        for b in range(lo1, hi1 + 1):
            ib = b % m
            if ib < 0:
                ib += m
            for c in range(lo2, hi2 + 1):
                ic = c % m
                if ic < 0:
                    ic += m
                j = ghead[(ia * m + ib) * m + ic]
                while j >= 0:
                    if j != self_idx and j != skip_idx:
                        wx = wraphalf(pos[j, 0] - qx)
                        wy = wraphalf(pos[j, 1] - qy)
                        wz = wraphalf(pos[j, 2] - qz)
                        d2 = wx * wx + wy * wy + wz * wz
                        if d2 <= rs2:
                            if cnt >= CMAX:
                                return ERR_CAND_OVERFLOW
                            cw[cnt, 0] = wx
                            cw[cnt, 1] = wy
                            cw[cnt, 2] = wz
                            cr2[cnt] = rad[j] * rad[j]
                            cj[cnt] = j
                            d = np.sqrt(d2)
                            if d < 1e-14:
                                return ERR_COINCIDENT
                            cs[cnt] = (d2 + qr2 - cr2[cnt]) / (2.0 * d)
                            cnt += 1
                    j = gnext[j]
    return cnt


@njit(cache=True)
def _gather_brute(qx, qy, qz, self_idx, skip_idx, pos, rad, n,
                  cw, cr2, cj, cs, qr2):
    """All generators, all 27 periodic images (own images excluded: the
    initial cube already realises every self-image plane that can cut)."""
    cnt = 0
    for j in range(n):
        if j == self_idx or j == skip_idx:
            continue
        bx = pos[j, 0] - qx
        by = pos[j, 1] - qy
        bz = pos[j, 2] - qz
        r2 = rad[j] * rad[j]
        for ox in range(-1, 2):
            for oy in range(-1, 2):
                for oz in range(-1, 2):
                    wx = bx + ox
                    wy = by + oy
                    wz = bz + oz
                    d2 = wx * wx + wy * wy + wz * wz
                    if cnt >= CMAX:
                        return ERR_CAND_OVERFLOW
                    d = np.sqrt(d2)
                    if d < 1e-14:
                        return ERR_COINCIDENT
                    cw[cnt, 0] = wx
                    cw[cnt, 1] = wy
                    cw[cnt, 2] = wz
                    cr2[cnt] = r2
                    cj[cnt] = j
                    cs[cnt] = (d2 + qr2 - r2) / (2.0 * d)
                    cnt += 1
    return cnt


@njit(cache=True)
def _argsort_f8(keys, idx, cnt, stack):
    """Iterative quicksort of idx[0:cnt] by keys (insertion sort for runs)."""
    for i in range(cnt):
        idx[i] = i
    if cnt < 2:
        return
    top = 0
    stack[0] = 0
    stack[1] = cnt - 1
    top = 2
    while top > 0:
        hi = stack[top - 1]
        lo = stack[top - 2]
        top -= 2
        if hi - lo < 16:
            for i in range(lo + 1, hi + 1):
                t = idx[i]
                kt = keys[t]
                j = i - 1
                while j >= lo and keys[idx[j]] > kt:
                    idx[j + 1] = idx[j]
                    j -= 1
                idx[j + 1] = t
            continue
        mid = (lo + hi) >> 1
        # median-of-three pivot
        a, b, c = keys[idx[lo]], keys[idx[mid]], keys[idx[hi]]
        if (a <= b <= c) or (c <= b <= a):
            p = mid
        elif (b <= a <= c) or (c <= a <= b):
            p = lo
        else:
            p = hi
        tmp = idx[p]
        idx[p] = idx[hi]
        idx[hi] = tmp
        piv = keys[idx[hi]]
        i = lo - 1
        for j in range(lo, hi):
            if keys[idx[j]] <= piv:
                i += 1
                tmp = idx[i]
                idx[i] = idx[j]
                idx[j] = tmp
        i += 1
        tmp = idx[i]
        idx[i] = idx[hi]
        idx[hi] = tmp
        if i - 1 > lo:
            stack[top] = lo
            stack[top + 1] = i - 1
            top += 2
        if i + 1 < hi:
            stack[top] = i + 1
            stack[top + 1] = hi
            top += 2


# ---------------------------------------------------------------------------
# polytope clipping workspace
# ---------------------------------------------------------------------------

@njit(cache=True)
def _ws_init_cube(fnv, fvx, fnb, fpl, own_gid):
    """Unit cube centred on the generator; faces neighbour the generator
    itself (periodic self-adjacency)."""
    h = 0.5
    # vertices per face, CCW seen from outside
    # +x
    cube = np.empty((6, 4, 3), np.float64)
    cube[0, 0] = (h, -h, -h)
    cube[0, 1] = (h, h, -h)
    cube[0, 2] = (h, h, h)
    cube[0, 3] = (h, -h, h)
    cube[1, 0] = (-h, -h, -h)
    cube[1, 1] = (-h, -h, h)
    cube[1, 2] = (-h, h, h)
    cube[1, 3] = (-h, h, -h)
    cube[2, 0] = (-h, h, -h)
    cube[2, 1] = (-h, h, h)
    cube[2, 2] = (h, h, h)
    cube[2, 3] = (h, h, -h)
    cube[3, 0] = (-h, -h, -h)
    cube[3, 1] = (h, -h, -h)
    cube[3, 2] = (h, -h, h)
    cube[3, 3] = (-h, -h, h)
    cube[4, 0] = (-h, -h, h)
    cube[4, 1] = (h, -h, h)
    cube[4, 2] = (h, h, h)
    cube[4, 3] = (-h, h, h)
    cube[5, 0] = (-h, -h, -h)
    cube[5, 1] = (-h, h, -h)
    cube[5, 2] = (h, h, -h)
    cube[5, 3] = (h, -h, -h)
    normals = np.empty((6, 3), np.float64)
    normals[0] = (1.0, 0.0, 0.0)
    normals[1] = (-1.0, 0.0, 0.0)
    normals[2] = (0.0, 1.0, 0.0)
    normals[3] = (0.0, -1.0, 0.0)
    normals[4] = (0.0, 0.0, 1.0)
    normals[5] = (0.0, 0.0, -1.0)
    for f in range(6):
        fnv[f] = 4
        for k in range(4):
            fvx[f, k, 0] = cube[f, k, 0]
            fvx[f, k, 1] = cube[f, k, 1]
            fvx[f, k, 2] = cube[f, k, 2]
        fnb[f] = own_gid
        fpl[f, 0] = normals[f, 0]
        fpl[f, 1] = normals[f, 1]
        fpl[f, 2] = normals[f, 2]
        fpl[f, 3] = h
    return 6


@njit(cache=True)
def _ws_extents(fnv, fvx, nf, ext):
    """Max vertex distance and per-axis half-extents of the current cell."""
    r2 = 0.0
    bx = 0.0
    by = 0.0
    bz = 0.0
    for f in range(nf):
        for k in range(fnv[f]):
            x = fvx[f, k, 0]
            y = fvx[f, k, 1]
            z = fvx[f, k, 2]
            d2 = x * x + y * y + z * z
            if d2 > r2:
                r2 = d2
            ax = abs(x)
            if ax > bx:
                bx = ax
            ay = abs(y)
            if ay > by:
                by = ay
            az = abs(z)
            if az > bz:
                bz = az
    ext[0] = bx
    ext[1] = by
    ext[2] = bz
    return np.sqrt(r2)


@njit(cache=True)
def _ws_cut(fnv, fvx, fnb, fpl, nf, sides, polyb, chor,
            ux, uy, uz, s, nb_gid):
    """Clip the cell by half-space {y: y.u <= s}.

    Returns (new_nf, cut_flag, alive_flag):
      cut_flag 0 = plane missed, 1 = cell modified, -1 = face capacity hit.
    """
    any_out = False
    any_in = False
    for f in range(nf):
        m = fnv[f]
        for k in range(m):
            d = fvx[f, k, 0] * ux + fvx[f, k, 1] * uy + fvx[f, k, 2] * uz - s
            sides[f, k] = d
            if d > EPS_ON:
                any_out = True
            elif d < -EPS_ON:
                any_in = True
    if not any_out:
        return nf, 0, True
    if not any_in:
        return 0, 1, False
    nchord = 0
    for f in range(nf):
        m = fnv[f]
        if m == 0:
            continue
        fmax = -1.0e300
        fmin = 1.0e300
        for k in range(m):
            d = sides[f, k]
            if d > fmax:
                fmax = d
            if d < fmin:
                fmin = d
        if fmax <= EPS_ON:
            # face kept whole; vertices on the plane seed the new face
            if fmax >= -EPS_ON:
                for k in range(m):
                    if sides[f, k] >= -EPS_ON and nchord < chor.shape[0]:
                        chor[nchord, 0] = fvx[f, k, 0]
                        chor[nchord, 1] = fvx[f, k, 1]
                        chor[nchord, 2] = fvx[f, k, 2]
                        nchord += 1
            continue
        if fmin >= -EPS_ON:
            # face fully removed; coplanar vertices still seed the new face
            for k in range(m):
                if sides[f, k] <= EPS_ON and nchord < chor.shape[0]:
                    chor[nchord, 0] = fvx[f, k, 0]
                    chor[nchord, 1] = fvx[f, k, 1]
                    chor[nchord, 2] = fvx[f, k, 2]
                    nchord += 1
            fnv[f] = 0
            continue
        # genuine crossing: Sutherland-Hodgman into polyb
        out = 0
        for k in range(m):
            k2 = k + 1
            if k2 == m:
                k2 = 0
            da = sides[f, k]
            db = sides[f, k2]
            if da <= EPS_ON:
                if out >= MAXFV:
                    return nf, -1, True
                polyb[out, 0] = fvx[f, k, 0]
                polyb[out, 1] = fvx[f, k, 1]
                polyb[out, 2] = fvx[f, k, 2]
                out += 1
                if da >= -EPS_ON and nchord < chor.shape[0]:
                    chor[nchord, 0] = fvx[f, k, 0]
                    chor[nchord, 1] = fvx[f, k, 1]
                    chor[nchord, 2] = fvx[f, k, 2]
                    nchord += 1
            if (da < -EPS_ON and db > EPS_ON) or (da > EPS_ON and db < -EPS_ON):
                t = da / (da - db)
                px = fvx[f, k, 0] + t * (fvx[f, k2, 0] - fvx[f, k, 0])
                py = fvx[f, k, 1] + t * (fvx[f, k2, 1] - fvx[f, k, 1])
                pz = fvx[f, k, 2] + t * (fvx[f, k2, 2] - fvx[f, k, 2])
                if out >= MAXFV:
                    return nf, -1, True
                polyb[out, 0] = px
                polyb[out, 1] = py
                polyb[out, 2] = pz
                out += 1
                if nchord < chor.shape[0]:
                    chor[nchord, 0] = px
                    chor[nchord, 1] = py
                    chor[nchord, 2] = pz
                    nchord += 1
        if out < 3:
            fnv[f] = 0
        else:
            fnv[f] = out
            for k in range(out):
                fvx[f, k, 0] = polyb[k, 0]
                fvx[f, k, 1] = polyb[k, 1]
                fvx[f, k, 2] = polyb[k, 2]
    # assemble the closing face from welded chord points
    uniq = 0
    for i in range(nchord):
        dup = False
        for j in range(uniq):
            dx = chor[i, 0] - polyb[j, 0]
            dy = chor[i, 1] - polyb[j, 1]
            dz = chor[i, 2] - polyb[j, 2]
            if dx * dx + dy * dy + dz * dz < EPS_WELD * EPS_WELD:
                dup = True
                break
        if not dup:
            if uniq >= MAXFV:
                return nf, -1, True
            polyb[uniq, 0] = chor[i, 0]
            polyb[uniq, 1] = chor[i, 1]
            polyb[uniq, 2] = chor[i, 2]
            uniq += 1
    alive = False
    for f in range(nf):
        if fnv[f] >= 3:
            alive = True
            break
    if uniq >= 3 and alive:
        # angular sort around the centroid in a plane basis (e1, e2, u)
        cx = 0.0
        cy = 0.0
        cz = 0.0
        for i in range(uniq):
            cx += polyb[i, 0]
            cy += polyb[i, 1]
            cz += polyb[i, 2]
        cx /= uniq
        cy /= uniq
        cz /= uniq
        ax, ay, az = abs(ux), abs(uy), abs(uz)
        if ax <= ay and ax <= az:
            e1x, e1y, e1z = 0.0, -uz, uy
        elif ay <= az:
            e1x, e1y, e1z = uz, 0.0, -ux
        else:
            e1x, e1y, e1z = -uy, ux, 0.0
        nrm = np.sqrt(e1x * e1x + e1y * e1y + e1z * e1z)
        e1x /= nrm
        e1y /= nrm
        e1z /= nrm
        e2x = uy * e1z - uz * e1y
        e2y = uz * e1x - ux * e1z
        e2z = ux * e1y - uy * e1x
        angs = sides[0]  # reuse scratch row
        for i in range(uniq):
            dx = polyb[i, 0] - cx
            dy = polyb[i, 1] - cy
            dz = polyb[i, 2] - cz
            angs[i] = np.arctan2(dx * e2x + dy * e2y + dz * e2z,
                                 dx * e1x + dy * e1y + dz * e1z)
        # insertion sort points by angle
        for i in range(1, uniq):
            a = angs[i]
            px, py, pz = polyb[i, 0], polyb[i, 1], polyb[i, 2]
            j = i - 1
            while j >= 0 and angs[j] > a:
                angs[j + 1] = angs[j]
                polyb[j + 1, 0] = polyb[j, 0]
                polyb[j + 1, 1] = polyb[j, 1]
                polyb[j + 1, 2] = polyb[j, 2]
                j -= 1
            angs[j + 1] = a
            polyb[j + 1, 0] = px
            polyb[j + 1, 1] = py
            polyb[j + 1, 2] = pz
        # reuse a dead face slot if possible
        slot = -1
        for f in range(nf):
            if fnv[f] == 0:
                slot = f
                break
        if slot < 0:
            if nf >= MAXF:
                return nf, -1, True
            slot = nf
            nf += 1
        fnv[slot] = uniq
        for k in range(uniq):
            fvx[slot, k, 0] = polyb[k, 0]
            fvx[slot, k, 1] = polyb[k, 1]
            fvx[slot, k, 2] = polyb[k, 2]
        fnb[slot] = nb_gid
        fpl[slot, 0] = ux
        fpl[slot, 1] = uy
        fpl[slot, 2] = uz
        fpl[slot, 3] = s
    return nf, 1, alive


# ---------------------------------------------------------------------------
# single-cell build
# ---------------------------------------------------------------------------

@njit(cache=True)
def build_cell(qx, qy, qz, qr, own_gid, self_idx, skip_idx,
               pos, rad, gid, n, m, ghead, gnext,
               fnv, fvx, fnb, fpl, sides, polyb, chor,
               cw, cr2, cj, cs, sidx, sstack,
               maxr2, rs_hint):
    """Clip the periodic power cell of a (possibly virtual) generator.

    The query generator may coincide with config row self_idx (rebuild) or be
    virtual (self_idx = -1, e.g. an insertion proposal); skip_idx marks a
    generator to ignore entirely (deletion proposals).  Returns
    (status, nf, rmax); the face workspace holds the resulting polytope.
    """
    qr2 = qr * qr
    use_brute = n <= N_BRUTE or m < 8
    # initial search radius: solve (rs^2 + qr2 - maxr2) / (2 rs) = rm_guess
    rm_guess = rs_hint
    if rm_guess < 0.02:
        rm_guess = 0.02
    disc0 = rm_guess * rm_guess - qr2 + maxr2
    if disc0 < 0.0:
        disc0 = 0.0
    rs = (rm_guess + np.sqrt(disc0)) * 1.02
    ext = np.empty(3, np.float64)
    attempts = 0
    while True:
        attempts += 1
        nf = _ws_init_cube(fnv, fvx, fnb, fpl, own_gid)
        rmax = 0.8660254037844387
        ext[0] = 0.5
        ext[1] = 0.5
        ext[2] = 0.5
        if use_brute:
            cnt = _gather_brute(qx, qy, qz, self_idx, skip_idx, pos, rad, n,
                                cw, cr2, cj, cs, qr2)
        else:
            if rs > 0.45:
                use_brute = True
                continue
            cnt = _gather_grid(qx, qy, qz, rs, self_idx, skip_idx,
                               pos, rad, n, m, ghead, gnext,
                               cw, cr2, cj, cs, qr2)
        if cnt < 0:
            return cnt, 0, 0.0
        _argsort_f8(cs, sidx, cnt, sstack)
        alive = True
        for kk in range(cnt):
            c = sidx[kk]
            s = cs[c]
            if s > rmax + EPS_GUARD:
                break
            d2 = cw[c, 0] ** 2 + cw[c, 1] ** 2 + cw[c, 2] ** 2
            d = np.sqrt(d2)
            ux = cw[c, 0] / d
            uy = cw[c, 1] / d
            uz = cw[c, 2] / d
            # box support bound: the plane cannot reach the cell
            if s > ext[0] * abs(ux) + ext[1] * abs(uy) + ext[2] * abs(uz)                     + EPS_GUARD:
                continue
            nf, cut, alive = _ws_cut(fnv, fvx, fnb, fpl, nf, sides, polyb,
                                     chor, ux, uy, uz, s, gid[cj[c]])
            if cut < 0:
                return ERR_CAPACITY, 0, 0.0
            if not alive:
                return OK, 0, 0.0
            if cut == 1:
                rmax = _ws_extents(fnv, fvx, nf, ext)
        if use_brute:
            return OK, nf, rmax
        s_beyond = (rs * rs + qr2 - maxr2) / (2.0 * rs)
        if s_beyond > rmax + EPS_GUARD:
            return OK, nf, rmax
        disc = rmax * rmax - qr2 + maxr2
        if disc < 0.0:
            disc = 0.0
        need = rmax + np.sqrt(disc)
        rs = need * 1.05
        if rs > 0.45 or attempts >= 4:
            use_brute = True


@njit(cache=True)
def finalize_cell(fnv, fvx, fnb, fpl, nf, own_gid,
                  vout, hkeys, hstamp, hval, hgen,
                  verts_out, nbg_out, face_gid_out, face_h_out):
    """Derive volume, centroid, h-stats, welded vertices and neighbours.

    Writes welded vertices into verts_out, unique non-self neighbour gids into
    nbg_out, per-face (gid, plane distance) into face_gid/h_out.
    Returns (status, vol, cx, cy, cz, rmax, hmin, hmax, nof, nv, nnb, nfaces).
    vout is an 8-slot scratch.
    """
    if nf == 0:
        return OK, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0, 0, 0, 0
    vol6 = 0.0
    cx = 0.0
    cy = 0.0
    cz = 0.0
    for f in range(nf):
        mv = fnv[f]
        if mv < 3:
            continue
        x0, y0, z0 = fvx[f, 0, 0], fvx[f, 0, 1], fvx[f, 0, 2]
        for k in range(1, mv - 1):
            x1, y1, z1 = fvx[f, k, 0], fvx[f, k, 1], fvx[f, k, 2]
            x2, y2, z2 = fvx[f, k + 1, 0], fvx[f, k + 1, 1], fvx[f, k + 1, 2]
            det = (x0 * (y1 * z2 - z1 * y2)
                   - y0 * (x1 * z2 - z1 * x2)
                   + z0 * (x1 * y2 - y1 * x2))
            vol6 += det
            cx += det * (x0 + x1 + x2)
            cy += det * (y0 + y1 + y2)
            cz += det * (z0 + z1 + z2)
    vol = vol6 / 6.0
    if vol <= EPS_EMPTY:
        return OK, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0, 0, 0, 0
    cx /= 4.0 * vol6
    cy /= 4.0 * vol6
    cz /= 4.0 * vol6
    # h statistics over the reported face list: non-self faces when any
    # exist, otherwise the self-adjacent faces (single-generator cube case)
    n_real = 0
    for f in range(nf):
        if fnv[f] >= 3 and fnb[f] != own_gid:
            n_real += 1
    use_self = n_real == 0
    hmin = 1.0e300
    hmax = 0.0
    nof = 0
    nfaces = 0
    nnb = 0
    for f in range(nf):
        if fnv[f] < 3:
            continue
        is_self = fnb[f] == own_gid
        if is_self and not use_self:
            continue
        h = fpl[f, 3] - (cx * fpl[f, 0] + cy * fpl[f, 1] + cz * fpl[f, 2])
        if nfaces >= face_gid_out.shape[0]:
            return ERR_CAPACITY, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0, 0, 0, 0
        face_gid_out[nfaces] = fnb[f]
        face_h_out[nfaces] = h
        nfaces += 1
        if h < hmin:
            hmin = h
        if h > hmax:
            hmax = h
        nof += 1
        if not is_self:
            dup = False
            for q in range(nnb):
                if nbg_out[q] == fnb[f]:
                    dup = True
                    break
            if not dup:
                if nnb >= nbg_out.shape[0]:
                    return ERR_CAPACITY, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0, 0, 0, 0
                nbg_out[nnb] = fnb[f]
                nnb += 1
    # welded vertex set via quantised hash (duplicates across faces collapse)
    hgen[0] += 1
    gen = hgen[0]
    nv = 0
    rmax2 = 0.0
    for f in range(nf):
        mv = fnv[f]
        if mv < 3:
            continue
        for k in range(mv):
            x = fvx[f, k, 0]
            y = fvx[f, k, 1]
            z = fvx[f, k, 2]
            d2 = x * x + y * y + z * z
            if d2 > rmax2:
                rmax2 = d2
            qx = np.int64(np.floor(x / EPS_WELD + 0.5))
            qy = np.int64(np.floor(y / EPS_WELD + 0.5))
            qz = np.int64(np.floor(z / EPS_WELD + 0.5))
            key = (qx * np.int64(73856093) + qy * np.int64(19349663)
                   + qz * np.int64(83492791))
            hidx = (key ^ (key >> np.int64(17))) & np.int64(HSZ - 1)
            placed = False
            while True:
                if hstamp[hidx] != gen:
                    hstamp[hidx] = gen
                    hkeys[hidx] = key
                    hval[hidx] = nv
                    placed = True
                    break
                if hkeys[hidx] == key:
                    # hash hit: confirm it really is the same vertex
                    w = hval[hidx]
                    dx = verts_out[w, 0] - x
                    dy = verts_out[w, 1] - y
                    dz = verts_out[w, 2] - z
                    if dx * dx + dy * dy + dz * dz < 4.0 * EPS_WELD * EPS_WELD:
                        break
                hidx = (hidx + 1) & np.int64(HSZ - 1)
            if placed:
                if nv >= verts_out.shape[0]:
                    return ERR_CAPACITY, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0, 0, 0, 0
                verts_out[nv, 0] = x
                verts_out[nv, 1] = y
                verts_out[nv, 2] = z
                nv += 1
    return OK, vol, cx, cy, cz, np.sqrt(rmax2), hmin, hmax, nof, nv, nnb, nfaces


# ---------------------------------------------------------------------------
# persistent tessellation store
# ---------------------------------------------------------------------------

@njit(cache=True)
def store_cell(i, own_gid, qx, qy, qz, nf,
               fnv, fvx, fnb, fpl,
               vol, bary, rmax, hmin, hmax, nof, nv, verts, nnb, nbg,
               nfc, fgid, fh,
               hkeys, hstamp, hval, hgen, vout):
    st, v, cx, cy, cz, rm, h0, h1, nofc, nvc, nnbc, nfcc = finalize_cell(
        fnv, fvx, fnb, fpl, nf, own_gid,
        vout, hkeys, hstamp, hval, hgen,
        verts[i], nbg[i], fgid[i], fh[i])
    if st != OK:
        return st
    vol[i] = v
    bary[i, 0] = wrap01(qx + cx)
    bary[i, 1] = wrap01(qy + cy)
    bary[i, 2] = wrap01(qz + cz)
    rmax[i] = rm
    hmin[i] = h0
    hmax[i] = h1
    nof[i] = nofc
    nv[i] = nvc
    nnb[i] = nnbc
    nfc[i] = nfcc
    return OK


@njit(cache=True)
def full_build(CFG, GRD, TES, WS, imeta, fmeta):
    """Build every cell from scratch.  Returns status."""
    pos, rad, gid, id2idx = CFG
    ghead, gnext = GRD
    (vol, bary, rmax, hmin, hmax, nof, nv, verts, nnb, nbg,
     nfc, fgid, fh) = TES
    (fnv, fvx, fnb, fpl, sides, polyb, chor, cw, cr2, cj, cs, sidx,
     sstack, hkeys, hstamp, hval, hgen, vout) = WS
    n = imeta[0]
    m = imeta[2]
    maxr2 = 0.0
    for i in range(n):
        if rad[i] * rad[i] > maxr2:
            maxr2 = rad[i] * rad[i]
    fmeta[2] = maxr2
    rhat = fmeta[3]
    if rhat <= 0.0:
        rhat = 1.2 / np.cbrt(max(n, 1))
    vsum = 0.0
    rub = 0.0
    nonempty = 0
    for i in range(n):
        st, nf, rm = build_cell(pos[i, 0], pos[i, 1], pos[i, 2], rad[i],
                                gid[i], i, -1,
                                pos, rad, gid, n, m, ghead, gnext,
                                fnv, fvx, fnb, fpl, sides, polyb, chor,
                                cw, cr2, cj, cs, sidx, sstack,
                                maxr2, 1.6 * rhat)
        if st != OK:
            return st
        st = store_cell(i, gid[i], pos[i, 0], pos[i, 1], pos[i, 2], nf,
                        fnv, fvx, fnb, fpl,
                        vol, bary, rmax, hmin, hmax, nof, nv, verts, nnb,
                        nbg, nfc, fgid, fh,
                        hkeys, hstamp, hval, hgen, vout)
        if st != OK:
            return st
        vsum += vol[i]
        if vol[i] > 0.0:
            nonempty += 1
            rhat = 0.98 * rhat + 0.02 * rmax[i]
            if rmax[i] > rub:
                rub = rmax[i]
    fmeta[1] = rub
    fmeta[3] = rhat
    if n > 0 and abs(vsum - 1.0) > 1e-9 * n:
        return ERR_VOLUME_SUM
    # drop faces that point at empty-cell generators (degenerate contacts)
    for i in range(n):
        if vol[i] <= 0.0:
            continue
        drop = False
        for q in range(nnb[i]):
            j = id2idx[nbg[i, q]]
            if j < 0 or vol[j] <= 0.0:
                drop = True
                break
        if drop:
            _drop_phantoms_main(i, CFG, TES)
    return OK


@njit(cache=True)
def _drop_phantoms_main(i, CFG, TES):
    pos, rad, gid, id2idx = CFG
    (vol, bary, rmax, hmin, hmax, nof, nv, verts, nnb, nbg,
     nfc, fgid, fh) = TES
    own = gid[i]
    nf2 = 0
    h0 = 1.0e300
    h1 = 0.0
    nb2 = 0
    n_real = 0
    for f in range(nfc[i]):
        g = fgid[i, f]
        if g != own:
            j = id2idx[g]
            if j < 0 or vol[j] <= 0.0:
                continue
            n_real += 1
    for f in range(nfc[i]):
        g = fgid[i, f]
        is_self = g == own
        if not is_self:
            j = id2idx[g]
            if j < 0 or vol[j] <= 0.0:
                continue
        if is_self and n_real > 0:
            continue
        fgid[i, nf2] = g
        fh[i, nf2] = fh[i, f]
        if fh[i, f] < h0:
            h0 = fh[i, f]
        if fh[i, f] > h1:
            h1 = fh[i, f]
        nf2 += 1
        if not is_self:
            dup = False
            for q in range(nb2):
                if nbg[i, q] == g:
                    dup = True
                    break
            if not dup:
                nbg[i, nb2] = g
                nb2 += 1
    nfc[i] = nf2
    nof[i] = nf2
    hmin[i] = h0
    hmax[i] = h1
    nnb[i] = nb2


# ---------------------------------------------------------------------------
# affected-cell detection (exact vertex test with a conservative margin)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _cell_is_cut(i, qx, qy, qz, qr2, pos, rad, rmax, verts, nv):
    dx = wraphalf(qx - pos[i, 0])
    dy = wraphalf(qy - pos[i, 1])
    dz = wraphalf(qz - pos[i, 2])
    d2 = dx * dx + dy * dy + dz * dz
    disc = rmax[i] * rmax[i] - rad[i] * rad[i] + qr2
    if disc < 0.0:
        return False
    bnd = rmax[i] + np.sqrt(disc)
    if d2 > bnd * bnd:
        return False
    r2own = rad[i] * rad[i]
    for k in range(nv[i]):
        vx = verts[i, k, 0]
        vy = verts[i, k, 1]
        vz = verts[i, k, 2]
        wx = wraphalf(dx - vx)
        wy = wraphalf(dy - vy)
        wz = wraphalf(dz - vz)
        pw = wx * wx + wy * wy + wz * wz - qr2
        own = vx * vx + vy * vy + vz * vz - r2own
        if pw <= own + EPS_AFF:
            return True
    return False


@njit(cache=True)
def collect_cut_cells(qx, qy, qz, qr, skip_idx, exclude_idx,
                      CFG, GRD, TES, imeta, fmeta,
                      aff, tslot, astamp, gen, na):
    """Append every cell whose polytope the radical plane of (q, qr) can
    reach.  Exact up to EPS_AFF slack (affected-superset contract)."""
    pos, rad, gid, id2idx = CFG
    ghead, gnext = GRD
    (vol, bary, rmax, hmin, hmax, nof, nv, verts, nnb, nbg,
     nfc, fgid, fh) = TES
    n = imeta[0]
    m = imeta[2]
    qr2 = qr * qr
    rub = fmeta[1]
    rpref = rub + np.sqrt(rub * rub + qr2) + 1e-9
    if n <= N_BRUTE or m < 8 or rpref >= 0.45:
        for i in range(n):
            if i == skip_idx or i == exclude_idx or astamp[i] == gen:
                continue
            if _cell_is_cut(i, qx, qy, qz, qr2, pos, rad, rmax, verts, nv):
                if na >= AMAX:
                    return ERR_AFF_OVERFLOW
                aff[na] = i
                astamp[i] = gen
                tslot[i] = -1
                na += 1
        return na
    lo0 = int(np.floor((qx - rpref) * m))
    hi0 = int(np.floor((qx + rpref) * m))
    lo1 = int(np.floor((qy - rpref) * m))
    hi1 = int(np.floor((qy + rpref) * m))
    lo2 = int(np.floor((qz - rpref) * m))
    hi2 = int(np.floor((qz + rpref) * m))
    for a in range(lo0, hi0 + 1):
        ia = a % m
        if ia < 0:
            ia += m
        for b in range(lo1, hi1 + 1):
            ib = b % m
            if ib < 0:
                ib += m
            for c in range(lo2, hi2 + 1):
                ic = c % m
                if ic < 0:
                    ic += m
                i = ghead[(ia * m + ib) * m + ic]
                while i >= 0:
                    if (i != skip_idx and i != exclude_idx
                            and astamp[i] != gen):
                        if _cell_is_cut(i, qx, qy, qz, qr2, pos, rad,
                                        rmax, verts, nv):
                            if na >= AMAX:
                                return ERR_AFF_OVERFLOW
                            aff[na] = i
                            astamp[i] = gen
                            tslot[i] = -1
                            na += 1
                    i = gnext[i]
    return na


# ---------------------------------------------------------------------------
# proposal rebuild (queue with a fix-point safety pass)
# ---------------------------------------------------------------------------

@njit(cache=True)
def rebuild_affected(CFG, GRD, TES, WS, TMP, imeta, fmeta, gen, na, skip_idx):
    """Build temp cells for every config index in aff[0:na]; the queue grows
    if a rebuilt cell acquires a face with a cell whose old geometry did not
    know it.  Returns (status, na)."""
    pos, rad, gid, id2idx = CFG
    ghead, gnext = GRD
    (vol, bary, rmax, hmin, hmax, nof, nv, verts, nnb, nbg,
     nfc, fgid, fh) = TES
    (fnv, fvx, fnb, fpl, sides, polyb, chor, cw, cr2, cj, cs, sidx,
     sstack, hkeys, hstamp, hval, hgen, vout) = WS
    (aff, tslot, astamp, t_vol, t_bary, t_rmax, t_hmin, t_hmax, t_nof,
     t_nv, t_verts, t_nnb, t_nbg, t_empty, t_nfc, t_fgid, t_fh) = TMP
    n = imeta[0]
    m = imeta[2]
    maxr2 = fmeta[2]
    rhat = fmeta[3]
    na0 = na
    built = 0
    scanned = 0
    rounds = 0
    while built < na:
        while built < na:
            idx = aff[built]
            if vol[idx] > 0.0 and rmax[idx] > 0.0:
                hint = 1.25 * rmax[idx]
            else:
                hint = 1.6 * rhat
            st, nf, rm = build_cell(pos[idx, 0], pos[idx, 1], pos[idx, 2],
                                    rad[idx], gid[idx], idx, skip_idx,
                                    pos, rad, gid, n, m, ghead, gnext,
                                    fnv, fvx, fnb, fpl, sides, polyb, chor,
                                    cw, cr2, cj, cs, sidx, sstack,
                                    maxr2, hint)
            if st != OK:
                return st, na
            k = built
            st2, v, cx, cy, cz, rm2, h0, h1, nofc, nvc, nnbc, nfcc = \
                finalize_cell(fnv, fvx, fnb, fpl, nf, gid[idx],
                              vout, hkeys, hstamp, hval, hgen,
                              t_verts[k], t_nbg[k], t_fgid[k], t_fh[k])
            if st2 != OK:
                return st2, na
            t_vol[k] = v
            t_bary[k, 0] = wrap01(pos[idx, 0] + cx)
            t_bary[k, 1] = wrap01(pos[idx, 1] + cy)
            t_bary[k, 2] = wrap01(pos[idx, 2] + cz)
            t_rmax[k] = rm2
            t_hmin[k] = h0
            t_hmax[k] = h1
            t_nof[k] = nofc
            t_nv[k] = nvc
            t_nnb[k] = nnbc
            t_nfc[k] = nfcc
            t_empty[k] = v <= 0.0
            tslot[idx] = k
            built += 1
        # fix-point: a rebuilt cell may touch a cell outside the set whose
        # stored geometry does not list it; that cell changed too
        while scanned < built:
            k = scanned
            idx = aff[k]
            cgid = gid[idx]
            for q in range(t_nnb[k]):
                hgid2 = t_nbg[k, q]
                hidx = id2idx[hgid2]
                if hidx < 0:
                    return ERR_NEIGHBOR_MISSING, na
                if astamp[hidx] == gen or hidx == skip_idx:
                    continue
                known = False
                for p in range(nnb[hidx]):
                    if nbg[hidx, p] == cgid:
                        known = True
                        break
                if not known:
                    if na >= AMAX:
                        return ERR_AFF_OVERFLOW, na
                    aff[na] = hidx
                    astamp[hidx] = gen
                    tslot[hidx] = -1
                    na += 1
            scanned += 1
        rounds += 1
        if rounds > 12:
            return ERR_FIXPOINT, na
    imeta[13] += na - na0
    return OK, na


@njit(cache=True)
def drop_phantom_temp(TMP, CFG, gen, na):
    """Remove temp faces pointing at cells that are empty in the proposal."""
    pos, rad, gid, id2idx = CFG
    (aff, tslot, astamp, t_vol, t_bary, t_rmax, t_hmin, t_hmax, t_nof,
     t_nv, t_verts, t_nnb, t_nbg, t_empty, t_nfc, t_fgid, t_fh) = TMP
    for k in range(na):
        if t_empty[k]:
            continue
        idx = aff[k]
        own = gid[idx]
        drop = False
        for q in range(t_nnb[k]):
            hidx = id2idx[t_nbg[k, q]]
            if hidx >= 0 and astamp[hidx] == gen and tslot[hidx] >= 0:
                if t_empty[tslot[hidx]]:
                    drop = True
                    break
        if not drop:
            continue
        nf2 = 0
        h0 = 1.0e300
        h1 = 0.0
        nb2 = 0
        n_real = 0
        for f in range(t_nfc[k]):
            g = t_fgid[k, f]
            if g == own:
                continue
            hidx = id2idx[g]
            if hidx >= 0 and astamp[hidx] == gen and tslot[hidx] >= 0 \
                    and t_empty[tslot[hidx]]:
                continue
            n_real += 1
        for f in range(t_nfc[k]):
            g = t_fgid[k, f]
            is_self = g == own
            if not is_self:
                hidx = id2idx[g]
                if hidx >= 0 and astamp[hidx] == gen and tslot[hidx] >= 0 \
                        and t_empty[tslot[hidx]]:
                    continue
            if is_self and n_real > 0:
                continue
            t_fgid[k, nf2] = g
            t_fh[k, nf2] = t_fh[k, f]
            if t_fh[k, f] < h0:
                h0 = t_fh[k, f]
            if t_fh[k, f] > h1:
                h1 = t_fh[k, f]
            nf2 += 1
            if not is_self:
                dup = False
                for p in range(nb2):
                    if t_nbg[k, p] == g:
                        dup = True
                        break
                if not dup:
                    t_nbg[k, nb2] = g
                    nb2 += 1
        t_nfc[k] = nf2
        t_nof[k] = nf2
        t_hmin[k] = h0
        t_hmax[k] = h1
        t_nnb[k] = nb2

# ---------------------------------------------------------------------------
# energy aggregates
# ---------------------------------------------------------------------------

@njit(cache=True)
def _nvr(v1, v2):
    if v1 >= v2:
        return np.sqrt(v1 / v2 - 1.0)
    return np.sqrt(v2 / v1 - 1.0)


@njit(cache=True)
def _pair_stat(kind, v1, v2):
    if kind == CH_NVR:
        return _nvr(v1, v2)
    return abs(v1 - v2)


@njit(cache=True)
def _cell_stat(kind, volv, nofv, radv):
    if kind == CH_NOF:
        return np.float64(nofv)
    if kind == CH_VOL:
        return volv
    return radv


@njit(cache=True)
def _bin_index(breaks, J, v):
    # half-open bins [b_i, b_{i+1}), last bin closed; out-of-range clamps
    lo = 0
    hi = J + 1
    while lo < hi:
        mid = (lo + hi) >> 1
        if breaks[mid] > v:
            hi = mid
        else:
            lo = mid + 1
    raw = lo - 1
    if raw < 0:
        raw = 0
    if raw > J - 1:
        raw = J - 1
    return raw


@njit(cache=True)
def _hc_violated(hc, h0, h1, volv):
    if hc[0] == hc[0] and h0 <= hc[0]:
        return True
    if hc[1] == hc[1] and h1 >= hc[1]:
        return True
    if hc[2] == hc[2] and h1 * h1 * h1 >= hc[2] * volv:
        return True
    return False


@njit(cache=True)
def agg_cell(MOD, agg, rk_agg, rk_bins, volv, nofv, radv, w):
    hc, pairp, rk_kind, rk_func, rk_theta, rk_s0, rk_J, rk_breaks, rk_target, imod = MOD
    agg[0] += w
    K = imod[1]
    for t in range(K):
        kind = rk_kind[t]
        if kind == CH_NVR or kind == CH_VOLDIFF:
            continue
        v = _cell_stat(kind, volv, nofv, radv)
        if rk_func[t] == F_DSC:
            rk_bins[t, _bin_index(rk_breaks[t], rk_J[t], v)] += w
        else:
            rk_agg[t, 0] += w
            rk_agg[t, 1] += w * v
            rk_agg[t, 2] += w * v * v


@njit(cache=True)
def agg_pair(MOD, agg, rk_agg, rk_bins, v1, v2, w):
    hc, pairp, rk_kind, rk_func, rk_theta, rk_s0, rk_J, rk_breaks, rk_target, imod = MOD
    agg[1] += w
    if imod[0] == 1:
        raw = _nvr(v1, v2)
        if raw > pairp[1]:
            raw = pairp[1]
        agg[2] += w * raw
    K = imod[1]
    for t in range(K):
        kind = rk_kind[t]
        if kind != CH_NVR and kind != CH_VOLDIFF:
            continue
        v = _pair_stat(kind, v1, v2)
        if rk_func[t] == F_DSC:
            rk_bins[t, _bin_index(rk_breaks[t], rk_J[t], v)] += w
        else:
            rk_agg[t, 0] += w
            rk_agg[t, 1] += w * v
            rk_agg[t, 2] += w * v * v


@njit(cache=True)
def energy_total_agg(MOD, agg, rk_agg, rk_bins):
    hc, pairp, rk_kind, rk_func, rk_theta, rk_s0, rk_J, rk_breaks, rk_target, imod = MOD
    tot = 0.0
    if imod[0] == 1:
        tot += pairp[0] * agg[2]
    K = imod[1]
    for t in range(K):
        fn = rk_func[t]
        if fn == F_DSC:
            S = 0.0
            J = rk_J[t]
            for j in range(J):
                S += rk_bins[t, j]
            if S <= 0.0:
                return INF
            d = 0.0
            for j in range(J):
                d += abs(rk_bins[t, j] / S - rk_target[t, j])
            tot += rk_theta[t] * np.sqrt(d)
        elif fn == F_MEAN:
            cnt = rk_agg[t, 0]
            if cnt < 0.5:
                return INF
            T = rk_agg[t, 1] / cnt
            tot += rk_theta[t] * np.sqrt(abs(T - rk_s0[t]))
        else:
            cnt = rk_agg[t, 0]
            if cnt < 1.5:
                return INF
            var = (rk_agg[t, 2] - rk_agg[t, 1] * rk_agg[t, 1] / cnt) / (cnt - 1.0)
            if var < 0.0:
                var = 0.0
            tot += rk_theta[t] * np.sqrt(abs(var - rk_s0[t]))
    return tot


@njit(cache=True)
def agg_recompute(CFG, TES, MOD, agg, rk_agg, rk_bins, imeta):
    """Rebuild all aggregates from the stored tessellation."""
    pos, rad, gid, id2idx = CFG
    (vol, bary, rmax, hmin, hmax, nof, nv, verts, nnb, nbg,
     nfc, fgid, fh) = TES
    n = imeta[0]
    for q in range(agg.shape[0]):
        agg[q] = 0.0
    for t in range(rk_agg.shape[0]):
        for q in range(rk_agg.shape[1]):
            rk_agg[t, q] = 0.0
        for q in range(rk_bins.shape[1]):
            rk_bins[t, q] = 0.0
    for i in range(n):
        if vol[i] <= 0.0:
            continue
        agg_cell(MOD, agg, rk_agg, rk_bins, vol[i], nof[i], rad[i], 1.0)
        for q in range(nnb[i]):
            hgid2 = nbg[i, q]
            if gid[i] < hgid2:
                j = id2idx[hgid2]
                if j >= 0 and vol[j] > 0.0:
                    agg_pair(MOD, agg, rk_agg, rk_bins, vol[i], vol[j], 1.0)
    return OK


@njit(cache=True)
def hardcore_all_ok(TES, MOD, imeta):
    hc = MOD[0]
    (vol, bary, rmax, hmin, hmax, nof, nv, verts, nnb, nbg,
     nfc, fgid, fh) = TES
    if not (hc[0] == hc[0] or hc[1] == hc[1] or hc[2] == hc[2]):
        return True
    for i in range(imeta[0]):
        if vol[i] > 0.0 and _hc_violated(hc, hmin[i], hmax[i], vol[i]):
            return False
    return True


# ---------------------------------------------------------------------------
# proposal delta, commit, rollback
# ---------------------------------------------------------------------------

@njit(cache=True)
def copy_agg(agg, rk_agg, rk_bins, tagg, trk_agg, trk_bins, K):
    for q in range(agg.shape[0]):
        tagg[q] = agg[q]
    for t in range(K):
        for q in range(rk_agg.shape[1]):
            trk_agg[t, q] = rk_agg[t, q]
        for q in range(rk_bins.shape[1]):
            trk_bins[t, q] = rk_bins[t, q]


@njit(cache=True)
def delta_apply(CFG, TES, TMP, MOD, tagg, trk_agg, trk_bins,
                gen, na, new_idx, victim_idx, victim_vol, victim_nof,
                victim_rad, victim_nnb, victim_nbg, moved_idx, moved_oldrad):
    """Remove old contributions of affected cells (and the death victim),
    add the rebuilt ones, into the temp aggregates."""
    pos, rad, gid, id2idx = CFG
    (vol, bary, rmax, hmin, hmax, nof, nv, verts, nnb, nbg,
     nfc, fgid, fh) = TES
    (aff, tslot, astamp, t_vol, t_bary, t_rmax, t_hmin, t_hmax, t_nof,
     t_nv, t_verts, t_nnb, t_nbg, t_empty, t_nfc, t_fgid, t_fh) = TMP
    # removals
    for k in range(na):
        idx = aff[k]
        if idx == new_idx:
            continue
        radv = rad[idx]
        if idx == moved_idx:
            radv = moved_oldrad
        if vol[idx] <= 0.0:
            continue
        agg_cell(MOD, tagg, trk_agg, trk_bins, vol[idx], nof[idx], radv, -1.0)
        for q in range(nnb[idx]):
            hgid2 = nbg[idx, q]
            hidx = id2idx[hgid2]
            if hidx < 0:
                return ERR_NEIGHBOR_MISSING
            if astamp[hidx] == gen and gid[idx] > hgid2:
                continue
            if vol[hidx] <= 0.0:
                continue
            agg_pair(MOD, tagg, trk_agg, trk_bins, vol[idx], vol[hidx], -1.0)
    if victim_idx >= 0:
        agg_cell(MOD, tagg, trk_agg, trk_bins, victim_vol, victim_nof,
                 victim_rad, -1.0)
        vgid = gid[victim_idx]
        for q in range(victim_nnb):
            hgid2 = victim_nbg[q]
            hidx = id2idx[hgid2]
            if hidx < 0:
                return ERR_NEIGHBOR_MISSING
            if astamp[hidx] == gen and vgid > hgid2:
                continue
            if vol[hidx] <= 0.0:
                continue
            agg_pair(MOD, tagg, trk_agg, trk_bins, victim_vol, vol[hidx], -1.0)
    # additions
    for k in range(na):
        if t_empty[k]:
            continue
        idx = aff[k]
        agg_cell(MOD, tagg, trk_agg, trk_bins, t_vol[k], t_nof[k], rad[idx], 1.0)
        cgid = gid[idx]
        for q in range(t_nnb[k]):
            hgid2 = t_nbg[k, q]
            hidx = id2idx[hgid2]
            if hidx < 0:
                return ERR_NEIGHBOR_MISSING
            if astamp[hidx] == gen:
                if cgid > hgid2:
                    continue
                ks = tslot[hidx]
                if ks < 0 or t_empty[ks]:
                    continue
                agg_pair(MOD, tagg, trk_agg, trk_bins, t_vol[k], t_vol[ks], 1.0)
            else:
                agg_pair(MOD, tagg, trk_agg, trk_bins, t_vol[k], vol[hidx], 1.0)
    return OK


@njit(cache=True)
def remove_generator(idx, CFG, GRD, TES, imeta):
    pos, rad, gid, id2idx = CFG
    ghead, gnext = GRD
    (vol, bary, rmax, hmin, hmax, nof, nv, verts, nnb, nbg,
     nfc, fgid, fh) = TES
    m = imeta[2]
    n = imeta[0]
    last = n - 1
    g_dead = gid[idx]
    grid_remove(pos, idx, m, ghead, gnext)
    if idx != last:
        pos[idx, 0] = pos[last, 0]
        pos[idx, 1] = pos[last, 1]
        pos[idx, 2] = pos[last, 2]
        rad[idx] = rad[last]
        gid[idx] = gid[last]
        vol[idx] = vol[last]
        bary[idx, 0] = bary[last, 0]
        bary[idx, 1] = bary[last, 1]
        bary[idx, 2] = bary[last, 2]
        rmax[idx] = rmax[last]
        hmin[idx] = hmin[last]
        hmax[idx] = hmax[last]
        nof[idx] = nof[last]
        nv[idx] = nv[last]
        for k in range(nv[last]):
            t_restrict = k
            verts[idx, t_restrict, 0] = verts[last, k, 0]
            verts[idx, t_restrict, 1] = verts[last, k, 1]
            verts[idx, t_restrict, 2] = verts[last, k, 2]
        nnb[idx] = nnb[last]
        for k in range(nnb[last]):
            nbg[idx, k] = nbg[last, k]
        nfc[idx] = nfc[last]
        for k in range(nfc[last]):
            fgid[idx, k] = fgid[last, k]
            fh[idx, k] = fh[last, k]
        grid_replace(pos, last, idx, m, ghead, gnext)
        id2idx[gid[idx]] = idx
    id2idx[g_dead] = -1
    imeta[0] = last


@njit(cache=True)
def commit_cells(CFG, TES, TMP, na):
    pos, rad, gid, id2idx = CFG
    (vol, bary, rmax, hmin, hmax, nof, nv, verts, nnb, nbg,
     nfc, fgid, fh) = TES
    (aff, tslot, astamp, t_vol, t_bary, t_rmax, t_hmin, t_hmax, t_nof,
     t_nv, t_verts, t_nnb, t_nbg, t_empty, t_nfc, t_fgid, t_fh) = TMP
    rub = 0.0
    for k in range(na):
        idx = aff[k]
        vol[idx] = t_vol[k]
        bary[idx, 0] = t_bary[k, 0]
        bary[idx, 1] = t_bary[k, 1]
        bary[idx, 2] = t_bary[k, 2]
        rmax[idx] = t_rmax[k]
        hmin[idx] = t_hmin[k]
        hmax[idx] = t_hmax[k]
        nof[idx] = t_nof[k]
        nv[idx] = t_nv[k]
        for q in range(t_nv[k]):
            verts[idx, q, 0] = t_verts[k, q, 0]
            verts[idx, q, 1] = t_verts[k, q, 1]
            verts[idx, q, 2] = t_verts[k, q, 2]
        nnb[idx] = t_nnb[k]
        for q in range(t_nnb[k]):
            nbg[idx, q] = t_nbg[k, q]
        nfc[idx] = t_nfc[k]
        for q in range(t_nfc[k]):
            fgid[idx, q] = t_fgid[k, q]
            fh[idx, q] = t_fh[k, q]
        if not t_empty[k] and t_rmax[k] > rub:
            rub = t_rmax[k]
    return rub


@njit(cache=True)
def energy_components(MOD, agg, rk_agg, rk_bins, comp):
    """Weighted energy contributions: comp[0] pair, comp[1+t] reconstructing.
    Returns the finite total or inf."""
    hc, pairp, rk_kind, rk_func, rk_theta, rk_s0, rk_J, rk_breaks, rk_target, imod = MOD
    for q in range(comp.shape[0]):
        comp[q] = 0.0
    tot = 0.0
    if imod[0] == 1:
        comp[0] = pairp[0] * agg[2]
        tot += comp[0]
    K = imod[1]
    for t in range(K):
        fn = rk_func[t]
        if fn == F_DSC:
            S = 0.0
            J = rk_J[t]
            for j in range(J):
                S += rk_bins[t, j]
            if S <= 0.0:
                return INF
            d = 0.0
            for j in range(J):
                d += abs(rk_bins[t, j] / S - rk_target[t, j])
            comp[1 + t] = rk_theta[t] * np.sqrt(d)
        elif fn == F_MEAN:
            cnt = rk_agg[t, 0]
            if cnt < 0.5:
                return INF
            T = rk_agg[t, 1] / cnt
            comp[1 + t] = rk_theta[t] * np.sqrt(abs(T - rk_s0[t]))
        else:
            cnt = rk_agg[t, 0]
            if cnt < 1.5:
                return INF
            var = (rk_agg[t, 2] - rk_agg[t, 1] * rk_agg[t, 1] / cnt) / (cnt - 1.0)
            if var < 0.0:
                var = 0.0
            comp[1 + t] = rk_theta[t] * np.sqrt(abs(var - rk_s0[t]))
        tot += comp[1 + t]
    return tot


@njit(cache=True)
def reanchor(CFG, GRD, TES, WS, MOD, AGG, imeta, fmeta):
    """Full rebuild: re-anchors incremental aggregates, refreshes the grid
    resolution and the cut-radius bookkeeping."""
    pos, rad, gid, id2idx = CFG
    ghead, gnext = GRD
    agg, rk_agg, rk_bins = AGG
    for _ in range(4):
        n = imeta[0]
        m_want = grid_resolution(n)
        if m_want != imeta[2]:
            imeta[2] = m_want
            grid_build(pos, n, m_want, ghead, gnext)
        st = full_build(CFG, GRD, TES, WS, imeta, fmeta)
        if st != OK:
            return st
        vol = TES[0]
        removed = 0
        i = imeta[0] - 1
        while i >= 0:
            if vol[i] <= 0.0:
                remove_generator(i, CFG, GRD, TES, imeta)
                imeta[11] += 1
                removed += 1
            i -= 1
        if removed == 0:
            break
    agg_recompute(CFG, TES, MOD, agg, rk_agg, rk_bins, imeta)
    e = energy_total_agg(MOD, agg, rk_agg, rk_bins)
    if e < INF and fmeta[0] < INF:
        d = abs(e - fmeta[0])
        if d > fmeta[7]:
            fmeta[7] = d
    fmeta[0] = e
    imeta[4] = 0
    return OK


@njit(cache=True)
def _too_close(x, y, z, skip_idx, CFG, GRD, imeta):
    pos, rad, gid, id2idx = CFG
    ghead, gnext = GRD
    n = imeta[0]
    m = imeta[2]
    if n <= N_BRUTE or m < 3:
        for i in range(n):
            if i == skip_idx:
                continue
            dx = wraphalf(pos[i, 0] - x)
            dy = wraphalf(pos[i, 1] - y)
            dz = wraphalf(pos[i, 2] - z)
            if dx * dx + dy * dy + dz * dz < 1e-28:
                return True
        return False
    bx = int(x * m)
    by = int(y * m)
    bz = int(z * m)
    for a in range(bx - 1, bx + 2):
        ia = a % m
        if ia < 0:
            ia += m
        for b in range(by - 1, by + 2):
            ib = b % m
            if ib < 0:
                ib += m
            for c in range(bz - 1, bz + 2):
                ic = c % m
                if ic < 0:
                    ic += m
                i = ghead[(ia * m + ib) * m + ic]
                while i >= 0:
                    if i != skip_idx:
                        dx = wraphalf(pos[i, 0] - x)
                        dy = wraphalf(pos[i, 1] - y)
                        dz = wraphalf(pos[i, 2] - z)
                        if dx * dx + dy * dy + dz * dz < 1e-28:
                            return True
                    i = gnext[i]
    return False


@njit(cache=True)
def _undo_birth(idx_new, g_new, n, CFG, GRD, imeta):
    pos, rad, gid, id2idx = CFG
    ghead, gnext = GRD
    id2idx[g_new] = -1
    grid_remove(pos, idx_new, imeta[2], ghead, gnext)
    imeta[0] = n


@njit(cache=True)
def _undo_move(v, ox, oy, oz, orad, CFG, GRD, imeta):
    pos, rad, gid, id2idx = CFG
    ghead, gnext = GRD
    m = imeta[2]
    grid_remove(pos, v, m, ghead, gnext)
    pos[v, 0] = ox
    pos[v, 1] = oy
    pos[v, 2] = oz
    rad[v] = orad
    grid_add(pos, v, m, ghead, gnext)


@njit(cache=True)
def _cascade_empties(CFG, GRD, TES, TMP, imeta, na, extra_gid):
    """Permanently delete generators whose proposal cells came out empty
    (plus extra_gid >= 0, the accepted death victim)."""
    pos, rad, gid, id2idx = CFG
    (aff, tslot, astamp, t_vol, t_bary, t_rmax, t_hmin, t_hmax, t_nof,
     t_nv, t_verts, t_nnb, t_nbg, t_empty, t_nfc, t_fgid, t_fh) = TMP
    ndead = 0
    for k in range(na):
        if t_empty[k]:
            ndead += 1
    if ndead > 0:
        dead = np.empty(ndead, np.int64)
        q = 0
        for k in range(na):
            if t_empty[k]:
                dead[q] = gid[aff[k]]
                q += 1
        for k in range(ndead):
            idx = id2idx[dead[k]]
            if idx >= 0:
                remove_generator(idx, CFG, GRD, TES, imeta)
                imeta[11] += 1
    if extra_gid >= 0:
        idx = id2idx[extra_gid]
        if idx >= 0:
            remove_generator(idx, CFG, GRD, TES, imeta)


@njit(cache=True)
def _hc_enabled(hc):
    return hc[0] == hc[0] or hc[1] == hc[1] or hc[2] == hc[2]


@njit(cache=True)
def chain_step(CFG, GRD, TES, WS, TMP, MOD, AGG, TAGG, imeta, fmeta, rngs,
               z, sigma, r0):
    """One birth/death/move evolution step.

    Draw order per step: kind; then birth (x, y, z, mark), death (index) or
    move (index, 3 normals, mark); then one acceptance uniform.  Automatic
    rejections (death/move on an empty configuration, coincident proposal,
    infinite proposal energy) consume no acceptance uniform.
    Returns 1 accepted, 0 rejected, <0 error.
    """
    pos, rad, gid, id2idx = CFG
    ghead, gnext = GRD
    (vol, bary, rmax, hmin, hmax, nof, nv, verts, nnb, nbg,
     nfc, fgid, fh) = TES
    (aff, tslot, astamp, t_vol, t_bary, t_rmax, t_hmin, t_hmax, t_nof,
     t_nv, t_verts, t_nnb, t_nbg, t_empty, t_nfc, t_fgid, t_fh) = TMP
    hc = MOD[0]
    imod = MOD[9]
    agg, rk_agg, rk_bins = AGG
    tagg, trk_agg, trk_bins = TAGG
    needs_tess = imod[2] == 1
    hc_on = _hc_enabled(hc)
    n = imeta[0]
    u = rng_u01(rngs)
    kind = int(u * 3.0)
    if kind > 2:
        kind = 2
    imeta[30] += 1
    gen = imeta[30]

    if kind == K_BIRTH:
        imeta[5] += 1
        bx = rng_u01(rngs)
        by = rng_u01(rngs)
        bz = rng_u01(rngs)
        br = rng_radius(rngs, r0)
        cb = z / (n + 1.0)
        if n + 1 >= pos.shape[0]:
            return ERR_GROW_N
        if imeta[1] + 1 >= id2idx.shape[0]:
            return ERR_GROW_GID
        if not needs_tess:
            if _too_close(bx, by, bz, -1, CFG, GRD, imeta):
                imeta[12] += 1
                return 0
            ua = rng_u01(rngs)
            if ua < cb:
                idx_new = n
                pos[idx_new, 0] = bx
                pos[idx_new, 1] = by
                pos[idx_new, 2] = bz
                rad[idx_new] = br
                gid[idx_new] = imeta[1]
                id2idx[imeta[1]] = idx_new
                grid_add(pos, idx_new, imeta[2], ghead, gnext)
                imeta[0] = n + 1
                imeta[1] += 1
                imeta[8] += 1
                imeta[4] += 1
                if br * br > fmeta[2]:
                    fmeta[2] = br * br
                return 1
            return 0
        idx_new = n
        g_new = imeta[1]
        pos[idx_new, 0] = bx
        pos[idx_new, 1] = by
        pos[idx_new, 2] = bz
        rad[idx_new] = br
        gid[idx_new] = g_new
        id2idx[g_new] = idx_new
        grid_add(pos, idx_new, imeta[2], ghead, gnext)
        imeta[0] = n + 1
        if br * br > fmeta[2]:
            fmeta[2] = br * br  # conservative; refreshed on re-anchor
        aff[0] = idx_new
        astamp[idx_new] = gen
        tslot[idx_new] = -1
        na = 1
        na = collect_cut_cells(bx, by, bz, br, -1, idx_new, CFG, GRD, TES,
                               imeta, fmeta, aff, tslot, astamp, gen, na)
        if na < 0:
            _undo_birth(idx_new, g_new, n, CFG, GRD, imeta)
            return na
        st, na = rebuild_affected(CFG, GRD, TES, WS, TMP, imeta, fmeta,
                                  gen, na, -1)
        if st == ERR_COINCIDENT:
            _undo_birth(idx_new, g_new, n, CFG, GRD, imeta)
            imeta[12] += 1
            return 0
        if st != OK:
            _undo_birth(idx_new, g_new, n, CFG, GRD, imeta)
            return st
        drop_phantom_temp(TMP, CFG, gen, na)
        if hc_on:
            for k in range(na):
                if not t_empty[k] and _hc_violated(hc, t_hmin[k], t_hmax[k],
                                                   t_vol[k]):
                    _undo_birth(idx_new, g_new, n, CFG, GRD, imeta)
                    imeta[25] += 1
                    return 0
        copy_agg(agg, rk_agg, rk_bins, tagg, trk_agg, trk_bins, imod[1])
        st = delta_apply(CFG, TES, TMP, MOD, tagg, trk_agg, trk_bins, gen, na,
                         idx_new, -1, 0.0, 0, 0.0, 0, nbg[0], -1, 0.0)
        if st != OK:
            _undo_birth(idx_new, g_new, n, CFG, GRD, imeta)
            return st
        ea = energy_total_agg(MOD, tagg, trk_agg, trk_bins)
        if ea == INF:
            _undo_birth(idx_new, g_new, n, CFG, GRD, imeta)
            imeta[25] += 1
            return 0
        eb = fmeta[0]
        darg = eb - ea
        if darg > 700.0:
            darg = 700.0
        ua = rng_u01(rngs)
        if ua >= cb * np.exp(darg):
            _undo_birth(idx_new, g_new, n, CFG, GRD, imeta)
            return 0
        rub = commit_cells(CFG, TES, TMP, na)
        if rub > fmeta[1]:
            fmeta[1] = rub
        copy_agg(tagg, trk_agg, trk_bins, agg, rk_agg, rk_bins, imod[1])
        fmeta[0] = ea
        imeta[1] = g_new + 1
        imeta[8] += 1
        imeta[4] += 1
        if na > imeta[24]:
            imeta[24] = na
        for k in range(na):
            if not t_empty[k]:
                fmeta[3] = 0.98 * fmeta[3] + 0.02 * t_rmax[k]
                break
        _cascade_empties(CFG, GRD, TES, TMP, imeta, na, -1)
        return 1

    if kind == K_DEATH:
        imeta[6] += 1
        if n == 0:
            return 0
        uv = rng_u01(rngs)
        v = int(uv * n)
        if v >= n:
            v = n - 1
        cd = n / z
        if not needs_tess:
            ua = rng_u01(rngs)
            if ua < cd:
                remove_generator(v, CFG, GRD, TES, imeta)
                imeta[9] += 1
                imeta[4] += 1
                return 1
            return 0
        na = 0
        for q in range(nnb[v]):
            hidx = id2idx[nbg[v, q]]
            if hidx < 0:
                return ERR_NEIGHBOR_MISSING
            if astamp[hidx] != gen:
                aff[na] = hidx
                astamp[hidx] = gen
                tslot[hidx] = -1
                na += 1
        astamp[v] = gen
        tslot[v] = -2
        st, na = rebuild_affected(CFG, GRD, TES, WS, TMP, imeta, fmeta,
                                  gen, na, v)
        if st != OK:
            return st
        drop_phantom_temp(TMP, CFG, gen, na)
        if hc_on:
            for k in range(na):
                if not t_empty[k] and _hc_violated(hc, t_hmin[k], t_hmax[k],
                                                   t_vol[k]):
                    imeta[25] += 1
                    return 0
        copy_agg(agg, rk_agg, rk_bins, tagg, trk_agg, trk_bins, imod[1])
        st = delta_apply(CFG, TES, TMP, MOD, tagg, trk_agg, trk_bins, gen, na,
                         -1, v, vol[v], nof[v], rad[v], nnb[v], nbg[v],
                         -1, 0.0)
        if st != OK:
            return st
        ea = energy_total_agg(MOD, tagg, trk_agg, trk_bins)
        if ea == INF:
            imeta[25] += 1
            return 0
        eb = fmeta[0]
        darg = eb - ea
        if darg > 700.0:
            darg = 700.0
        ua = rng_u01(rngs)
        if ua >= cd * np.exp(darg):
            return 0
        rub = commit_cells(CFG, TES, TMP, na)
        if rub > fmeta[1]:
            fmeta[1] = rub
        copy_agg(tagg, trk_agg, trk_bins, agg, rk_agg, rk_bins, imod[1])
        fmeta[0] = ea
        imeta[9] += 1
        imeta[4] += 1
        if na > imeta[24]:
            imeta[24] = na
        _cascade_empties(CFG, GRD, TES, TMP, imeta, na, gid[v])
        return 1

    # move
    imeta[7] += 1
    if n == 0:
        return 0
    uv = rng_u01(rngs)
    v = int(uv * n)
    if v >= n:
        v = n - 1
    g1 = rng_normal(rngs)
    g2 = rng_normal(rngs)
    g3 = rng_normal(rngs)
    mx = wrap01(pos[v, 0] + sigma * g1)
    my = wrap01(pos[v, 1] + sigma * g2)
    mz = wrap01(pos[v, 2] + sigma * g3)
    mr = rng_radius(rngs, r0)
    if not needs_tess:
        if _too_close(mx, my, mz, v, CFG, GRD, imeta):
            imeta[12] += 1
            return 0
        ua = rng_u01(rngs)
        grid_remove(pos, v, imeta[2], ghead, gnext)
        pos[v, 0] = mx
        pos[v, 1] = my
        pos[v, 2] = mz
        rad[v] = mr
        grid_add(pos, v, imeta[2], ghead, gnext)
        imeta[10] += 1
        imeta[4] += 1
        if mr * mr > fmeta[2]:
            fmeta[2] = mr * mr
        return 1
    ox = pos[v, 0]
    oy = pos[v, 1]
    oz = pos[v, 2]
    orad = rad[v]
    grid_remove(pos, v, imeta[2], ghead, gnext)
    pos[v, 0] = mx
    pos[v, 1] = my
    pos[v, 2] = mz
    rad[v] = mr
    grid_add(pos, v, imeta[2], ghead, gnext)
    if mr * mr > fmeta[2]:
        fmeta[2] = mr * mr
    aff[0] = v
    astamp[v] = gen
    tslot[v] = -1
    na = 1
    for q in range(nnb[v]):
        hidx = id2idx[nbg[v, q]]
        if hidx < 0:
            _undo_move(v, ox, oy, oz, orad, CFG, GRD, imeta)
            return ERR_NEIGHBOR_MISSING
        if astamp[hidx] != gen:
            aff[na] = hidx
            astamp[hidx] = gen
            tslot[hidx] = -1
            na += 1
    na = collect_cut_cells(mx, my, mz, mr, -1, -1, CFG, GRD, TES,
                           imeta, fmeta, aff, tslot, astamp, gen, na)
    if na < 0:
        _undo_move(v, ox, oy, oz, orad, CFG, GRD, imeta)
        return na
    st, na = rebuild_affected(CFG, GRD, TES, WS, TMP, imeta, fmeta,
                              gen, na, -1)
    if st == ERR_COINCIDENT:
        _undo_move(v, ox, oy, oz, orad, CFG, GRD, imeta)
        imeta[12] += 1
        return 0
    if st != OK:
        _undo_move(v, ox, oy, oz, orad, CFG, GRD, imeta)
        return st
    drop_phantom_temp(TMP, CFG, gen, na)
    if hc_on:
        for k in range(na):
            if not t_empty[k] and _hc_violated(hc, t_hmin[k], t_hmax[k],
                                               t_vol[k]):
                _undo_move(v, ox, oy, oz, orad, CFG, GRD, imeta)
                imeta[25] += 1
                return 0
    copy_agg(agg, rk_agg, rk_bins, tagg, trk_agg, trk_bins, imod[1])
    st = delta_apply(CFG, TES, TMP, MOD, tagg, trk_agg, trk_bins, gen, na,
                     -1, -1, 0.0, 0, 0.0, 0, nbg[0], v, orad)
    if st != OK:
        _undo_move(v, ox, oy, oz, orad, CFG, GRD, imeta)
        return st
    ea = energy_total_agg(MOD, tagg, trk_agg, trk_bins)
    if ea == INF:
        _undo_move(v, ox, oy, oz, orad, CFG, GRD, imeta)
        imeta[25] += 1
        return 0
    eb = fmeta[0]
    darg = eb - ea
    if darg > 700.0:
        darg = 700.0
    ua = rng_u01(rngs)
    if ua >= np.exp(darg):
        _undo_move(v, ox, oy, oz, orad, CFG, GRD, imeta)
        return 0
    rub = commit_cells(CFG, TES, TMP, na)
    if rub > fmeta[1]:
        fmeta[1] = rub
    copy_agg(tagg, trk_agg, trk_bins, agg, rk_agg, rk_bins, imod[1])
    fmeta[0] = ea
    imeta[10] += 1
    imeta[4] += 1
    if na > imeta[24]:
        imeta[24] = na
    for k in range(na):
        if not t_empty[k]:
            fmeta[3] = 0.98 * fmeta[3] + 0.02 * t_rmax[k]
            break
    _cascade_empties(CFG, GRD, TES, TMP, imeta, na, -1)
    return 1


@njit(cache=True)
def run_chain_block(CFG, GRD, TES, WS, TMP, MOD, AGG, TAGG, imeta, fmeta,
                    rngs, z, sigma, r0, nsteps, log_every, trace, trace_n,
                    card, card_on, stop_on, stop_delta, stop_t,
                    wr_e, dqmin, dqmax, dqstate, comp):
    """Advance the chain up to nsteps, recording traces, maintaining the
    (delta, t) stopping window, and re-anchoring aggregates periodically.

    Returns (status, steps_done): OK when the block is exhausted, STOPPED
    when the last stop_t energies span less than stop_delta.
    """
    agg, rk_agg, rk_bins = AGG
    imod = MOD[9]
    cap = stop_t + 1
    for istep in range(nsteps):
        st = chain_step(CFG, GRD, TES, WS, TMP, MOD, AGG, TAGG, imeta, fmeta,
                        rngs, z, sigma, r0)
        if st < 0:
            return st, istep
        imeta[3] += 1
        if card_on == 1:
            card[istep] = imeta[0]
        e = fmeta[0]
        if log_every > 0 and imeta[3] % log_every == 0:
            row = trace_n[0]
            if row < trace.shape[0]:
                tot = energy_components(MOD, agg, rk_agg, rk_bins, comp)
                trace[row, 0] = imeta[3]
                trace[row, 1] = e
                trace[row, 2] = 0.0
                trace[row, 3] = comp[0]
                for t in range(KMAX):
                    trace[row, 4 + t] = comp[1 + t] if t < imod[1] else 0.0
                if imod[2] == 1:
                    trace[row, 4 + KMAX] = agg[0]
                else:
                    trace[row, 4 + KMAX] = imeta[0]
                trace_n[0] = row + 1
        if stop_on == 1:
            p = dqstate[4]
            wr_e[p % stop_t] = e
            h = dqstate[2]
            t2 = dqstate[3]
            while t2 > h and wr_e[dqmax[(t2 - 1) % cap] % stop_t] <= e:
                t2 -= 1
            dqmax[t2 % cap] = p
            t2 += 1
            while dqmax[h % cap] <= p - stop_t:
                h += 1
            dqstate[2] = h
            dqstate[3] = t2
            h = dqstate[0]
            t2 = dqstate[1]
            while t2 > h and wr_e[dqmin[(t2 - 1) % cap] % stop_t] >= e:
                t2 -= 1
            dqmin[t2 % cap] = p
            t2 += 1
            while dqmin[h % cap] <= p - stop_t:
                h += 1
            dqstate[0] = h
            dqstate[1] = t2
            dqstate[4] = p + 1
            if p + 1 >= stop_t:
                span = (wr_e[dqmax[dqstate[2] % cap] % stop_t]
                        - wr_e[dqmin[dqstate[0] % cap] % stop_t])
                if span < stop_delta:
                    return STOPPED, istep + 1
        if imod[2] == 1 and imeta[4] >= imeta[21]:
            st = reanchor(CFG, GRD, TES, WS, MOD, AGG, imeta, fmeta)
            if st != OK:
                return st, istep + 1
    return OK, nsteps


@njit(cache=True)
def greedy_step(CFG, GRD, TES, WS, TMP, MOD, AGG, TAGG, imeta, fmeta, rngs,
                r0, budget):
    """One greedy replacement attempt: uniform victim, replacement drawn
    uniformly conditioned on generating a nonempty cell, accepted only on a
    strict energy decrease that keeps every cell nonempty.

    Draw order: victim index, then (x, y, z, mark) per conditional attempt.
    Returns 1 replaced, 0 unchanged, <0 error.
    """
    pos, rad, gid, id2idx = CFG
    ghead, gnext = GRD
    (vol, bary, rmax, hmin, hmax, nof, nv, verts, nnb, nbg,
     nfc, fgid, fh) = TES
    (fnv, fvx, fnb, fpl, sides, polyb, chor, cw, cr2, cj, cs, sidx,
     sstack, hkeys, hstamp, hval, hgen, vout) = WS
    (aff, tslot, astamp, t_vol, t_bary, t_rmax, t_hmin, t_hmax, t_nof,
     t_nv, t_verts, t_nnb, t_nbg, t_empty, t_nfc, t_fgid, t_fh) = TMP
    hc = MOD[0]
    imod = MOD[9]
    agg, rk_agg, rk_bins = AGG
    tagg, trk_agg, trk_bins = TAGG
    hc_on = _hc_enabled(hc)
    n = imeta[0]
    imeta[7] += 1
    uv = rng_u01(rngs)
    v = int(uv * n)
    if v >= n:
        v = n - 1
    # conditional proposal: uniform on the set generating a nonempty cell
    # in the configuration without the victim
    mx = 0.0
    my = 0.0
    mz = 0.0
    mr = 0.0
    found = False
    spare = t_verts.shape[0] - 1
    for _ in range(budget):
        mx = rng_u01(rngs)
        my = rng_u01(rngs)
        mz = rng_u01(rngs)
        mr = rng_radius(rngs, r0)
        st, nf, rm = build_cell(mx, my, mz, mr, gid[v], -1, v,
                                pos, rad, gid, n, imeta[2], ghead, gnext,
                                fnv, fvx, fnb, fpl, sides, polyb, chor,
                                cw, cr2, cj, cs, sidx, sstack,
                                fmeta[2], 1.6 * fmeta[3])
        if st == ERR_COINCIDENT:
            continue
        if st != OK:
            return st
        st2, vv, cx, cy, cz, rm2, h0, h1, nofc, nvc, nnbc, nfcc = \
            finalize_cell(fnv, fvx, fnb, fpl, nf, gid[v],
                          vout, hkeys, hstamp, hval, hgen,
                          t_verts[spare], t_nbg[spare], t_fgid[spare],
                          t_fh[spare])
        if st2 != OK:
            return st2
        if vv > 0.0:
            found = True
            break
    if not found:
        return ERR_REJECTION_BUDGET
    imeta[30] += 1
    gen = imeta[30]
    ox = pos[v, 0]
    oy = pos[v, 1]
    oz = pos[v, 2]
    orad = rad[v]
    grid_remove(pos, v, imeta[2], ghead, gnext)
    pos[v, 0] = mx
    pos[v, 1] = my
    pos[v, 2] = mz
    rad[v] = mr
    grid_add(pos, v, imeta[2], ghead, gnext)
    if mr * mr > fmeta[2]:
        fmeta[2] = mr * mr
    aff[0] = v
    astamp[v] = gen
    tslot[v] = -1
    na = 1
    for q in range(nnb[v]):
        hidx = id2idx[nbg[v, q]]
        if hidx < 0:
            _undo_move(v, ox, oy, oz, orad, CFG, GRD, imeta)
            return ERR_NEIGHBOR_MISSING
        if astamp[hidx] != gen:
            aff[na] = hidx
            astamp[hidx] = gen
            tslot[hidx] = -1
            na += 1
    na = collect_cut_cells(mx, my, mz, mr, -1, -1, CFG, GRD, TES,
                           imeta, fmeta, aff, tslot, astamp, gen, na)
    if na < 0:
        _undo_move(v, ox, oy, oz, orad, CFG, GRD, imeta)
        return na
    st, na = rebuild_affected(CFG, GRD, TES, WS, TMP, imeta, fmeta,
                              gen, na, -1)
    if st == ERR_COINCIDENT:
        _undo_move(v, ox, oy, oz, orad, CFG, GRD, imeta)
        return 0
    if st != OK:
        _undo_move(v, ox, oy, oz, orad, CFG, GRD, imeta)
        return st
    # cardinality is pinned: reject proposals that would empty any cell
    for k in range(na):
        if t_empty[k]:
            _undo_move(v, ox, oy, oz, orad, CFG, GRD, imeta)
            return 0
    if hc_on:
        for k in range(na):
            if _hc_violated(hc, t_hmin[k], t_hmax[k], t_vol[k]):
                _undo_move(v, ox, oy, oz, orad, CFG, GRD, imeta)
                imeta[25] += 1
                return 0
    copy_agg(agg, rk_agg, rk_bins, tagg, trk_agg, trk_bins, imod[1])
    st = delta_apply(CFG, TES, TMP, MOD, tagg, trk_agg, trk_bins, gen, na,
                     -1, -1, 0.0, 0, 0.0, 0, nbg[0], v, orad)
    if st != OK:
        _undo_move(v, ox, oy, oz, orad, CFG, GRD, imeta)
        return st
    ea = energy_total_agg(MOD, tagg, trk_agg, trk_bins)
    if not (ea < fmeta[0]):
        _undo_move(v, ox, oy, oz, orad, CFG, GRD, imeta)
        return 0
    rub = commit_cells(CFG, TES, TMP, na)
    if rub > fmeta[1]:
        fmeta[1] = rub
    copy_agg(tagg, trk_agg, trk_bins, agg, rk_agg, rk_bins, imod[1])
    fmeta[0] = ea
    imeta[10] += 1
    imeta[4] += 1
    if na > imeta[24]:
        imeta[24] = na
    return 1


@njit(cache=True)
def run_greedy_block(CFG, GRD, TES, WS, TMP, MOD, AGG, TAGG, imeta, fmeta,
                     rngs, r0, niters, log_every, trace, trace_n,
                     patience, budget, gstate, comp):
    """Greedy reconstruction iterations; stops after `patience` consecutive
    iterations without a replacement.  gstate = [quiet, iters_total]."""
    agg, rk_agg, rk_bins = AGG
    imod = MOD[9]
    for it in range(niters):
        if gstate[0] >= patience:
            return STOPPED, it
        st = greedy_step(CFG, GRD, TES, WS, TMP, MOD, AGG, TAGG, imeta,
                         fmeta, rngs, r0, budget)
        if st < 0:
            return st, it
        gstate[1] += 1
        if st == 1:
            gstate[0] = 0
        else:
            gstate[0] += 1
        if log_every > 0 and gstate[1] % log_every == 0:
            row = trace_n[0]
            if row < trace.shape[0]:
                energy_components(MOD, agg, rk_agg, rk_bins, comp)
                trace[row, 0] = gstate[1]
                trace[row, 1] = fmeta[0]
                trace[row, 2] = 0.0
                trace[row, 3] = comp[0]
                for t in range(KMAX):
                    trace[row, 4 + t] = comp[1 + t] if t < imod[1] else 0.0
                trace[row, 4 + KMAX] = agg[0]
                trace_n[0] = row + 1
        if imeta[4] >= imeta[21]:
            st = reanchor(CFG, GRD, TES, WS, MOD, AGG, imeta, fmeta)
            if st != OK:
                return st, it + 1
    if gstate[0] >= patience:
        return STOPPED, niters
    return OK, niters


@njit(cache=True)
def sample_uniform_marked(rngs, n, r0, pos, rad):
    """n marked points, uniform positions and marks on (0, r0]; draw order
    is (x, y, z, mark) per point."""
    for i in range(n):
        pos[i, 0] = rng_u01(rngs)
        pos[i, 1] = rng_u01(rngs)
        pos[i, 2] = rng_u01(rngs)
        rad[i] = rng_radius(rngs, r0)


@njit(cache=True)
def voxel_assign(pos, rad, n, res, best_idx):
    """Assign each voxel centre of a res^3 torus grid to the generator with
    minimal periodic power distance (separable per-axis distances)."""
    dx2 = np.empty(res, np.float64)
    dy2 = np.empty(res, np.float64)
    dz2 = np.empty(res, np.float64)
    best = np.full(res * res * res, 1.0e300, np.float64)
    for g in range(n):
        for k in range(res):
            c = (k + 0.5) / res
            ux = wraphalf(c - pos[g, 0])
            dx2[k] = ux * ux
            uy = wraphalf(c - pos[g, 1])
            dy2[k] = uy * uy
            uz = wraphalf(c - pos[g, 2])
            dz2[k] = uz * uz
        r2 = rad[g] * rad[g]
        for a in range(res):
            base_a = dx2[a] - r2
            for b in range(res):
                base = base_a + dy2[b]
                off = (a * res + b) * res
                for c in range(res):
                    p = base + dz2[c]
                    if p < best[off + c]:
                        best[off + c] = p
                        best_idx[off + c] = g
    return OK
