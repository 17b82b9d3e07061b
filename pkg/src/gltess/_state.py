"""Array state shared between the Python API and the compiled kernels.

ChainCore owns every buffer a Markov chain needs (configuration rows, grid,
tessellation store, clipping workspace, energy aggregates) and exposes
block-wise stepping.  Static one-shot tessellations use the same allocation
helpers with a throwaway core.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as K
from .errors import GeometryFailure, DegenerateInput

_ERR_MESSAGES = {
    K.ERR_CAPACITY: "cell exceeded face/vertex capacity; raise kernel limits",
    K.ERR_AFF_OVERFLOW: "affected-cell set exceeded capacity",
    K.ERR_FIXPOINT: "local-update fix-point did not close",
    K.ERR_CAND_OVERFLOW: "cut-candidate buffer overflow",
    K.ERR_VOLUME_SUM: "cell volumes do not fill the torus within tolerance",
    K.ERR_NEIGHBOR_MISSING: "face neighbour refers to a missing generator",
    K.ERR_COINCIDENT: "coincident generator positions",
}


def raise_kernel_error(status: int) -> None:
    if status == K.ERR_COINCIDENT:
        raise DegenerateInput(_ERR_MESSAGES[status])
    msg = _ERR_MESSAGES.get(status, f"kernel error {status}")
    raise GeometryFailure(msg)


def alloc_workspace():
    """Clipping workspace: face polygons, side values, candidate buffers."""
    fnv = np.zeros(K.MAXF, np.int32)
    fvx = np.zeros((K.MAXF, K.MAXFV, 3), np.float64)
    fnb = np.zeros(K.MAXF, np.int64)
    fpl = np.zeros((K.MAXF, 4), np.float64)
    sides = np.zeros((K.MAXF, K.MAXFV), np.float64)
    polyb = np.zeros((K.MAXFV + 8, 3), np.float64)
    chor = np.zeros((K.MAXF + 8, 3), np.float64)
    cw = np.zeros((K.CMAX, 3), np.float64)
    cr2 = np.zeros(K.CMAX, np.float64)
    cj = np.zeros(K.CMAX, np.int32)
    cs = np.zeros(K.CMAX, np.float64)
    sidx = np.zeros(K.CMAX, np.int32)
    sstack = np.zeros(256, np.int32)
    hkeys = np.zeros(K.HSZ, np.int64)
    hstamp = np.zeros(K.HSZ, np.int64)
    hval = np.zeros(K.HSZ, np.int32)
    hgen = np.zeros(1, np.int64)
    vout = np.zeros(8, np.float64)
    return (fnv, fvx, fnb, fpl, sides, polyb, chor, cw, cr2, cj, cs, sidx,
            sstack, hkeys, hstamp, hval, hgen, vout)


def alloc_tess(nc: int):
    vol = np.zeros(nc, np.float64)
    bary = np.zeros((nc, 3), np.float64)
    rmax = np.zeros(nc, np.float64)
    hmin = np.zeros(nc, np.float64)
    hmax = np.zeros(nc, np.float64)
    nof = np.zeros(nc, np.int32)
    nv = np.zeros(nc, np.int32)
    verts = np.zeros((nc, K.MAXVS, 3), np.float64)
    nnb = np.zeros(nc, np.int32)
    nbg = np.zeros((nc, K.MAXNB), np.int64)
    nfc = np.zeros(nc, np.int32)
    fgid = np.zeros((nc, K.MAXF), np.int64)
    fh = np.zeros((nc, K.MAXF), np.float64)
    return (vol, bary, rmax, hmin, hmax, nof, nv, verts, nnb, nbg,
            nfc, fgid, fh)


def alloc_tmp():
    aff = np.zeros(K.AMAX, np.int32)
    tslot = np.zeros(1, np.int32)  # resized with capacity, see ChainCore
    astamp = np.zeros(1, np.int64)
    t_vol = np.zeros(K.AMAX, np.float64)
    t_bary = np.zeros((K.AMAX, 3), np.float64)
    t_rmax = np.zeros(K.AMAX, np.float64)
    t_hmin = np.zeros(K.AMAX, np.float64)
    t_hmax = np.zeros(K.AMAX, np.float64)
    t_nof = np.zeros(K.AMAX, np.int32)
    t_nv = np.zeros(K.AMAX, np.int32)
    t_verts = np.zeros((K.AMAX, K.MAXVS, 3), np.float64)
    t_nnb = np.zeros(K.AMAX, np.int32)
    t_nbg = np.zeros((K.AMAX, K.MAXNB), np.int64)
    t_empty = np.zeros(K.AMAX, np.bool_)
    t_nfc = np.zeros(K.AMAX, np.int32)
    t_fgid = np.zeros((K.AMAX, K.MAXF), np.int64)
    t_fh = np.zeros((K.AMAX, K.MAXF), np.float64)
    return [aff, tslot, astamp, t_vol, t_bary, t_rmax, t_hmin, t_hmax, t_nof,
            t_nv, t_verts, t_nnb, t_nbg, t_empty, t_nfc, t_fgid, t_fh]


def null_model_encoding():
    """Encoding of the E == 0 model (no potentials)."""
    hc = np.full(3, np.nan)
    pairp = np.zeros(2, np.float64)
    rk_kind = np.zeros(K.KMAX, np.int32)
    rk_func = np.zeros(K.KMAX, np.int32)
    rk_theta = np.zeros(K.KMAX, np.float64)
    rk_s0 = np.zeros(K.KMAX, np.float64)
    rk_J = np.zeros(K.KMAX, np.int32)
    rk_breaks = np.zeros((K.KMAX, K.JMAX + 1), np.float64)
    rk_target = np.zeros((K.KMAX, K.JMAX), np.float64)
    imod = np.zeros(8, np.int64)
    return (hc, pairp, rk_kind, rk_func, rk_theta, rk_s0, rk_J, rk_breaks,
            rk_target, imod)


def alloc_agg():
    agg = np.zeros(8, np.float64)
    rk_agg = np.zeros((K.KMAX, 3), np.float64)
    rk_bins = np.zeros((K.KMAX, K.JMAX), np.float64)
    return (agg, rk_agg, rk_bins)


class ChainCore:
    """Owns the mutable arrays of one Markov chain."""

    BLOCK = 16384

    def __init__(self, positions, radii, gids, model_enc, seed,
                 z, sigma, r0, anchor_every=10_000, capacity=None,
                 needs_tess=None):
        n = len(radii)
        nc = capacity or max(4 * n + 64, int(4 * z) + 64, 1024)
        self.nc = nc
        self.pos = np.zeros((nc, 3), np.float64)
        self.rad = np.zeros(nc, np.float64)
        self.gid = np.zeros(nc, np.int64)
        self.pos[:n] = positions
        self.rad[:n] = radii
        self.gid[:n] = gids
        next_gid = int(gids.max()) + 1 if n else 0
        nid = max(2 * next_gid + 1024, 1 << 16)
        self.id2idx = np.full(nid, -1, np.int32)
        self.id2idx[self.gid[:n]] = np.arange(n, dtype=np.int32)
        self.ghead = np.full(K.GRID_MMAX ** 3, -1, np.int32)
        self.gnext = np.full(nc, -1, np.int32)
        self.tes = alloc_tess(nc)
        self.ws = alloc_workspace()
        tmp = alloc_tmp()
        tmp[1] = np.full(nc, -1, np.int32)   # tslot
        tmp[2] = np.zeros(nc, np.int64)      # astamp
        self.tmp = tuple(tmp)
        self.model_enc = model_enc
        self.agg = alloc_agg()
        self.tagg = alloc_agg()
        self.imeta = np.zeros(64, np.int64)
        self.fmeta = np.zeros(16, np.float64)
        self.rngs = np.zeros(4, np.uint64)
        K.rng_seed(self.rngs, np.uint64(seed & (2 ** 64 - 1)))
        self.z = float(z)
        self.sigma = float(sigma)
        self.r0 = float(r0)
        self.imeta[0] = n
        self.imeta[1] = next_gid
        self.imeta[2] = K.grid_resolution(n)
        self.imeta[21] = anchor_every
        if needs_tess is None:
            needs_tess = bool(model_enc[9][2])
        self.model_enc[9][2] = 1 if needs_tess else 0
        self.comp = np.zeros(1 + K.KMAX, np.float64)
        K.grid_build(self.pos, n, int(self.imeta[2]), self.ghead, self.gnext)

    # -- setup ------------------------------------------------------------

    @property
    def cfg(self):
        return (self.pos, self.rad, self.gid, self.id2idx)

    @property
    def grd(self):
        return (self.ghead, self.gnext)

    @property
    def n(self) -> int:
        return int(self.imeta[0])

    @property
    def needs_tess(self) -> bool:
        return bool(self.model_enc[9][2])

    @property
    def energy(self) -> float:
        return float(self.fmeta[0])

    def initialize(self, drop_empty=True):
        """Full build + aggregate anchor.  Drops empty-cell generators so the
        chain invariant (every generator owns a nonempty cell) holds."""
        if not self.needs_tess:
            self.fmeta[0] = 0.0
            return
        st = K.reanchor(self.cfg, self.grd, self.tes, self.ws,
                        self.model_enc, self.agg, self.imeta, self.fmeta)
        if st != K.OK:
            raise_kernel_error(st)
        self.imeta[11] = 0   # setup exclusions are not chain removals
        self.fmeta[7] = 0.0  # drift gauge starts clean

    def ensure_capacity(self, margin):
        if self.n + margin + 8 < self.nc and \
                int(self.imeta[1]) + margin + 8 < len(self.id2idx):
            return
        self.grow(margin)

    def grow(self, margin):
        nc2 = max(2 * self.nc, self.n + margin + 64)
        pos = np.zeros((nc2, 3), np.float64)
        rad = np.zeros(nc2, np.float64)
        gid = np.zeros(nc2, np.int64)
        n = self.n
        pos[:n] = self.pos[:n]
        rad[:n] = self.rad[:n]
        gid[:n] = self.gid[:n]
        self.pos, self.rad, self.gid = pos, rad, gid
        self.gnext = np.full(nc2, -1, np.int32)
        tes2 = alloc_tess(nc2)
        for a, b in zip(tes2, self.tes):
            a[:n] = b[:n]
        self.tes = tes2
        tmp = list(self.tmp)
        tmp[1] = np.full(nc2, -1, np.int32)
        tmp[2] = np.zeros(nc2, np.int64)
        self.tmp = tuple(tmp)
        self.imeta[30] = 0
        nid2 = max(2 * len(self.id2idx), 2 * int(self.imeta[1]) + 1024)
        id2idx = np.full(nid2, -1, np.int32)
        id2idx[:len(self.id2idx)] = self.id2idx
        self.id2idx = id2idx
        self.nc = nc2
        K.grid_build(self.pos, n, int(self.imeta[2]), self.ghead, self.gnext)

    # -- stepping ---------------------------------------------------------

    def step(self) -> int:
        """Single evolution step; returns 1 accepted / 0 rejected."""
        self.ensure_capacity(4)
        st = K.chain_step(self.cfg, self.grd, self.tes, self.ws, self.tmp,
                          self.model_enc, self.agg, self.tagg, self.imeta,
                          self.fmeta, self.rngs, self.z, self.sigma, self.r0)
        if st < 0:
            raise_kernel_error(st)
        self.imeta[3] += 1
        return st

    def run_block(self, nsteps, log_every=0, record_cardinality=False,
                  stop=None):
        """Run up to nsteps; returns (stopped, steps_done, trace, card)."""
        self.ensure_capacity(nsteps)
        rows = (nsteps // log_every + 2) if log_every else 1
        trace = np.zeros((rows, 5 + K.KMAX), np.float64)
        trace_n = np.zeros(1, np.int64)
        card = np.zeros(nsteps if record_cardinality else 1, np.int32)
        if stop is None:
            stop_on, delta, t = 0, 0.0, 8
            if not hasattr(self, "_wr"):
                self._wr = np.zeros(8, np.float64)
                self._dqmin = np.zeros(9, np.int64)
                self._dqmax = np.zeros(9, np.int64)
                self._dqstate = np.zeros(8, np.int64)
        else:
            delta, t = stop
            stop_on = 1
            if not hasattr(self, "_wr") or len(self._wr) != t:
                self._wr = np.zeros(t, np.float64)
                self._dqmin = np.zeros(t + 1, np.int64)
                self._dqmax = np.zeros(t + 1, np.int64)
                self._dqstate = np.zeros(8, np.int64)
        st, done = K.run_chain_block(
            self.cfg, self.grd, self.tes, self.ws, self.tmp, self.model_enc,
            self.agg, self.tagg, self.imeta, self.fmeta, self.rngs,
            self.z, self.sigma, self.r0, nsteps, log_every, trace, trace_n,
            card, 1 if record_cardinality else 0, stop_on, float(delta),
            int(t), self._wr, self._dqmin, self._dqmax, self._dqstate,
            self.comp)
        if st < 0:
            raise_kernel_error(st)
        return (st == K.STOPPED, done, trace[:int(trace_n[0])],
                card[:done] if record_cardinality else None)

    def run_greedy_block(self, niters, patience, budget, log_every=0):
        self.ensure_capacity(8)
        rows = (niters // log_every + 2) if log_every else 1
        trace = np.zeros((rows, 5 + K.KMAX), np.float64)
        trace_n = np.zeros(1, np.int64)
        if not hasattr(self, "_gstate"):
            self._gstate = np.zeros(2, np.int64)
        st, done = K.run_greedy_block(
            self.cfg, self.grd, self.tes, self.ws, self.tmp, self.model_enc,
            self.agg, self.tagg, self.imeta, self.fmeta, self.rngs,
            self.r0, niters, log_every, trace, trace_n, patience, budget,
            self._gstate, self.comp)
        if st < 0:
            if st == K.ERR_REJECTION_BUDGET:
                from .errors import RejectionBudgetExhausted
                raise RejectionBudgetExhausted(
                    "could not draw a nonempty-cell replacement")
            raise_kernel_error(st)
        return st == K.STOPPED, done, trace[:int(trace_n[0])]

    # -- inspection --------------------------------------------------------

    def snapshot_arrays(self):
        n = self.n
        order = np.argsort(self.gid[:n], kind="stable")
        return (self.pos[:n][order].copy(), self.rad[:n][order].copy(),
                self.gid[:n][order].copy())

    def counters(self) -> dict:
        im = self.imeta
        return {
            "steps": int(im[3]),
            "proposed": {"birth": int(im[5]), "death": int(im[6]),
                         "move": int(im[7])},
            "accepted": {"birth": int(im[8]), "death": int(im[9]),
                         "move": int(im[10])},
            "empty_cell_removals": int(im[11]),
            "coincidence_rejections": int(im[12]),
            "fixpoint_extra_rebuilds": int(im[13]),
            "hardcore_rejections": int(im[25]),
            "max_affected_cells": int(im[24]),
            "aggregate_drift": float(self.fmeta[7]),
        }

    def energy_components(self):
        tot = K.energy_components(self.model_enc, self.agg[0], self.agg[1],
                                  self.agg[2], self.comp)
        return float(tot), self.comp.copy()
