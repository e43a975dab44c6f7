"""Pure-Python versions of the compiled kernels in ``_core.pyx``.

Same algorithms, same draw order: results are bit-identical to the compiled
backend for the same generator state.
"""
from __future__ import annotations

import heapq
import math

import numpy as np

from ..rng import UniformStream


def _donor(us: UniformStream, killed: int, n: int) -> int:
    d = int(us.next() * (n - 1))
    if d >= n - 1:
        d = n - 2
    if d >= killed:
        d += 1
    return d


def _expo(us: UniformStream) -> float:
    return -math.log1p(-us.next())


def fv_finite_state(rates, states, T, rng, snap_times=None, log=False):
    rates = [float(r) for r in rates]
    st = states.tolist()
    n = len(st)
    us = UniformStream(rng)
    snaps = [] if snap_times is None else [float(s) for s in snap_times]
    ns = len(snaps)
    snap_states, snap_b = [], []
    lt, lk, ld = [], [], []
    B = 0
    inf = math.inf

    heap = []
    for i in range(n):
        r = rates[st[i]]
        e = _expo(us)
        heap.append((e / r if r > 0.0 else inf, i))
    heapq.heapify(heap)
    s = 0
    try:
        while True:
            t, i = heap[0]
            while s < ns and snaps[s] < t and snaps[s] <= T:
                snap_states.append(list(st))
                snap_b.append(B)
                s += 1
            if t > T:
                break
            d = _donor(us, i, n)
            st[i] = st[d]
            B += 1
            if log:
                lt.append(t)
                lk.append(i)
                ld.append(d)
            r = rates[st[i]]
            heapq.heapreplace(heap, (t + _expo(us) / r if r > 0.0 else inf, i))
        while s < ns and snaps[s] <= T:
            snap_states.append(list(st))
            snap_b.append(B)
            s += 1
    finally:
        us.close()

    states[:] = st
    log_arrays = (
        (np.array(lt, dtype=np.float64), np.array(lk, dtype=np.int64), np.array(ld, dtype=np.int64)) if log else None
    )
    if snap_times is None:
        return B, log_arrays, None, None
    return (
        B,
        log_arrays,
        np.array(snap_states, dtype=np.int64).reshape(len(snap_b), n),
        np.array(snap_b, dtype=np.int64),
    )


def fv_ruin_exp(x0, c, theta, mean, T, rng, snap_times=None, log=False):
    pos = [float(v) for v in x0]
    n = len(pos)
    tev = [0.0] * n
    us = UniformStream(rng)
    snaps = [] if snap_times is None else [float(s) for s in snap_times]
    ns = len(snaps)
    snap_states, snap_b = [], []
    lt, lk, ld = [], [], []
    B = 0

    heap = [(_expo(us) / theta, i) for i in range(n)]
    heapq.heapify(heap)
    s = 0
    try:
        while True:
            t, i = heap[0]
            while s < ns and snaps[s] < t and snaps[s] <= T:
                ts = snaps[s]
                snap_states.append([pos[j] + c * (ts - tev[j]) for j in range(n)])
                snap_b.append(B)
                s += 1
            if t > T:
                break
            x = pos[i] + c * (t - tev[i])
            fx = -math.expm1(-x / mean)
            u = us.next()
            if u < fx:
                y = -mean * math.log1p(-us.next() * fx)
                x = x - y
                pos[i] = x if x > 0.0 else 0.0
            else:
                d = _donor(us, i, n)
                pos[i] = pos[d] + c * (t - tev[d])
                B += 1
                if log:
                    lt.append(t)
                    lk.append(i)
                    ld.append(d)
            tev[i] = t
            heapq.heapreplace(heap, (t + _expo(us) / theta, i))
        while s < ns and snaps[s] <= T:
            ts = snaps[s]
            snap_states.append([pos[j] + c * (ts - tev[j]) for j in range(n)])
            snap_b.append(B)
            s += 1
    finally:
        us.close()

    final = np.array([pos[j] + c * (T - tev[j]) for j in range(n)], dtype=np.float64)
    log_arrays = (
        (np.array(lt, dtype=np.float64), np.array(lk, dtype=np.int64), np.array(ld, dtype=np.int64)) if log else None
    )
    if snap_times is None:
        return final, B, log_arrays, None, None
    return (
        final,
        B,
        log_arrays,
        np.array(snap_states, dtype=np.float64).reshape(len(snap_b), n),
        np.array(snap_b, dtype=np.int64),
    )


def discrete_finite_state(rates, states, level_times, rng):
    rates = [float(r) for r in rates]
    st = states.tolist()
    n = len(st)
    nlev = len(level_times) - 1
    us = UniformStream(rng)
    counts = np.zeros(nlev, dtype=np.int64)
    alive = [True] * n
    extinct = -1
    try:
        for j in range(nlev):
            dt = float(level_times[j + 1]) - float(level_times[j])
            surv, killed = [], []
            for i in range(n):
                if rates[st[i]] > 0.0 and _expo(us) < rates[st[i]] * dt:
                    killed.append(i)
                    alive[i] = False
                else:
                    surv.append(i)
                    alive[i] = True
            ns = len(surv)
            counts[j] = ns
            if ns == 0:
                extinct = j
                break
            if j == nlev - 1:
                break
            for k in killed:
                st[k] = st[surv[int(us.next() * ns)]]
    finally:
        us.close()
    states[:] = st
    return counts, np.array(alive, dtype=bool), extinct
