# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Fleming-Viot kernels.

Mirrors ``_fallback.py`` draw for draw: every random quantity is derived from
the bit generator's ``next_double`` in the same order, so both backends give
bit-identical results from the same generator state.
"""
import numpy as np
cimport numpy as cnp
from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport log1p, expm1, INFINITY
from libc.stdlib cimport malloc, realloc, free
from numpy.random cimport bitgen_t

cnp.import_array()


cdef inline double _unif(bitgen_t *bg) noexcept nogil:
    return bg.next_double(bg.state)


cdef inline double _expo(bitgen_t *bg) noexcept nogil:
    return -log1p(-bg.next_double(bg.state))


cdef inline Py_ssize_t _donor(bitgen_t *bg, Py_ssize_t killed, Py_ssize_t n) noexcept nogil:
    # uniform on {0..n-1} \ {killed}
    cdef Py_ssize_t d = <Py_ssize_t>(_unif(bg) * (n - 1))
    if d >= n - 1:
        d = n - 2
    if d >= killed:
        d += 1
    return d


cdef inline void _sift_down(Py_ssize_t *heap, double *key, Py_ssize_t n, Py_ssize_t pos) noexcept nogil:
    cdef Py_ssize_t item = heap[pos]
    cdef double k = key[item]
    cdef Py_ssize_t child
    while True:
        child = 2 * pos + 1
        if child >= n:
            break
        if child + 1 < n and key[heap[child + 1]] < key[heap[child]]:
            child += 1
        if key[heap[child]] < k:
            heap[pos] = heap[child]
            pos = child
        else:
            break
    heap[pos] = item


cdef struct EventLog:
    Py_ssize_t size
    Py_ssize_t cap
    double *time
    Py_ssize_t *killed
    Py_ssize_t *donor


cdef int _log_push(EventLog *lg, double t, Py_ssize_t k, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t cap
    if lg.size == lg.cap:
        cap = lg.cap * 2 if lg.cap > 0 else 1024
        lg.time = <double *>realloc(lg.time, cap * sizeof(double))
        lg.killed = <Py_ssize_t *>realloc(lg.killed, cap * sizeof(Py_ssize_t))
        lg.donor = <Py_ssize_t *>realloc(lg.donor, cap * sizeof(Py_ssize_t))
        if lg.time == NULL or lg.killed == NULL or lg.donor == NULL:
            return -1
        lg.cap = cap
    lg.time[lg.size] = t
    lg.killed[lg.size] = k
    lg.donor[lg.size] = d
    lg.size += 1
    return 0


cdef object _log_to_arrays(EventLog *lg):
    cdef Py_ssize_t i
    times = np.empty(lg.size, dtype=np.float64)
    killed = np.empty(lg.size, dtype=np.int64)
    donor = np.empty(lg.size, dtype=np.int64)
    cdef double[::1] tv = times
    cdef long long[::1] kv = killed
    cdef long long[::1] dv = donor
    for i in range(lg.size):
        tv[i] = lg.time[i]
        kv[i] = lg.killed[i]
        dv[i] = lg.donor[i]
    return times, killed, donor


cdef void _log_free(EventLog *lg) noexcept:
    free(lg.time)
    free(lg.killed)
    free(lg.donor)


cdef bitgen_t *_bitgen(rng) except NULL:
    capsule = rng.bit_generator.capsule
    return <bitgen_t *>PyCapsule_GetPointer(capsule, "BitGenerator")


def fv_finite_state(double[::1] rates, long long[::1] states, double T, rng,
                    double[::1] snap_times=None, bint log=False):
    """Exact Fleming-Viot run for motionless killing on labels 0..K-1.

    ``states`` is updated in place to the configuration at ``T``.
    Returns ``(B, log_arrays or None, snap_states or None, snap_B or None)``.
    """
    cdef Py_ssize_t n = states.shape[0]
    cdef Py_ssize_t ns = 0 if snap_times is None else snap_times.shape[0]
    cdef Py_ssize_t i, d, s = 0, j
    cdef double t, r
    cdef long long B = 0
    cdef bitgen_t *bg = _bitgen(rng)
    cdef EventLog lg
    lg.size = 0; lg.cap = 0; lg.time = NULL; lg.killed = NULL; lg.donor = NULL
    cdef int err = 0

    snap_states = np.empty((ns, n), dtype=np.int64)
    snap_B = np.empty(ns, dtype=np.int64)
    cdef long long[:, ::1] sv = snap_states
    cdef long long[::1] sb = snap_B

    key_arr = np.empty(n, dtype=np.float64)
    heap_arr = np.empty(n, dtype=np.intp)
    cdef double[::1] key = key_arr
    cdef Py_ssize_t[::1] heap = heap_arr

    with rng.bit_generator.lock, nogil:
        for i in range(n):
            r = rates[states[i]]
            t = _expo(bg)
            key[i] = t / r if r > 0.0 else INFINITY
            heap[i] = i
        for i in range(n // 2 - 1, -1, -1):
            _sift_down(&heap[0], &key[0], n, i)
        while True:
            i = heap[0]
            t = key[i]
            while s < ns and snap_times[s] < t and snap_times[s] <= T:
                for j in range(n):
                    sv[s, j] = states[j]
                sb[s] = B
                s += 1
            if t > T:
                break
            d = _donor(bg, i, n)
            states[i] = states[d]
            B += 1
            if log:
                if _log_push(&lg, t, i, d) != 0:
                    err = 1
                    break
            r = rates[states[i]]
            key[i] = t + _expo(bg) / r if r > 0.0 else INFINITY
            _sift_down(&heap[0], &key[0], n, 0)
        while s < ns and snap_times[s] <= T:
            for j in range(n):
                sv[s, j] = states[j]
            sb[s] = B
            s += 1

    if err:
        _log_free(&lg)
        raise MemoryError()
    log_arrays = _log_to_arrays(&lg) if log else None
    _log_free(&lg)
    if snap_times is None:
        return B, log_arrays, None, None
    return B, log_arrays, snap_states[:s], snap_B[:s]


def fv_ruin_exp(double[::1] x0, double c, double theta, double mean, double T, rng,
                double[::1] snap_times=None, bint log=False):
    """Exact Fleming-Viot run for the ruin PDMP with Exp(mean) claims.

    Returns ``(positions_at_T, B, log_arrays or None, snap_states or None, snap_B or None)``.
    """
    cdef Py_ssize_t n = x0.shape[0]
    cdef Py_ssize_t ns = 0 if snap_times is None else snap_times.shape[0]
    cdef Py_ssize_t i, d, s = 0, j
    cdef double t, x, u, fx, y
    cdef long long B = 0
    cdef bitgen_t *bg = _bitgen(rng)
    cdef EventLog lg
    lg.size = 0; lg.cap = 0; lg.time = NULL; lg.killed = NULL; lg.donor = NULL
    cdef int err = 0

    snap_states = np.empty((ns, n), dtype=np.float64)
    snap_B = np.empty(ns, dtype=np.int64)
    cdef double[:, ::1] sv = snap_states
    cdef long long[::1] sb = snap_B

    pos_arr = np.array(x0, dtype=np.float64, copy=True)
    tev_arr = np.zeros(n, dtype=np.float64)
    key_arr = np.empty(n, dtype=np.float64)
    heap_arr = np.empty(n, dtype=np.intp)
    cdef double[::1] pos = pos_arr
    cdef double[::1] tev = tev_arr
    cdef double[::1] key = key_arr
    cdef Py_ssize_t[::1] heap = heap_arr

    with rng.bit_generator.lock, nogil:
        for i in range(n):
            key[i] = _expo(bg) / theta
            heap[i] = i
        for i in range(n // 2 - 1, -1, -1):
            _sift_down(&heap[0], &key[0], n, i)
        while True:
            i = heap[0]
            t = key[i]
            while s < ns and snap_times[s] < t and snap_times[s] <= T:
                for j in range(n):
                    sv[s, j] = pos[j] + c * (snap_times[s] - tev[j])
                sb[s] = B
                s += 1
            if t > T:
                break
            x = pos[i] + c * (t - tev[i])
            fx = -expm1(-x / mean)
            u = _unif(bg)
            if u < fx:
                y = -mean * log1p(-_unif(bg) * fx)
                x = x - y
                pos[i] = x if x > 0.0 else 0.0
            else:
                d = _donor(bg, i, n)
                pos[i] = pos[d] + c * (t - tev[d])
                B += 1
                if log:
                    if _log_push(&lg, t, i, d) != 0:
                        err = 1
                        break
            tev[i] = t
            key[i] = t + _expo(bg) / theta
            _sift_down(&heap[0], &key[0], n, 0)
        while s < ns and snap_times[s] <= T:
            for j in range(n):
                sv[s, j] = pos[j] + c * (snap_times[s] - tev[j])
            sb[s] = B
            s += 1
        for j in range(n):
            pos[j] = pos[j] + c * (T - tev[j])

    if err:
        _log_free(&lg)
        raise MemoryError()
    log_arrays = _log_to_arrays(&lg) if log else None
    _log_free(&lg)
    if snap_times is None:
        return pos_arr, B, log_arrays, None, None
    return pos_arr, B, log_arrays, snap_states[:s], snap_B[:s]


def discrete_finite_state(double[::1] rates, long long[::1] states, double[::1] level_times, rng):
    """Discrete-time resampling scheme for motionless killing.

    Between consecutive level times each particle is killed with probability
    ``1 - exp(-rate dt)``; killed particles then copy independently and
    uniformly chosen survivors (with replacement).  ``states`` is updated in
    place.  Returns ``(survivor_counts, alive_mask_at_last_level, extinct_level)``
    where ``extinct_level`` is -1 without extinction.
    """
    cdef Py_ssize_t n = states.shape[0]
    cdef Py_ssize_t nlev = level_times.shape[0] - 1
    cdef Py_ssize_t i, j, nsurv, nk
    cdef double dt
    cdef Py_ssize_t extinct = -1
    cdef bitgen_t *bg = _bitgen(rng)

    counts_arr = np.zeros(nlev, dtype=np.int64)
    alive_arr = np.ones(n, dtype=np.uint8)
    surv_arr = np.empty(n, dtype=np.intp)
    killed_arr = np.empty(n, dtype=np.intp)
    cdef long long[::1] counts = counts_arr
    cdef unsigned char[::1] alive = alive_arr
    cdef Py_ssize_t[::1] surv = surv_arr
    cdef Py_ssize_t[::1] killed = killed_arr

    with rng.bit_generator.lock, nogil:
        for j in range(nlev):
            dt = level_times[j + 1] - level_times[j]
            nsurv = 0
            nk = 0
            for i in range(n):
                # a particle with zero rate cannot die, so it consumes no draw
                if rates[states[i]] > 0.0 and _expo(bg) < rates[states[i]] * dt:
                    killed[nk] = i
                    nk += 1
                    alive[i] = 0
                else:
                    surv[nsurv] = i
                    nsurv += 1
                    alive[i] = 1
            counts[j] = nsurv
            if nsurv == 0:
                extinct = j
                break
            if j == nlev - 1:
                break
            for i in range(nk):
                states[killed[i]] = states[surv[<Py_ssize_t>(_unif(bg) * nsurv)]]
    return counts_arr, alive_arr.astype(bool), extinct
