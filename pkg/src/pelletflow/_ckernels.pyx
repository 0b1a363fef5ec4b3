# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``."""

from libc.stdint cimport uint64_t, int64_t

cdef int64_t SCALE = 1000000

cdef uint64_t FNV_OFFSET = 14695981039346656037ULL
cdef uint64_t FNV_PRIME = 1099511628211ULL
cdef uint64_t LCG_MULTIPLIER = 6364136223846793005ULL
cdef uint64_t LCG_INCREMENT = 1442695040888963407ULL


cdef inline uint64_t _fnv(const unsigned char[:] data) nogil:
    cdef uint64_t h = FNV_OFFSET
    cdef Py_ssize_t i
    for i in range(data.shape[0]):
        h ^= data[i]
        h *= FNV_PRIME
    return h


def fnv1a64(data):
    if len(data) == 0:
        return int(FNV_OFFSET)
    return int(_fnv(bytes(data)))


def key_hash_index(key, Py_ssize_t fan_out):
    if fan_out < 1:
        raise ValueError("fan_out must be >= 1")
    if not key:
        raise ValueError("key must be non-empty")
    return int(_fnv(bytes(key)) % <uint64_t>fan_out)


def bucket_counts(keys, Py_ssize_t fan_out):
    if fan_out < 1:
        raise ValueError("fan_out must be >= 1")
    counts = [0] * fan_out
    cdef Py_ssize_t idx
    for key in keys:
        if not key:
            raise ValueError("key must be non-empty")
        idx = <Py_ssize_t>(_fnv(bytes(key)) % <uint64_t>fan_out)
        counts[idx] += 1
    return counts


def lcg_next(state):
    cdef uint64_t s = <uint64_t>(state & 0xFFFFFFFFFFFFFFFF)
    return int(s * LCG_MULTIPLIER + LCG_INCREMENT)


def workload_series(int profile, int64_t base_u, int64_t period, int64_t duration,
                    spike_threshold, int64_t spike_mult_u, int64_t step_u,
                    seed, Py_ssize_t horizon):
    cdef uint64_t state = <uint64_t>(seed & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t threshold = <uint64_t>spike_threshold
    cdef int64_t rate = base_u
    cdef int64_t r
    cdef Py_ssize_t t
    out = [0] * horizon
    for t in range(horizon):
        if profile == 2:
            if t > 0:
                state = state * LCG_MULTIPLIER + LCG_INCREMENT
                if state >> 63:
                    rate = rate + step_u
                else:
                    rate = rate - step_u
                    if rate < 0:
                        rate = 0
            out[t] = rate
        else:
            r = base_u if (t % period) < duration else 0
            if profile == 1:
                state = state * LCG_MULTIPLIER + LCG_INCREMENT
                if (state >> 11) < threshold:
                    r = r * spike_mult_u // SCALE
            out[t] = r
    return out


def pipeline_tick(queues, credits, outcarry, cores, inst_rate_u, select_u,
                  int64_t alpha, int64_t inflow, arrivals, processed):
    cdef int64_t carry_in = inflow
    cdef int64_t q, cap, whole, done, out
    cdef Py_ssize_t i, n = len(queues)
    for i in range(n):
        arrivals[i] = carry_in
        q = <int64_t>queues[i] + carry_in
        cap = <int64_t>cores[i] * alpha * <int64_t>inst_rate_u[i] + <int64_t>credits[i]
        whole = cap // SCALE
        if q >= whole:
            done = whole
            credits[i] = cap - whole * SCALE
        else:
            done = q
            credits[i] = 0
        queues[i] = q - done
        processed[i] = done
        out = done * <int64_t>select_u[i] + <int64_t>outcarry[i]
        carry_in = out // SCALE
        outcarry[i] = out - carry_in * SCALE
    return carry_in
