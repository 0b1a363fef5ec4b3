"""Pure-Python hot kernels.

These are the reference implementations; ``_ckernels.pyx`` mirrors them
line for line and the test-suite checks both give identical results.
Quantities that can be fractional (rates, capacities, selectivities) are
carried as integers in micro-units of ``SCALE`` so that every backend and
platform produces the same numbers.
"""

SCALE = 1_000_000

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1

LCG_MULTIPLIER = 6364136223846793005
LCG_INCREMENT = 1442695040888963407

PERIODIC = 0
PERIODIC_SPIKY = 1
RANDOM_WALK = 2


def fnv1a64(data):
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def key_hash_index(key, fan_out):
    if fan_out < 1:
        raise ValueError("fan_out must be >= 1")
    if not key:
        raise ValueError("key must be non-empty")
    return fnv1a64(key) % fan_out


def bucket_counts(keys, fan_out):
    counts = [0] * fan_out
    for key in keys:
        counts[key_hash_index(key, fan_out)] += 1
    return counts


def lcg_next(state):
    return (state * LCG_MULTIPLIER + LCG_INCREMENT) & _MASK64


def workload_series(profile, base_u, period, duration, spike_threshold,
                    spike_mult_u, step_u, seed, horizon):
    """Per-tick arrival rates in micro-messages/second.

    ``spike_threshold`` is the spike probability expressed against the
    53-bit uniform draw, i.e. ``int(p * 2**53)``; ``spike_mult_u`` is the
    spike multiplier in micro-units.
    """
    state = seed & _MASK64
    out = [0] * horizon
    rate = base_u
    for t in range(horizon):
        if profile == RANDOM_WALK:
            if t > 0:
                state = lcg_next(state)
                if state >> 63:
                    rate = rate + step_u
                else:
                    rate = rate - step_u
                    if rate < 0:
                        rate = 0
            out[t] = rate
        else:
            r = base_u if (t % period) < duration else 0
            if profile == PERIODIC_SPIKY:
                state = lcg_next(state)
                if (state >> 11) < spike_threshold:
                    r = r * spike_mult_u // SCALE
            out[t] = r
    return out


def pipeline_tick(queues, credits, outcarry, cores, inst_rate_u, select_u,
                  alpha, inflow, arrivals, processed):
    """Advance a linear pipeline by one tick, in place.

    ``inflow`` whole messages enter stage 0; each stage processes up to its
    capacity and forwards ``processed * selectivity`` messages to the next
    stage within the same tick. Returns the messages leaving the last stage.
    """
    carry_in = inflow
    for i in range(len(queues)):
        arrivals[i] = carry_in
        q = queues[i] + carry_in
        cap = cores[i] * alpha * inst_rate_u[i] + credits[i]
        whole = cap // SCALE
        if q >= whole:
            done = whole
            credits[i] = cap - whole * SCALE
        else:
            done = q
            credits[i] = 0
        queues[i] = q - done
        processed[i] = done
        out = done * select_u[i] + outcarry[i]
        carry_in = out // SCALE
        outcarry[i] = out - carry_in * SCALE
    return carry_in
