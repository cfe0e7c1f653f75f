# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: batched reacher stepping and GAE recursion.

Operation order mirrors ``_kernels_py`` exactly so both backends agree bit-for-bit.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, sin, cos, ceil, M_PI

cnp.import_array()

# indices into the packed parameter vector, see env.EnvConfig.packed
cdef enum:
    P_BOUND = 0
    P_LO = 4
    P_HI = 7
    P_TIP = 10
    P_OBJZ = 11
    P_CONTACT = 12
    P_FAR = 13
    P_STEPCOST = 14
    P_DSCALE = 15
    P_FARPEN = 16
    P_BONUS = 17
    P_MAXSTEPS = 18


cdef inline double _clamp(double x, double lo, double hi) nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


cdef inline double _wrap(double x) nogil:
    return x - 2.0 * M_PI * ceil((x - M_PI) / (2.0 * M_PI))


cdef inline double _tip_distance(double[:, ::1] pose, double[:, ::1] obj, Py_ssize_t i,
                                 double tip, double objz) nogil:
    cdef double yaw = pose[i, 3], pit = pose[i, 4]
    cdef double sp = sin(pit)
    cdef double dx = pose[i, 0] + tip * (sp * cos(yaw)) - obj[i, 0]
    cdef double dy = pose[i, 1] + tip * (sp * sin(yaw)) - obj[i, 1]
    cdef double dz = pose[i, 2] + tip * (-cos(pit)) - objz
    return sqrt(dx * dx + dy * dy + dz * dz)


def tip_distance(double[:, ::1] pose, double[:, ::1] obj, double[::1] params):
    cdef Py_ssize_t n = pose.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = _tip_distance(pose, obj, i, params[P_TIP], params[P_OBJZ])
    return out


def step_batch(double[:, ::1] pose, double[:, ::1] obj, long long[::1] steps,
               double[:, ::1] actions, double[::1] params):
    """Advance every environment one step in place.

    Returns ``(rewards, distances, reasons)``; reason 0 = running,
    1 = contact, 2 = timeout.
    """
    cdef Py_ssize_t n = pose.shape[0], i, k
    rewards = np.empty(n, dtype=np.float64)
    dists = np.empty(n, dtype=np.float64)
    reasons = np.zeros(n, dtype=np.int8)
    cdef double[::1] r = rewards
    cdef double[::1] d = dists
    cdef signed char[::1] why = reasons
    cdef double a, dist
    cdef long long max_steps = <long long>params[P_MAXSTEPS]
    with nogil:
        for i in range(n):
            for k in range(3):
                a = _clamp(actions[i, k], -params[P_BOUND + k], params[P_BOUND + k])
                pose[i, k] = _clamp(pose[i, k] + a, params[P_LO + k], params[P_HI + k])
            a = _clamp(actions[i, 3], -params[P_BOUND + 3], params[P_BOUND + 3])
            pose[i, 5] = _wrap(pose[i, 5] + a)
            steps[i] += 1
            dist = _tip_distance(pose, obj, i, params[P_TIP], params[P_OBJZ])
            d[i] = dist
            if dist <= params[P_CONTACT]:
                r[i] = params[P_BONUS]
                why[i] = 1
            else:
                if dist > params[P_FAR]:
                    r[i] = -params[P_FARPEN]
                else:
                    r[i] = -params[P_DSCALE] * dist - params[P_STEPCOST]
                if steps[i] >= max_steps:
                    why[i] = 2
    return rewards, dists, reasons


def gae(double[:, ::1] rewards, double[:, ::1] values, double[:, ::1] dones,
        double[::1] last_values, double gamma, double lam):
    """Time-reversed GAE recursion over a (T, n_agents) rollout."""
    cdef Py_ssize_t T = rewards.shape[0], n = rewards.shape[1], t, j
    adv = np.empty((T, n), dtype=np.float64)
    cdef double[:, ::1] A = adv
    cdef double nxt, carry, notdone, delta
    with nogil:
        for j in range(n):
            carry = 0.0
            for t in range(T - 1, -1, -1):
                if t == T - 1:
                    nxt = last_values[j]
                else:
                    nxt = values[t + 1, j]
                notdone = 1.0 - dones[t, j]
                delta = rewards[t, j] + gamma * notdone * nxt - values[t, j]
                carry = delta + gamma * lam * notdone * carry
                A[t, j] = carry
    return adv
