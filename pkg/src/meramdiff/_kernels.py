"""Compiled inner loops.

Everything here works on plain floats and numpy arrays so the Python layer
keeps ownership of random streams; the kernels never draw random numbers.
"""

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def heun_chunk(m, hk, hx, hy, hz, g, alpha, dt, noise, sigma, e_stop, check_every):
    """Advance ``m`` in place through ``len(noise)`` stochastic Heun steps.

    The deterministic field is ``hk * m_z * z + h_ext`` and the thermal field
    for step ``i`` is ``sigma * noise[i]`` (held fixed across predictor and
    corrector, which is what makes the scheme Stratonovich).

    If ``check_every > 0`` the reduced energy ``hk/2 (1 - m_z^2) - h.m`` is
    evaluated every ``check_every`` steps and integration stops once it drops
    below ``e_stop``.

    Returns the number of steps taken.
    """
    mx = m[0]
    my = m[1]
    mz = m[2]
    n = noise.shape[0]
    done = n
    for i in range(n):
        tx = sigma * noise[i, 0]
        ty = sigma * noise[i, 1]
        tz = sigma * noise[i, 2]
        Hx = hx + tx
        Hy = hy + ty
        Hz = hz + tz + hk * mz
        cx = my * Hz - mz * Hy
        cy = mz * Hx - mx * Hz
        cz = mx * Hy - my * Hx
        f1x = -g * (cx + alpha * (my * cz - mz * cy))
        f1y = -g * (cy + alpha * (mz * cx - mx * cz))
        f1z = -g * (cz + alpha * (mx * cy - my * cx))
        px = mx + dt * f1x
        py = my + dt * f1y
        pz = mz + dt * f1z
        Hz = hz + tz + hk * pz
        cx = py * Hz - pz * Hy
        cy = pz * Hx - px * Hz
        cz = px * Hy - py * Hx
        f2x = -g * (cx + alpha * (py * cz - pz * cy))
        f2y = -g * (cy + alpha * (pz * cx - px * cz))
        f2z = -g * (cz + alpha * (px * cy - py * cx))
        mx += 0.5 * dt * (f1x + f2x)
        my += 0.5 * dt * (f1y + f2y)
        mz += 0.5 * dt * (f1z + f2z)
        s = 1.0 / np.sqrt(mx * mx + my * my + mz * mz)
        mx *= s
        my *= s
        mz *= s
        if check_every > 0 and (i + 1) % check_every == 0:
            e = 0.5 * hk * (1.0 - mz * mz) - (hx * mx + hy * my + hz * mz)
            if e < e_stop:
                done = i + 1
                break
    m[0] = mx
    m[1] = my
    m[2] = mz
    return done


@numba.njit(cache=True, nogil=True)
def heun_record(m, hk, hx, hy, hz, g, alpha, dt, noise, sigma, out):
    """Like :func:`heun_chunk` without early stopping, writing every state to ``out``.

    ``out`` has shape ``(len(noise) + 1, 3)``; row 0 is the initial state.
    """
    out[0, 0] = m[0]
    out[0, 1] = m[1]
    out[0, 2] = m[2]
    one = np.empty((1, 3))
    for i in range(noise.shape[0]):
        one[0, 0] = noise[i, 0]
        one[0, 1] = noise[i, 1]
        one[0, 2] = noise[i, 2]
        heun_chunk(m, hk, hx, hy, hz, g, alpha, dt, one, sigma, 0.0, 0)
        out[i + 1, 0] = m[0]
        out[i + 1, 1] = m[1]
        out[i + 1, 2] = m[2]


@numba.njit(cache=True, nogil=True)
def chain_walk(state, flip_from_p, flip_from_ap, u):
    """Run independent two-state chains, one per column of ``u``.

    ``state`` (n_bits,) holds 0/1 and is updated in place. For row ``t`` bit
    ``k`` flips when ``u[t, k]`` is below its flip probability from the
    current state. Returns the ``(n_steps, n_bits)`` visited states.
    """
    n_steps, n_bits = u.shape
    out = np.empty((n_steps, n_bits), dtype=np.uint8)
    for t in range(n_steps):
        for k in range(n_bits):
            if state[k] == 0:
                if u[t, k] < flip_from_p[k]:
                    state[k] = 1
            else:
                if u[t, k] < flip_from_ap[k]:
                    state[k] = 0
            out[t, k] = state[k]
    return out


@numba.njit(cache=True, nogil=True)
def chain_walk_two_kernel(state, skip_p, skip_ap, flip_p, flip_ap, u):
    """Alternate an n-step "skip" kernel and a one-step kernel per draw.

    For each draw ``t`` every bit first moves with the skip kernel (using
    ``u[t, k, 0]``) and is recorded as the "previous" state, then takes one
    ordinary step (``u[t, k, 1]``) and is recorded as the "current" state.
    Returns two ``(n_draws, n_bits)`` arrays.
    """
    n_draws, n_bits, _ = u.shape
    prev = np.empty((n_draws, n_bits), dtype=np.uint8)
    cur = np.empty((n_draws, n_bits), dtype=np.uint8)
    for t in range(n_draws):
        for k in range(n_bits):
            s = state[k]
            if s == 0:
                if u[t, k, 0] < skip_p[k]:
                    s = 1
            else:
                if u[t, k, 0] < skip_ap[k]:
                    s = 0
            prev[t, k] = s
            if s == 0:
                if u[t, k, 1] < flip_p[k]:
                    s = 1
            else:
                if u[t, k, 1] < flip_ap[k]:
                    s = 0
            cur[t, k] = s
            state[k] = s
    return prev, cur
