"""Compiled inner loops: reflected-diffusion paths and Loewner flows.

Everything here is a pure function of explicit scalar/array arguments so
numba's on-disk cache stays valid across processes.  Grid values of the
angular path are clamped to the touched boundary on crossing steps (the
continuum path hits the boundary inside such a step); the Markov state
itself continues from the mirrored proposal.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

TWO_PI = 2.0 * np.pi

# Adaptive-step policy for the Loewner field -g(g+W)/(g-W): step length
# proportional to |g - W|^2 keeps h * Lipschitz ~ const near the
# singularity while the substep count stays logarithmic in the closest
# approach distance.
C_ADAPT = 0.05
H_FLOOR_FWD = 1e-13
H_FLOOR_REV = 1e-16


# Near-barrier step tables.  The bridge-crossing probability is sampled
# uniformly in w = z**(1/3) on [0, W_MAX_BRIDGE]; beyond that it is below
# 1e-26 and treated as zero.  The endpoint quantile surface r(s, n) is sampled
# on [0, ENDPOINT_S_MAX] x [-ENDPOINT_N_ABS, ENDPOINT_N_ABS] in standardized
# units (distances over sqrt(kappa dt), normal score n); the exact step is
# taken whenever the barrier is closer than LAYER_SIG noise widths.
W_MAX_BRIDGE = 3.2
ENDPOINT_S_MAX = 6.5
ENDPOINT_N_ABS = 6.5
LAYER_SIG = 6.0
_NOISE_CLIP = 6.4999


@njit(cache=True, nogil=True, error_model="numpy", inline="always")
def _bridge_prob_z(z, bridge_tab):
    w = np.cbrt(z)
    if w >= W_MAX_BRIDGE:
        return 0.0
    x = w * (bridge_tab.shape[0] - 1) / W_MAX_BRIDGE
    i = int(x)
    f = x - i
    return bridge_tab[i] * (1.0 - f) + bridge_tab[i + 1] * f


@njit(cache=True, nogil=True, error_model="numpy", inline="always")
def _endpoint_r(endpoint_tab, s, nval):
    if nval > _NOISE_CLIP:
        nval = _NOISE_CLIP
    elif nval < -_NOISE_CLIP:
        nval = -_NOISE_CLIP
    x = s * (endpoint_tab.shape[0] - 1) / ENDPOINT_S_MAX
    y = (nval + ENDPOINT_N_ABS) * (endpoint_tab.shape[1] - 1) / (2.0 * ENDPOINT_N_ABS)
    i = int(x)
    j = int(y)
    fx = x - i
    fy = y - j
    return (
        endpoint_tab[i, j] * (1.0 - fx) * (1.0 - fy)
        + endpoint_tab[i + 1, j] * fx * (1.0 - fy)
        + endpoint_tab[i, j + 1] * (1.0 - fx) * fy
        + endpoint_tab[i + 1, j + 1] * fx * fy
    )


@njit(cache=True, nogil=True, error_model="numpy")
def theta_path(theta0, dt, kappa, half_rho2, noise, uniforms, bridge_tab, endpoint_tab, values):
    """Fill `values` with the reflected path; return first 2pi-hit index or -1.

    Bulk steps are Euler-Maruyama with mirror reflection: drift
    ((rho+2)/2) cot(theta/2) written as -half_rho2 * tan((theta-pi)/2) so it
    is antisymmetric about pi, magnitude capped at 2 sqrt(kappa/dt).

    Within LAYER_SIG noise widths of 2pi that scheme absorbs at a visibly
    wrong rate (the barrier distance is a Bessel diffusion whose absorbed
    density behaves like dist**(1/3), so step-scale errors do not average
    out), and the step is taken instead from the tabulated exact transition
    of the local Bessel law: the endpoint reuses noise[k] through its normal
    score and a hit fires when uniforms[k] falls under the tabulated bridge
    crossing probability at z = dist_before * dist_after / (kappa dt).  Grid
    values on hit steps are clamped to 2pi; the state keeps evolving.
    """
    cap = 2.0 * np.sqrt(kappa / dt)
    sig = np.sqrt(kappa * dt)
    kappa_dt = kappa * dt
    values[0] = theta0
    state = theta0
    hit = -1
    for k in range(noise.shape[0]):
        v = TWO_PI - state
        if v < LAYER_SIG * sig:
            s = v / sig
            r = _endpoint_r(endpoint_tab, s, noise[k])
            state = TWO_PI - r * sig
            if hit < 0 and uniforms[k] < _bridge_prob_z(s * r, bridge_tab):
                hit = k + 1
                values[k + 1] = TWO_PI
            else:
                values[k + 1] = state
            continue
        d = -half_rho2 * np.tan(0.5 * (state - np.pi))
        if d > cap:
            d = cap
        elif d < -cap:
            d = -cap
        p = state + d * dt + sig * noise[k]
        bridge = (
            hit < 0
            and p < TWO_PI
            and uniforms[k] < _bridge_prob_z((TWO_PI - state) * (TWO_PI - p) / kappa_dt, bridge_tab)
        )
        if p <= 0.0:
            values[k + 1] = 0.0
            state = -p
        elif p >= TWO_PI:
            values[k + 1] = TWO_PI
            if hit < 0:
                hit = k + 1
            state = TWO_PI - (p - TWO_PI)
        else:
            values[k + 1] = p
            state = p
        if bridge:
            hit = k + 1
            values[k + 1] = TWO_PI
    return hit


@njit(cache=True, nogil=True, parallel=True, error_model="numpy")
def theta_batch_stats(
    theta0, dt, kappa, half_rho2, noise, uniforms, bridge_tab, endpoint_tab, snap_idx, hits, snaps
):
    """Per-row first 2pi-hit step index (-1 if none) and values at snap_idx.

    noise, uniforms: (rows, steps); snap_idx ascending step indices >= 1; rows
    with a recorded hit stop early once every snapshot is taken.  Steps and
    hit detection follow theta_path exactly.
    """
    cap = 2.0 * np.sqrt(kappa / dt)
    sig = np.sqrt(kappa * dt)
    kappa_dt = kappa * dt
    n_rows, n_steps = noise.shape
    n_snap = snap_idx.shape[0]
    for r in prange(n_rows):
        state = theta0
        hit = -1
        j = 0
        for k in range(n_steps):
            v = TWO_PI - state
            if v < LAYER_SIG * sig:
                s = v / sig
                rr = _endpoint_r(endpoint_tab, s, noise[r, k])
                state = TWO_PI - rr * sig
                if hit < 0 and uniforms[r, k] < _bridge_prob_z(s * rr, bridge_tab):
                    hit = k + 1
                    disp = TWO_PI
                else:
                    disp = state
            else:
                d = -half_rho2 * np.tan(0.5 * (state - np.pi))
                if d > cap:
                    d = cap
                elif d < -cap:
                    d = -cap
                p = state + d * dt + sig * noise[r, k]
                bridge = (
                    hit < 0
                    and p < TWO_PI
                    and uniforms[r, k]
                    < _bridge_prob_z((TWO_PI - state) * (TWO_PI - p) / kappa_dt, bridge_tab)
                )
                if p <= 0.0:
                    disp = 0.0
                    state = -p
                elif p >= TWO_PI:
                    disp = TWO_PI
                    if hit < 0:
                        hit = k + 1
                    state = TWO_PI - (p - TWO_PI)
                else:
                    disp = p
                    state = p
                if bridge:
                    hit = k + 1
                    disp = TWO_PI
            if j < n_snap and k + 1 == snap_idx[j]:
                snaps[r, j] = disp
                j += 1
            if hit >= 0 and j >= n_snap:
                break
        hits[r] = hit


@njit(cache=True, nogil=True, error_model="numpy", inline="always")
def _loewner_field(g, w):
    return -g * (g + w) / (g - w)


@njit(cache=True, nogil=True, error_model="numpy")
def flow_forward(phi, dt, z, t_end, eps_swallow, c_adapt, h_floor):
    """Integrate dg/ds = -g(g+W)/(g-W) from g(0)=z to s=t_end.

    W(s) = exp(i phi(s)) with phi interpolated linearly on the uniform grid.
    Returns (alive, g, time_reached); not alive means the point was swallowed
    (or the step collapsed) at time_reached.
    """
    if t_end <= 0.0:
        return True, z, 0.0
    g = z
    s = 0.0
    n_seg = phi.shape[0] - 1
    k = 0
    while k < n_seg:
        seg_lo = k * dt
        seg_hi = (k + 1) * dt
        if seg_hi > t_end:
            seg_hi = t_end
        phi0 = phi[k]
        slope = (phi[k + 1] - phi[k]) / dt
        while s < seg_hi - 1e-15:
            w = np.exp(1j * (phi0 + slope * (s - seg_lo)))
            dist = abs(g - w)
            if dist < eps_swallow:
                return False, g, s
            h = c_adapt * dist * dist
            if h < h_floor:
                return False, g, s
            rem = seg_hi - s
            if h > rem:
                h = rem
            k1 = _loewner_field(g, w)
            wm = np.exp(1j * (phi0 + slope * (s + 0.5 * h - seg_lo)))
            k2 = _loewner_field(g + 0.5 * h * k1, wm)
            k3 = _loewner_field(g + 0.5 * h * k2, wm)
            we = np.exp(1j * (phi0 + slope * (s + h - seg_lo)))
            k4 = _loewner_field(g + h * k3, we)
            g = g + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
            if not (np.isfinite(g.real) and np.isfinite(g.imag)):
                return False, g, s
            # Alive points stay strictly inside the disk; a trajectory that
            # crosses the circle slipped past W and was swallowed there.
            if abs(g) >= 1.0:
                return False, g, s
            s += h
        if seg_hi >= t_end - 1e-15:
            return True, g, t_end
        k += 1
    return True, g, t_end


@njit(cache=True, nogil=True, error_model="numpy")
def flow_forward_deriv(phi, dt, z, t_end, eps_swallow, c_adapt, h_floor):
    """Joint flow of (g, dg/dz); returns (alive, g, deriv)."""
    g = z
    dg = 1.0 + 0.0j
    if t_end <= 0.0:
        return True, g, dg
    s = 0.0
    n_seg = phi.shape[0] - 1
    k = 0
    while k < n_seg:
        seg_lo = k * dt
        seg_hi = (k + 1) * dt
        if seg_hi > t_end:
            seg_hi = t_end
        phi0 = phi[k]
        slope = (phi[k + 1] - phi[k]) / dt
        while s < seg_hi - 1e-15:
            w = np.exp(1j * (phi0 + slope * (s - seg_lo)))
            dist = abs(g - w)
            if dist < eps_swallow:
                return False, g, dg
            h = c_adapt * dist * dist
            if h < h_floor:
                return False, g, dg
            rem = seg_hi - s
            if h > rem:
                h = rem
            wm = np.exp(1j * (phi0 + slope * (s + 0.5 * h - seg_lo)))
            we = np.exp(1j * (phi0 + slope * (s + h - seg_lo)))
            # field -g(g+W)/(g-W); z-derivative factor -(g^2 - 2gW - W^2)/(g-W)^2
            k1 = _loewner_field(g, w)
            l1 = dg * (-(g * g - 2.0 * g * w - w * w) / ((g - w) * (g - w)))
            g2 = g + 0.5 * h * k1
            d2 = dg + 0.5 * h * l1
            k2 = _loewner_field(g2, wm)
            l2 = d2 * (-(g2 * g2 - 2.0 * g2 * wm - wm * wm) / ((g2 - wm) * (g2 - wm)))
            g3 = g + 0.5 * h * k2
            d3 = dg + 0.5 * h * l2
            k3 = _loewner_field(g3, wm)
            l3 = d3 * (-(g3 * g3 - 2.0 * g3 * wm - wm * wm) / ((g3 - wm) * (g3 - wm)))
            g4 = g + h * k3
            d4 = dg + h * l3
            k4 = _loewner_field(g4, we)
            l4 = d4 * (-(g4 * g4 - 2.0 * g4 * we - we * we) / ((g4 - we) * (g4 - we)))
            g = g + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
            dg = dg + (h / 6.0) * (l1 + 2.0 * (l2 + l3) + l4)
            if not (np.isfinite(g.real) and np.isfinite(g.imag)):
                return False, g, dg
            if abs(g) >= 1.0:
                return False, g, dg
            s += h
        if seg_hi >= t_end - 1e-15:
            return True, g, dg
        k += 1
    return True, g, dg


@njit(cache=True, nogil=True, error_model="numpy")
def flow_reverse(phi, dt, t_start, y_start, c_adapt, h_floor):
    """Integrate the Loewner field backward from t_start to 0.

    The backward flow repels from the driving point, so adaptive steps
    proportional to |y - W|^2 expand geometrically away from the tip.
    Returns (ok, y_at_time_0).
    """
    y = y_start
    s = t_start
    if s <= 0.0:
        return True, y
    k = int(np.ceil(s / dt - 1e-9)) - 1
    n_seg = phi.shape[0] - 1
    if k > n_seg - 1:
        k = n_seg - 1
    if k < 0:
        k = 0
    while k >= 0:
        seg_lo = k * dt
        phi0 = phi[k]
        slope = (phi[k + 1] - phi[k]) / dt
        while s > seg_lo + 1e-15:
            w = np.exp(1j * (phi0 + slope * (s - seg_lo)))
            dist = abs(y - w)
            h = c_adapt * dist * dist
            if h < h_floor:
                h = h_floor
            rem = s - seg_lo
            if h > rem:
                h = rem
            k1 = -_loewner_field(y, w)
            wm = np.exp(1j * (phi0 + slope * (s - 0.5 * h - seg_lo)))
            k2 = -_loewner_field(y + 0.5 * h * k1, wm)
            k3 = -_loewner_field(y + 0.5 * h * k2, wm)
            we = np.exp(1j * (phi0 + slope * (s - h - seg_lo)))
            k4 = -_loewner_field(y + h * k3, we)
            y = y + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
            if not (np.isfinite(y.real) and np.isfinite(y.imag)):
                return False, y
            s -= h
        k -= 1
    return True, y


@njit(cache=True, nogil=True, parallel=True, error_model="numpy")
def trace_points(phi, dt, t_samples, eps_tip, c_adapt, h_floor, out):
    """Reverse-flow trace evaluation at each sample time (NaN on failure)."""
    n_seg = phi.shape[0] - 1
    for i in prange(t_samples.shape[0]):
        t = t_samples[i]
        k = int(t / dt)
        if k > n_seg - 1:
            k = n_seg - 1
        if k < 0:
            k = 0
        pha = phi[k] + (phi[k + 1] - phi[k]) * (t / dt - k)
        y0 = (1.0 - eps_tip) * np.exp(1j * pha)
        ok, y = flow_reverse(phi, dt, t, y0, c_adapt, h_floor)
        if ok:
            out[i] = y
        else:
            out[i] = complex(np.nan, np.nan)
