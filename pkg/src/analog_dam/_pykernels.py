"""Pure NumPy integration kernel.

Reference implementation of ``advance``; the Cython module ``_ckernels``
exposes the same function and must agree with this one to rounding.
"""
import numpy as np

RUNNING, CONVERGED, NONFINITE = 0, 1, 2


def _hidden_out(h, beta, n_soft, rest_kind):
    f = np.empty_like(h)
    if n_soft:
        z = beta * h[:n_soft]
        e = np.exp(z - z.max())
        f[:n_soft] = e / e.sum()
    rest = h[n_soft:]
    f[n_soft:] = np.maximum(rest, 0.0) if rest_kind == 1 else rest
    return f


def _rhs(xi, a, b, tau_v, tau_h, beta, vis_kind, n_soft, rest_kind, v, h, free):
    """Return residuals ``(tau_v dv, tau_h dh)``; in adiabatic mode ``h`` is overwritten."""
    g = np.maximum(v, 0.0) if vis_kind == 1 else v
    if tau_h == 0.0:
        h[:] = xi @ g + b
        rh = None
    else:
        rh = xi @ g + b - h
    f = _hidden_out(h, beta, n_soft, rest_kind)
    rv = (xi.T @ f + a - v) * free
    return rv, rh


def advance(xi, a, b, tau_v, tau_h, beta, vis_kind, n_soft, rest_kind,
            v, h, free, dt, n_steps, method, conv_eps):
    """Integrate in place for up to ``n_steps`` steps.

    Returns ``(steps_done, status)``.  Convergence is tested on the state
    before each step, so ``steps_done`` is the step index at which the
    criterion first held.
    """
    free = np.asarray(free, dtype=float)
    full = tau_h != 0.0
    args = (xi, a, b, tau_v, tau_h, beta, vis_kind, n_soft, rest_kind)
    for step in range(n_steps):
        rv, rh = _rhs(*args, v, h, free)
        if np.max(np.abs(rv), initial=0.0) <= conv_eps and (
            not full or np.max(np.abs(rh), initial=0.0) <= conv_eps
        ):
            return step, CONVERGED
        if method == 0:
            v += (dt / tau_v) * rv
            if full:
                h += (dt / tau_h) * rh
        else:
            v0, h0 = v.copy(), h.copy()
            kv, kh = [rv], [rh]
            for frac in (0.5, 0.5, 1.0):
                vs = v0 + (frac * dt / tau_v) * kv[-1]
                hs = h0 + (frac * dt / tau_h) * kh[-1] if full else h0.copy()
                r1, r2 = _rhs(*args, vs, hs, free)
                kv.append(r1)
                kh.append(r2)
            v[:] = v0 + (dt / (6.0 * tau_v)) * (kv[0] + 2 * kv[1] + 2 * kv[2] + kv[3])
            if full:
                h[:] = h0 + (dt / (6.0 * tau_h)) * (kh[0] + 2 * kh[1] + 2 * kh[2] + kh[3])
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(h))):
            return step, NONFINITE
    if not full:
        _rhs(*args, v, h, free)
    return n_steps, RUNNING
