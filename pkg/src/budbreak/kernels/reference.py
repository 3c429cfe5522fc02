"""Pure-NumPy GRU sequence recurrence (forward and backward).

Used as the fallback when the compiled extension is unavailable, and as the
semantic reference the extension is checked against. The time loop is the
only sequential part of the model; everything feeding it is batched matmuls
handled elsewhere.

Conventions shared with the compiled kernel:
  xg    (B, H, 3h)  input-side gate pre-activations, gate order (z, r, n),
                    with the input-side biases already folded in
  u     (3h, h)     stacked hidden-side weights [Uz; Ur; Un]
  b_hn  (h,)        hidden-side candidate bias (multiplied by the reset gate)
  h0    (B, h)      initial state
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


def gru_sequence_forward(xg, u, b_hn, h0):
    """Run the recurrence over all H steps; returns (hs, z, r, m, n) caches."""
    B, H, three_h = xg.shape
    h = three_h // 3
    hs = np.empty((B, H, h))
    zs = np.empty((B, H, h))
    rs = np.empty((B, H, h))
    ms = np.empty((B, H, h))
    ns = np.empty((B, H, h))
    ut = u.T
    hp = h0
    for t in range(H):
        p = hp @ ut
        z = expit(xg[:, t, :h] + p[:, :h])
        r = expit(xg[:, t, h:2 * h] + p[:, h:2 * h])
        m = p[:, 2 * h:] + b_hn
        n = np.tanh(xg[:, t, 2 * h:] + r * m)
        hp = (1.0 - z) * n + z * hp
        hs[:, t] = hp
        zs[:, t] = z
        rs[:, t] = r
        ms[:, t] = m
        ns[:, t] = n
    return hs, zs, rs, ms, ns


def gru_sequence_backward(u, b_hn, h0, hs, zs, rs, ms, ns, d_hs):
    """Backward pass through the recurrence.

    d_hs carries the per-step upstream gradients; the recurrent chain is
    accumulated internally. Returns (d_xg, d_u, d_bhn, d_h0).
    """
    B, H, h = hs.shape
    d_xg = np.empty((B, H, 3 * h))
    d_u = np.zeros_like(u)
    d_bhn = np.zeros_like(b_hn)
    carry = np.zeros((B, h))
    for t in range(H - 1, -1, -1):
        dht = d_hs[:, t] + carry
        z = zs[:, t]
        r = rs[:, t]
        m = ms[:, t]
        n = ns[:, t]
        hp = hs[:, t - 1] if t > 0 else h0
        dn = dht * (1.0 - z)
        dz = dht * (hp - n)
        dan = dn * (1.0 - n * n)
        dr = dan * m
        dm = dan * r
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        d_xg[:, t, :h] = daz
        d_xg[:, t, h:2 * h] = dar
        d_xg[:, t, 2 * h:] = dan
        d_bhn += dm.sum(axis=0)
        dp = np.concatenate([daz, dar, dm], axis=1)
        carry = dht * z + dp @ u
        d_u += dp.T @ hp
    return d_xg, d_u, d_bhn, carry
