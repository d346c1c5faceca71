"""Positive orthogonal random-feature attention and its redraw schedule."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .spec import MsaParams, orthogonal_features

DEN_EPS = 1e-8


def _features(x, omega, per_row):
    """``exp(x' w^T - |x'|^2 / 2 - c) / sqrt(m)`` with ``x' = x d_h^{-1/4}``.

    ``c`` is a row max for queries and a global max for keys; it cancels in
    the attention ratio so it is treated as a constant in the backward.
    """
    xs = x * np.asarray(x.shape[-1] ** -0.25, x.dtype)
    u = np.matmul(xs, omega.T) - 0.5 * (xs * xs).sum(axis=-1, keepdims=True)
    if per_row:
        u = u - u.max(axis=-1, keepdims=True)
    else:
        u = u - u.max(axis=(-2, -1), keepdims=True)
    return np.exp(u) * np.asarray(omega.shape[0] ** -0.5, x.dtype), xs


@dataclass
class PerformerCache:
    omega: np.ndarray
    v: np.ndarray
    phi_q: np.ndarray
    phi_k: np.ndarray
    qs: np.ndarray
    ks: np.ndarray
    kv: np.ndarray
    ksum: np.ndarray
    den: np.ndarray
    out: np.ndarray


def performer_attend(q, k, v, omega, strict=False):
    """Linear-time approximation of softmax attention on ``(h, N, d_h)`` inputs."""
    phi_q, qs = _features(q, omega, per_row=True)
    phi_k, ks = _features(k, omega, per_row=False)
    kv = np.matmul(np.swapaxes(phi_k, 1, 2), v)  # (h, m, d_h)
    ksum = phi_k.sum(axis=1)  # (h, m)
    num = np.matmul(phi_q, kv)
    den = np.einsum("hnm,hm->hn", phi_q, ksum)
    if strict and np.any(den < DEN_EPS):
        raise FloatingPointError("performer normaliser vanished for some query row")
    den = np.maximum(den, DEN_EPS)
    out = num / den[..., None]
    return out, PerformerCache(omega, v, phi_q, phi_k, qs, ks, kv, ksum, den, out)


def _feature_backward(dphi, phi, xs, omega):
    du = dphi * phi
    dxs = np.matmul(du, omega) - du.sum(axis=-1, keepdims=True) * xs
    return dxs * np.asarray(xs.shape[-1] ** -0.25, xs.dtype)


def performer_backward(cache: PerformerCache, grad_out):
    """Return ``(dq, dk, dv)``."""
    c = cache
    dnum = grad_out / c.den[..., None]
    dden = -(grad_out * c.out).sum(axis=-1) / c.den
    dphi_q = np.matmul(dnum, np.swapaxes(c.kv, 1, 2)) + dden[..., None] * c.ksum[:, None, :]
    dkv = np.matmul(np.swapaxes(c.phi_q, 1, 2), dnum)
    dksum = np.einsum("hnm,hn->hm", c.phi_q, dden)
    dphi_k = np.matmul(c.v, np.swapaxes(dkv, 1, 2)) + dksum[:, None, :]
    dv = np.matmul(c.phi_k, dkv)
    dq = _feature_backward(dphi_q, c.phi_q, c.qs, c.omega)
    dk = _feature_backward(dphi_k, c.phi_k, c.ks, c.omega)
    return dq, dk, dv


def redraw_interval(epoch: int, policy="classification", every: int = 1000) -> int:
    """Steps between redraws: ``1 + 5 * epoch`` for classification, ``every`` otherwise."""
    if policy == "classification":
        return 1 + 5 * epoch
    if policy == "fixed":
        return every
    raise ValueError(f"unknown redraw policy {policy!r}")


def redraw_due(step: int, epoch: int, policy="classification", every: int = 1000) -> bool:
    return step % redraw_interval(epoch, policy, every) == 0


def redraw_features(params: MsaParams, rng, step: int, epoch: int,
                    policy="classification", every: int = 1000) -> MsaParams:
    """Return params with a fresh orthogonal draw when the policy fires, else unchanged."""
    if params.omega is None:
        raise ValueError("redraw_features applies to Performer parameters only")
    if not redraw_due(step, epoch, policy, every):
        return params
    m, dh = params.omega.shape
    return replace(params, omega=orthogonal_features(m, dh, rng, params.omega.dtype))
