"""Hot edge-indexed kernels for attention message passing.

Every kernel has a pure-numpy implementation (``ufunc.at`` based) and a numba
``@njit`` twin. The numba path is used when numba imports cleanly and the
environment variable ``SPOTGRAPH_NUMBA`` is not set to ``0``; the selection
can also be flipped at runtime with :func:`set_backend` (used by the backend
benchmark and the equivalence tests). Both paths accumulate in edge order.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_ENV_FLAG = os.environ.get("SPOTGRAPH_NUMBA", "1").strip().lower()
_USE_NUMBA = HAVE_NUMBA and _ENV_FLAG not in ("0", "false", "off")


def set_backend(name: str) -> None:
    """Select 'numba' or 'numpy' at runtime (overrides the env flag)."""
    global _USE_NUMBA
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not importable")
        _USE_NUMBA = True
    elif name == "numpy":
        _USE_NUMBA = False
    else:
        raise ValueError(f"unknown backend {name!r}")


def active_backend() -> str:
    return "numba" if _USE_NUMBA else "numpy"


# -- numpy fallbacks -----------------------------------------------------------

def _scatter_add_np(idx, vals, n):
    out = np.zeros((n,) + vals.shape[1:], dtype=vals.dtype)
    np.add.at(out, idx, vals)
    return out


def _scatter_max_np(idx, vals, n):
    out = np.full((n,) + vals.shape[1:], -np.inf, dtype=vals.dtype)
    np.maximum.at(out, idx, vals)
    return out


def _attn_combine_np(alpha, proj, src, dst, n):
    out = np.zeros((n,) + proj.shape[1:], dtype=proj.dtype)
    np.add.at(out, dst, alpha[:, :, None] * proj[src])
    return out


def _attn_combine_bwd_np(alpha, proj, gout, src, dst):
    galpha = np.einsum("ehd,ehd->eh", gout[dst], proj[src])
    gproj = np.zeros_like(proj)
    np.add.at(gproj, src, alpha[:, :, None] * gout[dst])
    return galpha, gproj


# -- numba kernels ---------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _scatter_add_nb(out, idx, vals):
        for e in range(idx.shape[0]):
            i = idx[e]
            for k in range(vals.shape[1]):
                out[i, k] += vals[e, k]

    @njit(cache=True)
    def _scatter_max_nb(out, idx, vals):
        for e in range(idx.shape[0]):
            i = idx[e]
            for k in range(vals.shape[1]):
                if vals[e, k] > out[i, k]:
                    out[i, k] = vals[e, k]

    @njit(cache=True)
    def _attn_combine_nb(alpha, proj, src, dst, out):
        for e in range(src.shape[0]):
            s = src[e]
            d = dst[e]
            for h in range(proj.shape[1]):
                a = alpha[e, h]
                for k in range(proj.shape[2]):
                    out[d, h, k] += a * proj[s, h, k]

    @njit(cache=True)
    def _attn_combine_bwd_nb(alpha, proj, gout, src, dst, galpha, gproj):
        for e in range(src.shape[0]):
            s = src[e]
            d = dst[e]
            for h in range(proj.shape[1]):
                acc = 0.0
                a = alpha[e, h]
                for k in range(proj.shape[2]):
                    g = gout[d, h, k]
                    acc += g * proj[s, h, k]
                    gproj[s, h, k] += a * g
                galpha[e, h] = acc


# -- dispatching public surface ------------------------------------------------

def scatter_add(idx: np.ndarray, vals: np.ndarray, n: int) -> np.ndarray:
    """out[idx[e], :] += vals[e, :] over a zero-initialized (n, K) array."""
    if _USE_NUMBA:
        out = np.zeros((n,) + vals.shape[1:], dtype=vals.dtype)
        _scatter_add_nb(out, idx, vals)
        return out
    return _scatter_add_np(idx, vals, n)


def scatter_max(idx: np.ndarray, vals: np.ndarray, n: int) -> np.ndarray:
    """Per-index column-wise maximum; untouched rows stay at -inf."""
    if _USE_NUMBA:
        out = np.full((n,) + vals.shape[1:], -np.inf, dtype=vals.dtype)
        _scatter_max_nb(out, idx, vals)
        return out
    return _scatter_max_np(idx, vals, n)


def attn_combine(alpha: np.ndarray, proj: np.ndarray, src: np.ndarray,
                 dst: np.ndarray, n: int) -> np.ndarray:
    """out[i, h, :] = sum over edges e with dst[e] == i of alpha[e, h] * proj[src[e], h, :]."""
    if _USE_NUMBA:
        out = np.zeros((n,) + proj.shape[1:], dtype=proj.dtype)
        _attn_combine_nb(alpha, proj, src, dst, out)
        return out
    return _attn_combine_np(alpha, proj, src, dst, n)


def attn_combine_backward(alpha: np.ndarray, proj: np.ndarray, gout: np.ndarray,
                          src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`attn_combine` w.r.t. alpha and proj.

    Returns (galpha (E, H), gproj (n, H, D)); the gproj part covers only the
    aggregation path (the caller adds the score-path contribution).
    """
    if _USE_NUMBA:
        galpha = np.zeros(alpha.shape, dtype=proj.dtype)
        gproj = np.zeros_like(proj)
        _attn_combine_bwd_nb(alpha, proj, gout, src, dst, galpha, gproj)
        return galpha, gproj
    return _attn_combine_bwd_np(alpha, proj, gout, src, dst)
