"""Triple scoring functions with analytic gradients.

Two calling conventions are provided:

* single-triple functions (``score_transe``, ``score_complex``,
  ``score_rotate``, ``score_grad``) taking real or complex 1-d arrays;
* packed, batched functions (``score_packed``, ``score_packed_grad``) used by
  the model, where every embedding is a real array. Complex vectors are packed
  as ``[real parts | imaginary parts]`` (width ``2n``) and RotatE relations are
  stored as ``n`` phases.

TransE and RotatE use the L2 norm. At the kink ``||.|| = 0`` their gradient is
defined as zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCORERS = ("transe", "complex", "rotate")


@dataclass(frozen=True)
class ScoreGradient:
    """Partial derivatives of a score.

    For complex inputs the gradient is stored as ``d/dRe + 1j * d/dIm``.
    """

    d_head: np.ndarray
    d_relation: np.ndarray
    d_tail: np.ndarray


def check_kind(kind: str) -> str:
    kind = kind.lower()
    if kind not in SCORERS:
        raise ValueError(f"unknown scorer {kind!r}; expected one of {SCORERS}")
    return kind


def entity_width(kind: str, dim: int) -> int:
    """Number of stored reals per entity embedding of complex/real dimension ``dim``."""
    return dim if check_kind(kind) == "transe" else 2 * dim


def relation_width(kind: str, dim: int) -> int:
    return 2 * dim if check_kind(kind) == "complex" else dim


def _vec(x, dtype) -> np.ndarray:
    a = np.asarray(x, dtype=dtype)
    if a.ndim != 1 or a.size == 0:
        raise ValueError(f"expected a non-empty 1-d vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("embedding contains non-finite entries")
    return a


def _same_dim(*vs: np.ndarray) -> None:
    if len({v.shape[0] for v in vs}) != 1:
        raise ValueError(f"dimension mismatch: {[v.shape[0] for v in vs]}")


def score_transe(h, r, t) -> float:
    h, r, t = (_vec(x, np.float64) for x in (h, r, t))
    _same_dim(h, r, t)
    return -float(np.linalg.norm(h + r - t))


def score_complex(h, r, t) -> float:
    h, r, t = (_vec(x, np.complex128) for x in (h, r, t))
    _same_dim(h, r, t)
    return float(np.real(np.sum(h * r * np.conj(t))))


def score_rotate(h, theta, t) -> float:
    h, t = (_vec(x, np.complex128) for x in (h, t))
    theta = _vec(theta, np.float64)
    _same_dim(h, theta, t)
    return -float(np.linalg.norm(h * np.exp(1j * theta) - t))


def pack_complex(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.complex128)
    return np.concatenate([z.real, z.imag], axis=-1)


def unpack_complex(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1] // 2
    return x[..., :n] + 1j * x[..., n:]


def score_grad(kind: str, h, r, t) -> tuple[float, ScoreGradient]:
    """Score of one triple and its gradient w.r.t. every input coordinate."""
    kind = check_kind(kind)
    if kind == "transe":
        h, r, t = (_vec(x, np.float64) for x in (h, r, t))
        _same_dim(h, r, t)
        s, dh, dr, dt = score_packed_grad(kind, h, r, t)
        return float(s), ScoreGradient(dh, dr, dt)
    h, t = (_vec(x, np.complex128) for x in (h, t))
    if kind == "complex":
        r = _vec(r, np.complex128)
        _same_dim(h, r, t)
        s, dh, dr, dt = score_packed_grad(kind, pack_complex(h), pack_complex(r), pack_complex(t))
        return float(s), ScoreGradient(unpack_complex(dh), unpack_complex(dr), unpack_complex(dt))
    r = _vec(r, np.float64)
    _same_dim(h, r, t)
    s, dh, dr, dt = score_packed_grad(kind, pack_complex(h), r, pack_complex(t))
    return float(s), ScoreGradient(unpack_complex(dh), dr, unpack_complex(dt))


def _split(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = x.shape[-1] // 2
    return x[..., :n], x[..., n:]


def _check_packed(kind: str, h: np.ndarray, r: np.ndarray, t: np.ndarray) -> None:
    if h.shape[-1] != t.shape[-1]:
        raise ValueError(f"dimension mismatch: head {h.shape[-1]} vs tail {t.shape[-1]}")
    want = h.shape[-1] if kind != "rotate" else h.shape[-1] // 2
    if r.shape[-1] != want or (kind != "transe" and h.shape[-1] % 2):
        raise ValueError(f"dimension mismatch for {kind}: entity {h.shape[-1]}, relation {r.shape[-1]}")


def score_packed(kind: str, h, r, t) -> np.ndarray:
    """Scores of packed embeddings; leading axes broadcast."""
    kind = check_kind(kind)
    h, r, t = (np.asarray(x, dtype=np.float64) for x in (h, r, t))
    _check_packed(kind, h, r, t)
    if kind == "transe":
        return -np.sqrt(np.sum((h + r - t) ** 2, axis=-1))
    a, b = _split(h)
    e, f = _split(t)
    if kind == "complex":
        c, d = _split(r)
        # Re(h r conj(t)) with h=a+ib, r=c+id, t=e+if
        return np.sum((a * c - b * d) * e + (a * d + b * c) * f, axis=-1)
    cos, sin = np.cos(r), np.sin(r)
    ur = a * cos - b * sin - e
    ui = a * sin + b * cos - f
    return -np.sqrt(np.sum(ur ** 2 + ui ** 2, axis=-1))


def score_packed_grad(kind: str, h, r, t):
    """Return ``(score, d_head, d_relation, d_tail)`` for packed inputs.

    Gradient arrays have the broadcast shape of all three inputs; callers
    reduce over broadcast axes themselves.
    """
    kind = check_kind(kind)
    h, r, t = (np.asarray(x, dtype=np.float64) for x in (h, r, t))
    _check_packed(kind, h, r, t)
    if kind == "transe":
        diff = h + r - t
        norm = np.sqrt(np.sum(diff ** 2, axis=-1, keepdims=True))
        unit = np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 0)
        return -norm[..., 0], -unit, -unit, unit
    a, b = _split(h)
    e, f = _split(t)
    if kind == "complex":
        c, d = _split(r)
        re = a * c - b * d
        im = a * d + b * c
        s = np.sum(re * e + im * f, axis=-1)
        dh = np.concatenate([c * e + d * f, c * f - d * e], axis=-1)
        dr = np.concatenate([a * e + b * f, a * f - b * e], axis=-1)
        dt = np.concatenate([re, im], axis=-1)
        return s, dh, dr, dt
    cos, sin = np.cos(r), np.sin(r)
    ur = a * cos - b * sin - e
    ui = a * sin + b * cos - f
    norm = np.sqrt(np.sum(ur ** 2 + ui ** 2, axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    gr = np.where(norm > 0, ur / safe, 0.0)
    gi = np.where(norm > 0, ui / safe, 0.0)
    # d(-norm)/dx = -(ur * dur/dx + ui * dui/dx) / norm
    da = -(gr * cos + gi * sin)
    db = -(-gr * sin + gi * cos)
    dtheta = -(gr * (-a * sin - b * cos) + gi * (a * cos - b * sin))
    dh = np.concatenate([da, db], axis=-1)
    dt = np.concatenate([gr, gi], axis=-1)
    return -norm[..., 0], dh, dtheta, dt
