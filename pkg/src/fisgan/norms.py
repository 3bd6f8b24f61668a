"""Per-example generator Jacobian norms (frobenius or nuclear)."""

from __future__ import annotations

import numpy as np

from . import linalg, nn
from .errors import ShapeError

NORM_KINDS = ("frobenius", "nuclear")


def jacobian_norm(j, kind="frobenius"):
    """Matrix norm of a Jacobian: frobenius = sqrt(sum of squares),
    nuclear = sum of singular values."""
    j = np.asarray(j, dtype=np.float64)
    if kind not in NORM_KINDS:
        raise ValueError(f"unknown norm kind {kind!r}")
    if not np.all(np.isfinite(j)):
        raise ShapeError("Jacobian contains non-finite entries")
    if kind == "frobenius":
        return float(np.sqrt((j * j).sum()))
    return float(linalg.singular_values(j).sum())


def batch_norms(net: nn.MlpNet, latents, kind="frobenius"):
    """Jacobian norm of the net at every latent row, shape (n,)."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[1] != net.in_dim:
        raise ShapeError(
            f"latent shape {latents.shape} incompatible with net input {net.in_dim}"
        )
    jac = nn.jacobian_batch(net, latents)
    if kind == "frobenius":
        return np.sqrt((jac * jac).sum(axis=(1, 2)))
    return np.array([jacobian_norm(jac[i], "nuclear") for i in range(jac.shape[0])])
