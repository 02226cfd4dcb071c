"""SSL objectives over projected embeddings.

Paired batches are interleaved: rows ``2i`` and ``2i + 1`` are the two views
of sample ``i``. Every loss returns a :class:`LossReport` whose ``total`` is a
differentiable 0-d tensor.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import DegenerateBatch, UnknownMethod, ZeroNorm


@dataclass
class LossReport:
    total: torch.Tensor
    components: dict[str, float] = field(default_factory=dict)
    method: str = ""

    @property
    def value(self) -> float:
        return float(self.total.detach())

    def as_dict(self) -> dict:
        return {"method": self.method, "total": self.value, **self.components}


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def _normalize_rows(z: torch.Tensor) -> torch.Tensor:
    norms = z.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise ZeroNorm("embedding row with zero norm")
    return z / norms


def interleave(z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """Stack two N x d view batches into the 2N x d paired layout."""
    return torch.stack([z1, z2], dim=1).reshape(-1, z1.shape[1])


def ntxent_loss(batch, temperature: float = 0.5) -> LossReport:
    """Normalized-temperature cross entropy over interleaved positive pairs.

    Each anchor's positive sits in the softmax denominator alongside the other
    2N - 2 rows; self-similarity is excluded.
    """
    z = _as_tensor(batch)
    n = z.shape[0]
    if n < 4 or n % 2:
        raise DegenerateBatch(f"NT-Xent needs an even number of rows >= 4, got {n}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    zn = _normalize_rows(z)
    logits = zn @ zn.T / temperature
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(eye, float("-inf"))
    partner = torch.arange(n, device=z.device) ^ 1
    loss = F.cross_entropy(logits, partner)
    return LossReport(loss, {"ntxent": float(loss.detach())}, "simclr")


def byol_loss(predictions, targets) -> LossReport:
    """Mean of ``2 - 2 cos(p, z)``; targets never receive gradient."""
    p = _as_tensor(predictions)
    t = _as_tensor(targets).detach()
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(t.shape)}")
    pn, tn = _normalize_rows(p), _normalize_rows(t)
    loss = (2 - 2 * (pn * tn).sum(dim=1)).mean()
    return LossReport(loss, {"byol": float(loss.detach())}, "byol")


def _variance_term(z: torch.Tensor, gamma: float, eps: float) -> torch.Tensor:
    std = torch.sqrt(z.var(dim=0) + eps)
    return F.relu(gamma - std).mean()


def _covariance_term(z: torch.Tensor) -> torch.Tensor:
    n, d = z.shape
    zc = z - z.mean(dim=0)
    cov = zc.T @ zc / (n - 1)
    off = cov - torch.diag(torch.diagonal(cov))
    return off.pow(2).sum() / d


def vicreg_loss(z1, z2, lam: float = 25.0, mu: float = 25.0, nu: float = 1.0,
                gamma: float = 1.0, eps: float = 1e-4) -> LossReport:
    z1, z2 = _as_tensor(z1), _as_tensor(z2)
    if z1.shape != z2.shape:
        raise ValueError(f"shape mismatch {tuple(z1.shape)} vs {tuple(z2.shape)}")
    if z1.shape[0] < 2:
        raise DegenerateBatch("VICReg needs at least two samples per branch")
    if min(lam, mu, nu) < 0:
        raise ValueError("VICReg coefficients must be non-negative")
    inv = F.mse_loss(z1, z2)
    var = 0.5 * (_variance_term(z1, gamma, eps) + _variance_term(z2, gamma, eps))
    cov = 0.5 * (_covariance_term(z1) + _covariance_term(z2))
    total = lam * inv + mu * var + nu * cov
    comps = {"invariance": float(inv.detach()), "variance": float(var.detach()),
             "covariance": float(cov.detach())}
    return LossReport(total, comps, "vicreg")


def ssl_batch_loss(method: str, operands: dict, hyper=None) -> LossReport:
    """Dispatch to the chosen objective.

    ``operands`` per method:
      simclr: ``z1``, ``z2`` (projections of each view)
      byol:   ``p1``, ``p2`` (online predictions) and ``t1``, ``t2`` (target projections)
      vicreg: ``z1``, ``z2``
    ``hyper`` is any object exposing the config's loss attributes.
    """
    if method == "simclr":
        tau = getattr(hyper, "temperature", 0.5)
        return ntxent_loss(interleave(operands["z1"], operands["z2"]), tau)
    if method == "byol":
        a = byol_loss(operands["p1"], operands["t2"])
        b = byol_loss(operands["p2"], operands["t1"])
        total = 0.5 * (a.total + b.total)
        return LossReport(total, {"byol": float(total.detach())}, "byol")
    if method == "vicreg":
        return vicreg_loss(
            operands["z1"], operands["z2"],
            lam=getattr(hyper, "vicreg_lambda", 25.0), mu=getattr(hyper, "vicreg_mu", 25.0),
            nu=getattr(hyper, "vicreg_nu", 1.0), gamma=getattr(hyper, "vicreg_gamma", 1.0),
            eps=getattr(hyper, "vicreg_eps", 1e-4),
        )
    raise UnknownMethod(method)

