"""Vector quantizer and residual vector quantizer with EMA codebooks."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class QuantizeResult:
    indices: torch.Tensor  # (...,) for one codebook, (..., n_layers) for RVQ
    quantized: torch.Tensor  # (..., d)
    commit_loss: torch.Tensor  # scalar


def nearest_code(x: torch.Tensor, embed: torch.Tensor) -> torch.Tensor:
    """Index of the closest codeword for each row of ``x``; ties go to the lowest index."""
    # exact squared distances; the expanded x^2 - 2xe + e^2 form loses the tie/zero cases
    dist = (x.unsqueeze(-2) - embed).pow(2).sum(-1)
    return dist.argmin(-1)


def perplexity(counts: torch.Tensor) -> float:
    p = counts.double().clamp(min=0)
    total = p.sum()
    if total <= 0:
        return 0.0
    p = p / total
    entropy = -(p[p > 0] * p[p > 0].log()).sum()
    return float(entropy.exp())


class Codebook(nn.Module):
    """K codewords of dimension d, learned by exponential moving averages.

    With ``null_code`` set, entry 0 is pinned to the zero vector and never updated, so
    picking it leaves the input residual untouched.
    """

    def __init__(
        self,
        size: int,
        dim: int,
        decay: float = 0.99,
        beta: float = 0.25,
        eps: float = 1e-5,
        dead_horizon: int = 100,
        null_code: bool = False,
    ):
        super().__init__()
        if size < 2 or dim < 1:
            raise ValueError(f"codebook needs K >= 2 and d >= 1, got K={size}, d={dim}")
        if not 0.0 < decay < 1.0:
            raise ValueError(f"decay must lie in (0, 1), got {decay}")
        self.size = size
        self.dim = dim
        self.decay = decay
        self.beta = beta
        self.eps = eps
        self.dead_horizon = dead_horizon
        self.null_code = null_code

        embed = torch.randn(size, dim)
        if null_code:
            embed[0] = 0.0
        self.register_buffer("embed", embed)
        self.register_buffer("cluster_size", torch.ones(size))
        self.register_buffer("embed_sum", embed.clone())
        self.register_buffer("unused_steps", torch.zeros(size, dtype=torch.long))
        self.register_buffer("initted", torch.tensor(False))

    def _first_free(self) -> int:
        return 1 if self.null_code else 0

    @torch.no_grad()
    def init_from(self, vectors: torch.Tensor) -> None:
        """Seed the codewords with randomly drawn input vectors."""
        flat = vectors.reshape(-1, self.dim).float()
        start = self._first_free()
        n = self.size - start
        idx = torch.randint(0, flat.shape[0], (n,), device=flat.device)
        picked = flat[idx]
        if flat.shape[0] < n:
            picked = picked + 0.01 * picked.std().clamp(min=1e-3) * torch.randn_like(picked)
        self.embed[start:] = picked
        self.embed_sum.copy_(self.embed)
        self.cluster_size.fill_(1.0)
        self.unused_steps.zero_()
        self.initted.fill_(True)

    @torch.no_grad()
    def ema_update(self, vectors: torch.Tensor, indices: torch.Tensor | None = None, decay: float | None = None) -> None:
        """One EMA step toward the vectors assigned to each codeword.

        Codewords without assignments keep their value; their counts decay. Codewords
        unused for ``dead_horizon`` consecutive updates are re-seeded from the batch.
        """
        decay = self.decay if decay is None else decay
        if not 0.0 < decay < 1.0:
            raise ValueError(f"decay must lie in (0, 1), got {decay}")
        flat = vectors.reshape(-1, self.dim).to(self.embed.dtype)
        if indices is None:
            indices = nearest_code(flat, self.embed)
        indices = indices.reshape(-1)
        onehot = F.one_hot(indices, self.size).to(flat.dtype)
        counts = onehot.sum(0)
        sums = onehot.t() @ flat

        self.cluster_size.mul_(decay).add_(counts, alpha=1 - decay)
        self.embed_sum.mul_(decay).add_(sums, alpha=1 - decay)
        hit = counts > 0
        fresh = self.embed_sum / (self.cluster_size + self.eps).unsqueeze(1)
        self.embed[hit] = fresh[hit]
        self.unused_steps[hit] = 0
        self.unused_steps[~hit] += 1

        if self.null_code:
            self.embed[0] = 0.0
            self.embed_sum[0] = 0.0
            self.unused_steps[0] = 0
        self._revive_dead(flat)

    @torch.no_grad()
    def _revive_dead(self, flat: torch.Tensor) -> None:
        dead = self.unused_steps >= self.dead_horizon
        if self.null_code:
            dead[0] = False
        n_dead = int(dead.sum())
        if n_dead == 0 or flat.shape[0] == 0:
            return
        picked = flat[torch.randint(0, flat.shape[0], (n_dead,), device=flat.device)]
        self.embed[dead] = picked
        mean_count = self.cluster_size[~dead].mean() if (~dead).any() else torch.tensor(1.0)
        self.cluster_size[dead] = mean_count.clamp(min=1.0)
        self.embed_sum[dead] = picked * self.cluster_size[dead].unsqueeze(1)
        self.unused_steps[dead] = 0

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        if indices.numel() and (indices.min() < 0 or indices.max() >= self.size):
            raise IndexError(f"codebook index out of range [0, {self.size})")
        return F.embedding(indices, self.embed)

    def quantize(self, x: torch.Tensor, update: bool = True) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(indices, codewords, commitment loss) without the straight-through wiring."""
        if x.shape[-1] != self.dim:
            raise ValueError(f"dimension mismatch: input has {x.shape[-1]}, codebook has {self.dim}")
        if self.training and update and not bool(self.initted):
            self.init_from(x.detach())
        indices = nearest_code(x.detach(), self.embed)
        q = F.embedding(indices, self.embed)
        commit = self.beta * F.mse_loss(x, q)
        if self.training and update:
            self.ema_update(x.detach(), indices)
        return indices, q, commit

    def forward(self, x: torch.Tensor, update: bool = True) -> QuantizeResult:
        indices, q, commit = self.quantize(x, update)
        if x.requires_grad:
            q = x + (q - x).detach()  # straight-through
        return QuantizeResult(indices, q, commit)


def vq_step(vectors: torch.Tensor, cb: Codebook, update: bool = True) -> QuantizeResult:
    return cb(vectors, update=update)


def ema_update(cb: Codebook, assigned_vectors: torch.Tensor, decay: float, indices: torch.Tensor | None = None) -> Codebook:
    cb.ema_update(assigned_vectors, indices, decay)
    return cb


class ResidualVQ(nn.Module):
    """Cascade of codebooks, each quantizing what the previous ones left over.

    Layers after the first carry a pinned zero codeword (see ``Codebook``), which makes
    the reconstruction error non-increasing in the number of active layers.
    """

    def __init__(self, n_q: int, size: int, dim: int, **codebook_kwargs):
        super().__init__()
        if n_q < 1:
            raise ValueError("need at least one quantizer layer")
        self.n_q = n_q
        self.size = size
        self.dim = dim
        self.layers = nn.ModuleList(
            [Codebook(size, dim, null_code=i > 0, **codebook_kwargs) for i in range(n_q)]
        )

    def forward(self, x: torch.Tensor, n_active: int | None = None, update: bool = True) -> QuantizeResult:
        n_active = self.n_q if n_active is None else n_active
        if not 1 <= n_active <= self.n_q:
            raise ValueError(f"n_active must be in [1, {self.n_q}], got {n_active}")
        residual = x
        total = torch.zeros_like(x.detach())
        codes, loss = [], x.new_zeros(())
        for layer in self.layers[:n_active]:
            idx, q, commit = layer.quantize(residual, update)
            codes.append(idx)
            loss = loss + commit
            total = total + q
            residual = residual - q
        quantized = x + (total - x).detach() if x.requires_grad else total
        return QuantizeResult(torch.stack(codes, -1), quantized, loss)

    @torch.no_grad()
    def init_from(self, vectors: torch.Tensor) -> None:
        """Seed every layer from data: layer i draws from the residuals left by layers < i."""
        residual = vectors.reshape(-1, self.dim).float()
        for layer in self.layers:
            layer.init_from(residual)
            residual = residual - layer.lookup(nearest_code(residual, layer.embed))

    def decode(self, indices: torch.Tensor) -> torch.Tensor:
        if indices.shape[-1] > self.n_q:
            raise ValueError(f"got {indices.shape[-1]} index layers for a {self.n_q}-layer RVQ")
        out = torch.zeros(*indices.shape[:-1], self.dim, dtype=self.layers[0].embed.dtype, device=indices.device)
        for i in range(indices.shape[-1]):
            out = out + self.layers[i].lookup(indices[..., i])
        return out

    def codebooks(self) -> torch.Tensor:
        """Stacked codewords, shape (n_q, K, d)."""
        return torch.stack([layer.embed for layer in self.layers])

    def expected_decode(self, probs: torch.Tensor, check: bool = True, atol: float = 1e-5) -> torch.Tensor:
        """Sum over layers of the probability-weighted codeword mean; ``probs`` is (..., n_q, K)."""
        if probs.shape[-2:] != (self.n_q, self.size):
            raise ValueError(f"distribution shape {tuple(probs.shape[-2:])} does not match RVQ ({self.n_q}, {self.size})")
        if check:
            with torch.no_grad():
                if (probs < 0).any():
                    raise ValueError("negative probabilities")
                if ((probs.sum(-1) - 1).abs() > atol).any():
                    raise ValueError("distribution does not sum to 1")
        # accumulate layer by layer, in the same order as decode(), so one-hot inputs match it bit for bit
        out = torch.zeros(*probs.shape[:-2], self.dim, dtype=probs.dtype, device=probs.device)
        for i, layer in enumerate(self.layers):
            out = out + probs[..., i, :] @ layer.embed.to(probs.dtype)
        return out

    def perplexities(self) -> list[float]:
        return [perplexity(layer.cluster_size) for layer in self.layers]


def rvq_encode(vectors: torch.Tensor, state: ResidualVQ, n_active: int | None = None, update: bool = True) -> QuantizeResult:
    return state(vectors, n_active=n_active, update=update)


def rvq_decode(indices: torch.Tensor, state: ResidualVQ) -> torch.Tensor:
    return state.decode(indices)


def rvq_expected_decode(dist: torch.Tensor, state: ResidualVQ) -> torch.Tensor:
    return state.expected_decode(dist)
