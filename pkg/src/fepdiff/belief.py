"""Goal-conditioned belief learner and its training objective.

The context embedding is decoded into K endpoint hypotheses with softmax
weights; each hypothesis conditions a diagonal-Gaussian posterior over a
latent belief vector, whose mean drives a lightweight proxy-trajectory
decoder. The objective combines a winner-take-all reconstruction/KL term with
free bits, endpoint diversity and hypothesis-classification regularizers, and
neighborhood terms: symmetric-KL belief consistency and a proxy-space
collision penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .encoder import ContextEncoder

LOG_SIGMA_MIN = -6.0
LOG_SIGMA_MAX = 2.0
_PROB_EPS = 1e-12
_DIST_EPS = 1e-12


def _mlp(in_dim: int, out_dim: int, hidden: int = 128) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))


@dataclass
class BeliefOutput:
    """Batched hypothesis bundle: K goals, weights, posteriors, proxies."""

    goals: torch.Tensor  # [B, K, 2]
    weights: torch.Tensor  # [B, K], rows sum to 1
    mu_z: torch.Tensor  # [B, K, d_z]
    log_sigma_z: torch.Tensor  # [B, K, d_z], clamped
    proxy: torch.Tensor  # [B, K, T_fut, 2]

    def condition(self) -> torch.Tensor:
        """Global diffusion condition per hypothesis: [mu_z ; goal], [B, K, d_z + 2]."""
        return torch.cat([self.mu_z, self.goals], dim=-1)

    def select(self, k: torch.Tensor) -> "BeliefOutput":
        """Gather one hypothesis per batch row (k: Long[B])."""
        idx = (torch.arange(self.goals.shape[0], device=k.device), k)
        return BeliefOutput(
            goals=self.goals[idx],
            weights=self.weights[idx],
            mu_z=self.mu_z[idx],
            log_sigma_z=self.log_sigma_z[idx],
            proxy=self.proxy[idx],
        )


@dataclass
class LossBreakdown:
    """Unweighted component values plus the weighted total of one batch."""

    f_ind: torch.Tensor
    l_cls: torch.Tensor
    l_div: torch.Tensor
    l_cons: torch.Tensor
    l_coll: torch.Tensor
    total: torch.Tensor
    k_star: torch.Tensor

    def log_line(self, step: int) -> str:
        return (
            f"step={step} f_ind={self.f_ind.item():.6f} l_cls={self.l_cls.item():.6f} "
            f"l_div={self.l_div.item():.6f} l_cons={self.l_cons.item():.6f} "
            f"l_coll={self.l_coll.item():.6f} total={self.total.item():.6f}"
        )


class BeliefLearner(nn.Module):
    """Context encoder plus goal, weight, posterior and proxy heads."""

    def __init__(
        self,
        dim: int = 128,
        soc_dim: int = 64,
        d_z: int = 128,
        k: int = 20,
        heads: int = 8,
        t_fut: int = 12,
    ):
        super().__init__()
        self.d_z = d_z
        self.k = k
        self.t_fut = t_fut
        self.encoder = ContextEncoder(dim=dim, soc_dim=soc_dim, heads=heads)
        self.f_goal = _mlp(dim, k * 2)
        self.f_w = _mlp(dim, k)
        self.f_belief = _mlp(dim + 2, 2 * d_z)
        self.f_proxy = _mlp(d_z + 2, t_fut * 2)

    def decode_goals(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """K endpoint candidates and their softmax-normalized weights."""
        goals = self.f_goal(h).view(*h.shape[:-1], self.k, 2)
        weights = torch.softmax(self.f_w(h), dim=-1)
        return goals, weights

    def belief_posterior(self, h: torch.Tensor, goal: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Diagonal-Gaussian posterior parameters conditioned on one goal."""
        out = self.f_belief(torch.cat([h, goal], dim=-1))
        mu, log_sigma = out.chunk(2, dim=-1)
        return mu, log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)

    def proxy_decode(self, mu_z: torch.Tensor, goal: torch.Tensor) -> torch.Tensor:
        """Coarse T_fut x 2 trajectory from the posterior mean (no sampling)."""
        out = self.f_proxy(torch.cat([mu_z, goal], dim=-1))
        return out.view(*mu_z.shape[:-1], self.t_fut, 2)

    def infer(self, h: torch.Tensor) -> BeliefOutput:
        """All K hypotheses for a batch of context embeddings [B, dim]."""
        goals, weights = self.decode_goals(h)
        h_rep = h.unsqueeze(-2).expand(*goals.shape[:-1], h.shape[-1])
        mu, log_sigma = self.belief_posterior(h_rep, goals)
        proxy = self.proxy_decode(mu, goals)
        return BeliefOutput(goals=goals, weights=weights, mu_z=mu, log_sigma_z=log_sigma, proxy=proxy)

    def forward(self, node_kinematics, edge_feats, adj, node_mask) -> BeliefOutput:
        h = self.encoder(node_kinematics, edge_feats, adj, node_mask)
        return self.infer(h)


def gaussian_kl_to_standard(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """Per-dimension KL(N(mu, sigma^2) || N(0, 1)): 0.5 (mu^2 + sigma^2 - 1 - 2 log sigma)."""
    return 0.5 * (mu.square() + torch.exp(2.0 * log_sigma) - 1.0 - 2.0 * log_sigma)


def individual_free_energy(
    proxy: torch.Tensor,
    gt: torch.Tensor,
    mu_z: torch.Tensor,
    log_sigma_z: torch.Tensor,
    lambda_kl: float,
    lambda_fb: float,
) -> torch.Tensor:
    """Squared reconstruction error plus the free-bits-floored KL complexity.

    The accuracy term sums squared errors over all T_fut x 2 coordinates; each
    latent dimension's KL to the standard normal is floored at ``lambda_fb``.
    Leading batch dimensions are preserved.
    """
    accuracy = (proxy - gt).square().sum(dim=(-2, -1))
    kl = gaussian_kl_to_standard(mu_z, log_sigma_z)
    complexity = torch.clamp(kl, min=lambda_fb).sum(dim=-1)
    return accuracy + lambda_kl * complexity


def wta_select(goals: torch.Tensor, gt_endpoint: torch.Tensor) -> torch.Tensor:
    """Index of the hypothesis whose endpoint is nearest the ground truth.

    Ties break to the lowest index. goals: [..., K, 2], gt_endpoint: [..., 2].
    """
    dists = torch.linalg.vector_norm(goals - gt_endpoint.unsqueeze(-2), dim=-1)
    return dists.argmin(dim=-1)


def _pairwise_distances(points: torch.Tensor) -> torch.Tensor:
    diff = points.unsqueeze(-2) - points.unsqueeze(-3)
    # eps keeps the gradient finite for coincident points
    return torch.sqrt(diff.square().sum(dim=-1) + _DIST_EPS)


def diversity_loss(goals: torch.Tensor, margin: float) -> torch.Tensor:
    """Mean squared margin shortfall over ordered hypothesis pairs.

    (1 / (K (K-1))) sum_{k != k'} relu(margin - ||p_k - p_k'||)^2; zero for K = 1.
    """
    k = goals.shape[-2]
    if k < 2:
        return goals.new_zeros(goals.shape[:-2])
    dists = _pairwise_distances(goals)
    shortfall = torch.relu(margin - dists).square()
    off_diag = ~torch.eye(k, dtype=torch.bool, device=goals.device)
    return shortfall.masked_fill(~off_diag, 0.0).sum(dim=(-2, -1)) / (k * (k - 1))


def classification_loss(weights: torch.Tensor, k_star: torch.Tensor) -> torch.Tensor:
    """Cross entropy of the hypothesis weights against the WTA index."""
    picked = weights.gather(-1, k_star.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked.clamp_min(_PROB_EPS))


def symmetric_gaussian_kl(
    mu_i: torch.Tensor,
    log_sigma_i: torch.Tensor,
    mu_j: torch.Tensor,
    log_sigma_j: torch.Tensor,
) -> torch.Tensor:
    """KL(q_i||q_j) + KL(q_j||q_i) for diagonal Gaussians, summed over dims."""

    def kl(mu_a, ls_a, mu_b, ls_b):
        return (
            ls_b
            - ls_a
            + (torch.exp(2.0 * ls_a) + (mu_a - mu_b).square()) / (2.0 * torch.exp(2.0 * ls_b))
            - 0.5
        ).sum(dim=-1)

    return kl(mu_i, log_sigma_i, mu_j, log_sigma_j) + kl(mu_j, log_sigma_j, mu_i, log_sigma_i)


def social_consistency_loss(
    edges: torch.Tensor, mu_z: torch.Tensor, log_sigma_z: torch.Tensor
) -> torch.Tensor:
    """Mean symmetric KL between neighboring agents' selected posteriors.

    edges: Long[E, 2] of batch indices (unordered pairs); zero when empty.
    """
    if edges.numel() == 0:
        return mu_z.new_zeros(())
    i, j = edges[:, 0], edges[:, 1]
    sym = symmetric_gaussian_kl(mu_z[i], log_sigma_z[i], mu_z[j], log_sigma_z[j])
    return sym.sum() / (2.0 * edges.shape[0])


def collision_loss(
    edges: torch.Tensor,
    proxy: torch.Tensor,
    d_min: float,
    anchors: torch.Tensor | None = None,
) -> torch.Tensor:
    """Squared shortfall of the closest proxy approach below the safety distance.

    edges: Long[E, 2] into proxy [B, T, 2]; zero when empty. ``anchors``
    ([B, 2]) shift per-agent frames back to shared coordinates so that
    cross-agent distances are physical.
    """
    if edges.numel() == 0:
        return proxy.new_zeros(())
    if anchors is not None:
        proxy = proxy + anchors.unsqueeze(-2)
    i, j = edges[:, 0], edges[:, 1]
    diff = proxy[i] - proxy[j]
    dist = torch.sqrt(diff.square().sum(dim=-1) + _DIST_EPS)
    closest = dist.min(dim=-1).values
    return torch.relu(d_min - closest).square().mean()


def total_objective(
    out: BeliefOutput,
    future: torch.Tensor,
    edges: torch.Tensor,
    *,
    lambda_kl: float,
    lambda_fb: float,
    lambda_cls: float,
    lambda_div: float,
    lambda_cons: float,
    lambda_coll: float,
    margin: float,
    d_min: float,
    anchors: torch.Tensor | None = None,
    use_individual_fe: bool = True,
    use_goal_supervision: bool = True,
    use_social_fe: bool = True,
) -> LossBreakdown:
    """Batch objective: WTA free energy, goal supervision, diversity, social terms.

    ``future``: [B, T_fut, 2] ground truth in the same per-agent frame as the
    proxies; ``edges``: Long[E, 2] pairs of batch rows co-present in the same
    scene window; ``anchors``: optional per-agent frame origins for the
    collision term. The winner hypothesis is selected by endpoint proximity
    outside the gradient graph, so only its reconstruction/KL terms receive
    gradient from the free-energy term.
    """
    with torch.no_grad():
        k_star = wta_select(out.goals, future[:, -1])
    best = out.select(k_star)

    f_ind = individual_free_energy(
        best.proxy, future, best.mu_z, best.log_sigma_z, lambda_kl, lambda_fb
    ).mean()
    l_cls = classification_loss(out.weights, k_star).mean()
    l_div = diversity_loss(out.goals, margin).mean()
    l_cons = social_consistency_loss(edges, best.mu_z, best.log_sigma_z)
    l_coll = collision_loss(edges, best.proxy, d_min, anchors=anchors)

    zero = future.new_zeros(())
    total = (
        (f_ind if use_individual_fe else zero)
        + lambda_cls * (l_cls if use_goal_supervision else zero)
        + lambda_div * l_div
        + (lambda_cons * l_cons + lambda_coll * l_coll if use_social_fe else zero)
    )
    return LossBreakdown(
        f_ind=f_ind, l_cls=l_cls, l_div=l_div, l_cons=l_cons, l_coll=l_coll,
        total=total, k_star=k_star,
    )
