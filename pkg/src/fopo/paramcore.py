"""Role-conditioned softmax policy over a masked discrete action space.

A single parameter vector ``theta`` is shared by both players.  Role
conditioning happens in the design matrix: every action row of the game
features ``X`` is copied into a shared block and into the block owned by the
acting role, so ``logits = design(ctx, sf) @ theta`` in the linear case.

Everything downstream (score, ratio, KL gradients) is expressed through the
logit Jacobian ``J[a, i] = d logit_a / d theta_i``, which is exact for both the
linear map and the optional single tanh hidden layer.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, DegenerateRatioError, NumericError


class Role(enum.IntEnum):
    AGENT1 = 1
    AGENT2 = 2

    @property
    def other(self) -> "Role":
        return Role.AGENT2 if self is Role.AGENT1 else Role.AGENT1

    @classmethod
    def parse(cls, name: "str | int | Role") -> "Role":
        if isinstance(name, Role):
            return name
        if isinstance(name, int):
            return cls(name)
        try:
            return ROLE_ALIASES[name.lower()]
        except KeyError:
            raise ContractViolation(f"unknown role {name!r}") from None


ROLE_ALIASES = {
    "agent1": Role.AGENT1,
    "agent2": Role.AGENT2,
    "speaker": Role.AGENT1,
    "listener": Role.AGENT2,
    "attacker": Role.AGENT1,
    "defender": Role.AGENT2,
}


@dataclass(frozen=True)
class RoleContext:
    role: Role
    prompt_features: np.ndarray

    @classmethod
    def for_role(cls, role: "Role | str | int") -> "RoleContext":
        role = Role.parse(role)
        onehot = np.zeros(len(Role))
        onehot[role - 1] = 1.0
        return cls(role, onehot)


@dataclass(frozen=True)
class StateFeatures:
    """Per-action feature rows of shape (n_actions, k) plus the legality mask."""

    features: np.ndarray
    legal_mask: np.ndarray

    @property
    def n_actions(self) -> int:
        return len(self.legal_mask)


def block_features(phi: np.ndarray, n_actions: int) -> np.ndarray:
    """Rows ``e_a kron phi``: the tabular-by-action layout where theta reshapes to (A, k)."""
    phi = np.asarray(phi, dtype=float)
    return np.kron(np.eye(n_actions), phi[None, :])


class SoftmaxPolicy:
    """Softmax over legal actions of logits computed from role-conditioned features.

    ``hidden == 0`` gives the linear map; ``hidden > 0`` inserts one tanh layer
    applied to each action's design row, ``logit_a = v . tanh(W psi_a + b)``.
    """

    def __init__(
        self,
        n_features: int,
        *,
        n_roles: int = 2,
        hidden: int = 0,
        feature_map: str = "generic",
        game: str = "generic",
    ):
        if n_features < 1:
            raise ContractViolation("n_features must be positive")
        self.n_features = n_features
        self.n_roles = n_roles
        self.hidden = hidden
        self.feature_map = feature_map
        self.game = game
        self.input_dim = (1 + n_roles) * n_features
        if hidden:
            self.dim = hidden * self.input_dim + 2 * hidden
        else:
            self.dim = self.input_dim

    def spec(self) -> dict:
        return {
            "n_features": self.n_features,
            "n_roles": self.n_roles,
            "hidden": self.hidden,
            "feature_map": self.feature_map,
            "game": self.game,
        }

    @classmethod
    def from_spec(cls, spec: dict) -> "SoftmaxPolicy":
        return cls(
            spec["n_features"],
            n_roles=spec.get("n_roles", 2),
            hidden=spec.get("hidden", 0),
            feature_map=spec.get("feature_map", "generic"),
            game=spec.get("game", "generic"),
        )

    def init_params(self, rng: np.random.Generator | None = None, scale: float = 0.0) -> np.ndarray:
        theta = np.zeros(self.dim)
        if rng is not None and scale > 0:
            theta = rng.normal(0.0, scale, self.dim)
        if self.hidden:
            # hidden weights must break symmetry even when the readout starts at zero
            rng = rng if rng is not None else np.random.default_rng(0)
            n_w = self.hidden * self.input_dim
            theta[:n_w] = rng.normal(0.0, 1.0 / np.sqrt(self.input_dim), n_w)
        return theta

    # -- forward ---------------------------------------------------------

    def design(self, ctx: RoleContext, sf: StateFeatures) -> np.ndarray:
        x = np.asarray(sf.features, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ContractViolation(
                f"expected per-action features of width {self.n_features}, got {x.shape}"
            )
        return np.hstack([x] + [w * x for w in ctx.prompt_features])

    def logits_and_jacobian(
        self, theta: np.ndarray, ctx: RoleContext, sf: StateFeatures
    ) -> tuple[np.ndarray, np.ndarray]:
        psi = self.design(ctx, sf)
        if len(theta) != self.dim:
            raise ContractViolation(f"theta has length {len(theta)}, policy needs {self.dim}")
        if not self.hidden:
            return psi @ theta, psi
        h_n, d_in = self.hidden, self.input_dim
        w = theta[: h_n * d_in].reshape(h_n, d_in)
        b = theta[h_n * d_in : h_n * d_in + h_n]
        v = theta[h_n * d_in + h_n :]
        act = np.tanh(psi @ w.T + b)
        z = act @ v
        back = v * (1.0 - act**2)  # (A, H)
        jw = (back[:, :, None] * psi[:, None, :]).reshape(len(psi), h_n * d_in)
        return z, np.hstack([jw, back, act])

    def logits(self, theta: np.ndarray, ctx: RoleContext, sf: StateFeatures) -> np.ndarray:
        return self.logits_and_jacobian(theta, ctx, sf)[0]

    @staticmethod
    def _masked_log_softmax(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ContractViolation("state has no legal action")
        zl = z[mask]
        if not np.all(np.isfinite(zl)):
            raise NumericError("non-finite logits")
        shifted = zl - zl.max()
        logz = np.log(np.exp(shifted).sum())
        out = np.full(len(z), -np.inf)
        out[mask] = shifted - logz
        return out

    def log_distribution(self, theta, ctx, sf) -> np.ndarray:
        return self._masked_log_softmax(self.logits(theta, ctx, sf), sf.legal_mask)

    def action_distribution(self, theta: np.ndarray, ctx: RoleContext, sf: StateFeatures) -> np.ndarray:
        logp = self.log_distribution(theta, ctx, sf)
        p = np.zeros(len(logp))
        legal = np.asarray(sf.legal_mask, dtype=bool)
        p[legal] = np.exp(logp[legal])
        return p

    def log_prob(self, theta, ctx, sf, action: int) -> float:
        self._check_legal(sf, action)
        return float(self.log_distribution(theta, ctx, sf)[action])

    # -- gradients -------------------------------------------------------

    @staticmethod
    def _check_legal(sf: StateFeatures, action: int) -> None:
        if not (0 <= action < sf.n_actions) or not sf.legal_mask[action]:
            raise ContractViolation(f"action {action} is not legal in this state")

    def _dist_and_jac(self, theta, ctx, sf):
        z, jac = self.logits_and_jacobian(theta, ctx, sf)
        logp = self._masked_log_softmax(z, sf.legal_mask)
        p = np.where(np.isfinite(logp), np.exp(np.where(np.isfinite(logp), logp, 0.0)), 0.0)
        return p, logp, jac

    def log_prob_gradient(self, theta, ctx, sf, action: int) -> np.ndarray:
        self._check_legal(sf, action)
        p, _, jac = self._dist_and_jac(theta, ctx, sf)
        return jac[action] - p @ jac

    def ratio_and_gradient(
        self, theta, theta_old, ctx, sf, action: int, logp_old: float | None = None
    ) -> tuple[float, np.ndarray]:
        """Likelihood ratio p_theta(a)/p_old(a) and its gradient ``ratio * grad log p_theta(a)``.

        ``logp_old`` is the stored behavior log-probability; when omitted it is
        recomputed from ``theta_old``.
        """
        self._check_legal(sf, action)
        if logp_old is None:
            logp_old = float(self.log_distribution(theta_old, ctx, sf)[action])
        if not np.isfinite(logp_old):
            raise DegenerateRatioError("behavior probability of the recorded action is zero")
        p, logp, jac = self._dist_and_jac(theta, ctx, sf)
        ratio = float(np.exp(logp[action] - logp_old))
        return ratio, ratio * (jac[action] - p @ jac)

    def state_kl_and_gradient(self, theta, theta_old, ctx, sf) -> tuple[float, np.ndarray]:
        p, logp, jac = self._dist_and_jac(theta, ctx, sf)
        logq = self.log_distribution(theta_old, ctx, sf)
        legal = np.asarray(sf.legal_mask, dtype=bool)
        diff = np.zeros(len(p))
        diff[legal] = logp[legal] - logq[legal]
        kl = float(p @ diff)
        dz = p * (diff - kl)
        return max(kl, 0.0), dz @ jac

    def kl_divergence_and_gradient(
        self, theta, theta_old, batch: Sequence[tuple[RoleContext, StateFeatures]]
    ) -> tuple[float, np.ndarray]:
        """Batch-mean categorical KL(p_theta || p_old) and its gradient in theta."""
        if not batch:
            raise ContractViolation("empty batch")
        total, grad = 0.0, np.zeros(self.dim)
        for ctx, sf in batch:
            kl, g = self.state_kl_and_gradient(theta, theta_old, ctx, sf)
            total += kl
            grad += g
        return total / len(batch), grad / len(batch)

    def ratio_and_kl(
        self, theta, theta_old, ctx, sf, action: int, logp_old: float
    ) -> tuple[float, np.ndarray, float, np.ndarray]:
        """Ratio, its gradient, state KL to ``theta_old`` and its gradient in one forward pass."""
        self._check_legal(sf, action)
        if not np.isfinite(logp_old):
            raise DegenerateRatioError("behavior probability of the recorded action is zero")
        p, logp, jac = self._dist_and_jac(theta, ctx, sf)
        score = jac[action] - p @ jac
        ratio = float(np.exp(logp[action] - logp_old))
        logq = self.log_distribution(theta_old, ctx, sf)
        legal = np.asarray(sf.legal_mask, dtype=bool)
        diff = np.zeros(len(p))
        diff[legal] = logp[legal] - logq[legal]
        kl = float(p @ diff)
        return ratio, ratio * score, max(kl, 0.0), (p * (diff - kl)) @ jac

    def entropy(self, theta, ctx, sf) -> float:
        p = self.action_distribution(theta, ctx, sf)
        nz = p[p > 0]
        return float(max(-(nz * np.log(nz)).sum(), 0.0))

    # -- acting ----------------------------------------------------------

    def sample(self, theta, ctx, sf, rng: np.random.Generator) -> tuple[int, float]:
        """Sample an action; returns (action, log-probability)."""
        logp = self.log_distribution(theta, ctx, sf)
        p = np.where(np.isfinite(logp), np.exp(np.where(np.isfinite(logp), logp, 0.0)), 0.0)
        cdf = np.cumsum(p)
        a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        a = min(a, len(p) - 1)
        while not sf.legal_mask[a]:
            a -= 1
        return a, float(logp[a])

    def greedy(self, theta, ctx, sf) -> tuple[int, float]:
        logp = self.log_distribution(theta, ctx, sf)
        a = int(np.argmax(logp))
        return a, float(logp[a])


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], theta: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central differences ``(f(theta + h e_i) - f(theta - h e_i)) / 2h`` per coordinate."""
    if h <= 0:
        raise ContractViolation("step size must be positive")
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros(len(theta))
    for i in range(len(theta)):
        e = np.zeros(len(theta))
        e[i] = h
        grad[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return grad


def check_finite(theta: np.ndarray, what: str = "parameters") -> np.ndarray:
    if not np.all(np.isfinite(theta)):
        raise NumericError(f"non-finite {what}")
    return theta


def mean_entropy(policy: SoftmaxPolicy, theta, states: Iterable[tuple[RoleContext, StateFeatures]]) -> float:
    values = [policy.entropy(theta, ctx, sf) for ctx, sf in states]
    if not values:
        raise ContractViolation("no states")
    return float(np.mean(values))
