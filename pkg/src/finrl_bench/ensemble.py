"""Agent ensembles: diversity, Sharpe weighting, action combination and the rolling pipeline."""
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from finrl_bench.agents import TrainedAgent, train_agent
from finrl_bench.distributions import Categorical
from finrl_bench.marketdata import perturb_feature_panel
from finrl_bench.metrics import compute_metrics, sharpe_ratio
from finrl_bench.model import EnsembleConfig, EnvConfig, FeaturePanel, RunResult
from finrl_bench.protocol import EquityChain, make_windows, period_slice, validation_sharpe
from finrl_bench.util import derive_seed
from finrl_bench.vecenv import VecTradingEnv

__all__ = [
    "EnsemblePolicy",
    "combine_majority",
    "combine_weighted",
    "kl_diversity_loss",
    "majority_vote",
    "mean_pairwise_kl",
    "run_rolling_ensemble",
    "sharpe_ratio",
    "sharpe_weights",
]


def kl_diversity_loss(base_loss: float, policy_a, peers: Sequence, states: np.ndarray, lam: float) -> float:
    """base_loss + lam * sum over peers B of mean_s KL(pi_B(s) || pi_A(s)).

    The result is an objective to maximize: the diversity term rewards policy
    A for differing from its peers. Policies expose `action_distribution(states)`.

    Raises:
        ValueError: If the state batch is empty or lam is negative.
    """
    states = np.asarray(states, dtype=float)
    if states.size == 0 or states.shape[0] == 0:
        raise ValueError("the KL term needs at least one state.")
    if lam < 0:
        raise ValueError("lam must be non-negative.")
    if lam == 0:
        return float(base_loss)
    distribution = policy_a.action_distribution(states)
    divergence = 0.0
    for peer in peers:
        divergence += float(peer.action_distribution(states).kl(distribution).mean())
    return float(base_loss + lam * divergence)


def mean_pairwise_kl(members: Sequence, states: np.ndarray) -> float:
    """Mean of KL(pi_i || pi_j) over ordered member pairs i != j and states."""
    if len(members) < 2:
        return 0.0
    distributions = [member.action_distribution(states) for member in members]
    divergences = [
        float(p.kl(q).mean())
        for i, p in enumerate(distributions)
        for j, q in enumerate(distributions)
        if i != j
    ]
    return float(np.mean(divergences))


def sharpe_weights(sharpes: Sequence[Optional[float]], discard_threshold: float = 0.0) -> np.ndarray:
    """Softmax of the Sharpe ratios of members at or above the threshold.

    Discarded members get weight exactly 0. An undefined (None or NaN) ratio
    counts as discarded. If every member is discarded the weights are equal.

    Raises:
        ValueError: If there are no members.
    """
    if len(sharpes) == 0:
        raise ValueError("sharpe_weights needs at least one member.")
    values = np.array([np.nan if value is None else value for value in sharpes], dtype=float)
    kept = np.isfinite(values) & (values >= discard_threshold)
    if not kept.any():
        logging.warning("ensemble: every member is below the Sharpe threshold, weighting equally")
        return np.full(values.size, 1.0 / values.size)
    exponents = np.zeros(values.size)
    exponents[kept] = np.exp(values[kept] - values[kept].max())
    return exponents / exponents.sum()


def _is_discrete(member) -> bool:
    return getattr(member, "env_config", None) is not None and member.env_config.action_mode == "discrete"


def combine_weighted(
    members: Sequence,
    weights: Sequence[float],
    state: np.ndarray,
    mode: str = "mean",
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Weighted combination of the members' actions.

    Continuous members: 'mean' returns sum_i w_i * mean action_i, 'mixture'
    draws one member by weight and samples its policy. Discrete members
    average their action probabilities; 'mean' takes the most probable joint
    action and 'mixture' samples it. Zero-weight members are not evaluated.

    Raises:
        ValueError: On a weight/member count mismatch or unknown mode,
            or mixture mode without `rng`.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.size != len(members):
        raise ValueError(f"{weights.size} weights for {len(members)} members.")
    if mode not in ("mean", "mixture"):
        raise ValueError("mode must be 'mean' or 'mixture'.")
    state = np.asarray(state, dtype=float)
    if mode == "mixture" and rng is None:
        raise ValueError("mixture mode needs a random generator.")
    active = [i for i in range(len(members)) if weights[i] > 0]

    if _is_discrete(members[0]):
        probs = None
        for i in active:
            member_probs = weights[i] * members[i].action_distribution(np.atleast_2d(state)).probs
            probs = member_probs if probs is None else probs + member_probs
        indices = probs.argmax(axis=1) if mode == "mean" else Categorical.from_probs(probs).sample(rng)
        actions = members[0].decode(indices)
        return actions[0] if state.ndim == 1 else actions

    if mode == "mixture":
        chosen = int(rng.choice(len(members), p=weights / weights.sum()))
        return members[chosen].act(state, mode="explore", seed=int(rng.integers(2**32)))

    combined = None
    for i in active:
        action = np.asarray(members[i].act(state, mode="exploit"), dtype=float)
        if combined is None:
            combined = np.zeros_like(action)
        elif action.shape != combined.shape:
            raise ValueError(f"member {i} returned an action of shape {action.shape}, expected {combined.shape}.")
        combined = combined + weights[i] * action
    return combined


def majority_vote(actions: np.ndarray, levels: Optional[Sequence[float]] = None) -> np.ndarray:
    """Modal value per action component of an (M, K) array of member actions.

    Ties go to hold (0) when 0 is among the tied values, otherwise to the
    tied value with the smallest magnitude. A tie of +a and -a resolves to
    hold when 0 is one of the allowed `levels` and to -a otherwise; without
    `levels` only the tied values are known to be valid actions.
    """
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    hold_allowed = levels is not None and 0.0 in np.asarray(levels, dtype=float)
    result = np.zeros(actions.shape[1])
    for k in range(actions.shape[1]):
        values, counts = np.unique(actions[:, k], return_counts=True)
        tied = values[counts == counts.max()]
        if tied.size == 1:
            result[k] = tied[0]
            continue
        magnitudes = np.abs(tied)
        smallest = tied[magnitudes == magnitudes.min()]
        if smallest.size == 1:
            result[k] = smallest[0]
        else:
            result[k] = 0.0 if hold_allowed else smallest.min()
    return result


def combine_majority(members: Sequence, state: np.ndarray) -> np.ndarray:
    """Majority vote over the members' greedy discrete actions."""
    state = np.asarray(state, dtype=float)
    env_config = getattr(members[0], "env_config", None)
    levels = None if env_config is None else env_config.level_values
    votes = np.stack([np.atleast_2d(member.act(state, mode="exploit")) for member in members])
    combined = np.stack([majority_vote(votes[:, row], levels) for row in range(votes.shape[1])])
    return combined[0] if state.ndim == 1 else combined


@dataclass(eq=False)
class EnsemblePolicy:
    """Trained members and how their actions are combined.

    Usable wherever a single agent is: it acts, freezes and reports its
    members' update count. Mixture draws come from a generator seeded with
    `seed` unless a call passes its own.
    """
    members: list
    weights: Optional[np.ndarray] = None
    scheme: str = "weighted_average"
    combine_mode: str = "mean"
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member.")
        if self.scheme == "weighted_average":
            if self.weights is None:
                self.weights = np.full(len(self.members), 1.0 / len(self.members))
            self.weights = np.asarray(self.weights, dtype=float)
            if (self.weights < 0).any() or abs(self.weights.sum() - 1.0) > 1e-9:
                raise ValueError("ensemble weights must lie on the simplex.")
        elif self.scheme != "majority_vote":
            raise ValueError(f"unknown ensemble scheme '{self.scheme}'")
        self._rng = np.random.default_rng(self.seed)

    def act(self, state: np.ndarray, mode: str = "exploit", seed: Optional[int] = None) -> np.ndarray:
        if self.scheme == "majority_vote":
            return combine_majority(self.members, state)
        rng = self._rng if seed is None else np.random.default_rng(seed)
        return combine_weighted(self.members, self.weights, state, self.combine_mode, rng)

    @property
    def update_count(self) -> int:
        return sum(member.update_count for member in self.members)

    def freeze(self) -> "EnsemblePolicy":
        for member in self.members:
            member.freeze()
        return self


def _train_member(
    spec,
    data: FeaturePanel,
    env_config: EnvConfig,
    cfg: EnsembleConfig,
    peers: Sequence[TrainedAgent],
    n_workers: int,
) -> TrainedAgent:
    venv = VecTradingEnv(
        data, n_envs=cfg.n_envs, config=env_config, n_workers=n_workers, timeouts=spec.algorithm != "ppo"
    )
    try:
        horizon = min(cfg.horizon, data.n_periods - 1)
        return train_agent(spec, venv, cfg.iterations, cfg.steps, horizon=horizon, peers=peers)
    finally:
        venv.close()


def run_rolling_ensemble(
    cfg: EnsembleConfig,
    data: FeaturePanel,
    env_config: EnvConfig,
    seed: int = 0,
    n_workers: int = 1,
    metric_options: Optional[dict] = None,
) -> RunResult:
    """Rolling train / validate / weight / trade loop of an agent ensemble.

    Per window every member is trained on its own perturbed copy of the
    train range with its own seed (PPO members against the previously
    trained members when kl_lambda > 0), frozen, and scored by its Sharpe
    ratio on the validation range. The combined policy then trades the
    trade range. Windows roll by the trade length and the equity curve runs
    continuously across them.

    Args:
        cfg (EnsembleConfig): Members, scheme and window lengths.
        data (FeaturePanel): Whole period to walk through.
        env_config (EnvConfig): Trading environment settings.
        seed (int, optional): Top-level seed of all member seeds and perturbations.
        n_workers (int, optional): Threads stepping the training environments.
        metric_options (dict, optional): Keyword arguments of compute_metrics.

    Raises:
        ValueError: If the data is shorter than one window or majority voting
            is asked of continuous actions.
    """
    if cfg.scheme == "majority_vote" and env_config.action_mode != "discrete":
        raise ValueError("majority voting needs a discrete-action environment.")
    schedule = make_windows(
        data.n_periods - 1, cfg.train_window, cfg.validation_window, cfg.trade_window, roll=cfg.trade_window
    )
    logging.info("ensemble: %s members over %s windows", len(cfg.members), len(schedule))
    chain = EquityChain(env_config)
    weights_log = []
    for k, window in enumerate(schedule):
        train_data = period_slice(data, window.train)
        members: list[TrainedAgent] = []
        for i, spec in enumerate(cfg.members):
            member_spec = replace(spec, seed=derive_seed(seed, f"window-{k}-agent-{i}"), kl_lambda=cfg.kl_lambda)
            member_data = train_data
            if cfg.perturbation_range > 0:
                member_data = perturb_feature_panel(
                    train_data, cfg.perturbation_range, derive_seed(seed, f"window-{k}-perturbation-{i}")
                )
            members.append(_train_member(member_spec, member_data, env_config, cfg, members, n_workers).freeze())

        weights = None
        if cfg.scheme == "weighted_average":
            validation = period_slice(data, window.validation)
            sharpes = [validation_sharpe(member, validation, env_config, cfg.risk_free) for member in members]
            if any(value is None for value in sharpes):
                logging.warning("ensemble: window %s has members with undefined validation Sharpe", k)
            weights = sharpe_weights(sharpes, cfg.sharpe_discard_threshold)
            logging.debug("ensemble: window %s sharpes=%s weights=%s", k, sharpes, weights)
        weights_log.append(None if weights is None else weights.tolist())

        policy = EnsemblePolicy(
            members, weights, cfg.scheme, cfg.combine_mode, seed=derive_seed(seed, f"window-{k}-combine")
        )
        chain.run(policy, period_slice(data, window.trade))

    curve = chain.curve()
    return RunResult(
        curve=curve,
        metrics=compute_metrics(curve, **(metric_options or {})),
        trades=chain.trades,
        schedule=schedule,
        weights=weights_log,
    )
