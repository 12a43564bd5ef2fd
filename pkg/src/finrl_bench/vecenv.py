"""Vectorized trading environments, rollouts and the policy-gradient estimate.

`VecTradingEnv` advances N sub-environments in lockstep. Rows are split into
contiguous chunks that a thread pool steps concurrently; each chunk only
touches its own rows and results are gathered in row order, so the output
does not depend on the number of workers.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Optional, Protocol, Sequence, Union

import numpy as np
import pandas as pd

from finrl_bench.env import MarketSimulator
from finrl_bench.exceptions import EpisodeDoneException, InvalidActionException
from finrl_bench.model import EnvConfig, FeaturePanel, GradientEstimate, TrajectoryBatch


class Policy(Protocol):
    """What rollouts and the gradient estimate need from a policy."""

    def sample(self, states: np.ndarray, rng: np.random.Generator):
        """Returns (env_actions, raw_actions, log_probs) for a batch of states."""
        ...

    def score(self, states: np.ndarray, actions: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """Returns sum_i weights_i * grad_theta log pi(actions_i | states_i)."""
        ...


class VecTradingEnv:
    """N trading environments stepped in lockstep.

    Args:
        data (FeaturePanel | Sequence[FeaturePanel]): One panel shared by all
            rows, or one equally long panel per row.
        n_envs (int, optional): Number of rows; defaults to the number of panels.
        config (EnvConfig, optional): Environment settings.
        n_workers (int, optional): Threads stepping row chunks. Defaults to 1.
        timeouts (bool, optional): Report the end of the data as truncation
            rather than termination, so learners bootstrap from it.
    """

    def __init__(
        self,
        data: Union[FeaturePanel, Sequence[FeaturePanel]],
        n_envs: Optional[int] = None,
        config: Optional[EnvConfig] = None,
        n_workers: int = 1,
        timeouts: bool = False,
    ):
        panels = [data] if isinstance(data, FeaturePanel) else list(data)
        n_envs = n_envs if n_envs is not None else len(panels)
        if n_envs < 1:
            raise ValueError("n_envs must be at least 1.")
        if n_workers < 1:
            raise ValueError("n_workers must be at least 1.")
        self.config = config or EnvConfig()
        self.simulator = MarketSimulator(panels, self.config, n_rows=n_envs)
        self.n_envs = n_envs
        self.n_workers = min(n_workers, n_envs)
        self.timeouts = timeouts
        self._chunks = [
            slice(int(bounds[0]), int(bounds[-1]) + 1)
            for bounds in np.array_split(np.arange(n_envs), self.n_workers)
        ]
        self._executor = ThreadPoolExecutor(max_workers=self.n_workers) if self.n_workers > 1 else None
        logging.debug("VecTradingEnv: created (n_envs=%s, n_workers=%s)", n_envs, self.n_workers)

    @property
    def state_dim(self) -> int:
        return self.simulator.state_dim

    @property
    def n_assets(self) -> int:
        return self.simulator.n_assets

    @property
    def n_periods(self) -> int:
        return self.simulator.n_periods

    def values(self) -> np.ndarray:
        return self.simulator.values()

    def reset(self, seed: Optional[int] = None, options: Optional[dict[str, Any]] = None):
        """Resets every row; options 'balance' and 'holdings' broadcast over rows.

        Returns:
            tuple: States (N, D) and info with the total asset values.
        """
        options = options or {}
        self.simulator.reset(options.get("balance"), options.get("holdings"))
        return self.simulator.observations(), {"values": self.simulator.values()}

    def step(self, actions: np.ndarray):
        """Steps all rows with an (N, K) action array.

        Returns:
            tuple: States (N, D), rewards (N,), terminated (N,), truncated (N,)
                and info with executed shares, costs, values, gating flags and
                risk multipliers, each with one row per sub-environment.
        """
        if self.simulator.done:
            raise EpisodeDoneException("step() called on a finished episode; call reset().")
        actions = np.asarray(actions, dtype=float)
        if actions.ndim != 2 or actions.shape[0] != self.n_envs:
            raise InvalidActionException(
                f"expected {self.n_envs} action rows, got shape {actions.shape}"
            )
        actions = self.simulator.validate_actions(actions)
        if self._executor is None:
            parts = [self.simulator.step_rows(rows, actions[rows]) for rows in self._chunks]
        else:
            futures = [
                self._executor.submit(self.simulator.step_rows, rows, actions[rows]) for rows in self._chunks
            ]
            parts = [future.result() for future in futures]
        result = {key: np.concatenate([part[key] for part in parts]) for key in parts[0]}
        done = self.simulator.advance()
        ended = np.full(self.n_envs, done)
        terminated = ended & (not self.timeouts)
        truncated = ended & self.timeouts
        rewards = result.pop("rewards")
        return self.simulator.observations(), rewards, terminated, truncated, result

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None


def discounted_returns(rewards: np.ndarray, gamma: float, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """R = sum_t gamma^t r_t per row of an (N, T) reward array."""
    rewards = np.atleast_2d(np.asarray(rewards, dtype=float))
    if mask is not None:
        rewards = np.where(mask, rewards, 0.0)
    discounts = gamma ** np.arange(rewards.shape[1])
    return rewards @ discounts


def collect_trajectories(venv, policy: Policy, horizon: int, seed: int) -> TrajectoryBatch:
    """Rolls out a policy in every sub-environment for up to `horizon` steps.

    Buffers are allocated once with shape (N, horizon, ...). Steps after a
    row's episode ended are masked out; the rollout stops early once every
    row is done.

    Raises:
        InvalidActionException: If the policy emits non-finite actions.
    """
    logging.debug("vecenv: collect_trajectories(horizon=%s, seed=%s)", horizon, seed)
    if horizon < 1:
        raise ValueError("horizon must be at least 1.")
    rng = np.random.default_rng(seed)
    states, info = venv.reset()
    n_envs = states.shape[0]
    batch = TrajectoryBatch(
        states=np.zeros((n_envs, horizon, states.shape[1])),
        actions=None,
        rewards=np.zeros((n_envs, horizon)),
        dones=np.zeros((n_envs, horizon), dtype=bool),
        mask=np.zeros((n_envs, horizon), dtype=bool),
        log_probs=np.zeros((n_envs, horizon)),
        next_states=np.zeros((n_envs, horizon, states.shape[1])),
        initial_values=info.get("values"),
    )
    active = np.ones(n_envs, dtype=bool)
    for t in range(horizon):
        env_actions, raw_actions, log_probs = policy.sample(states, rng)
        if not (np.isfinite(env_actions).all() and np.isfinite(raw_actions).all()):
            raise InvalidActionException("the policy emitted non-finite actions")
        if batch.actions is None:
            batch.actions = np.zeros((n_envs, horizon, raw_actions.shape[1]))
        batch.states[:, t] = states
        batch.actions[:, t] = raw_actions
        if log_probs is not None:
            batch.log_probs[:, t] = log_probs
        states, rewards, terminated, truncated, info = venv.step(env_actions)
        done = terminated | truncated
        batch.rewards[:, t] = np.where(active, rewards, 0.0)
        batch.dones[:, t] = done
        batch.mask[:, t] = active
        batch.next_states[:, t] = states
        active = active & ~done
        if not active.any():
            break
    if "values" in info:
        batch.final_values = info["values"]
    return batch


def estimate_policy_gradient(
    batch: TrajectoryBatch, policy: Policy, gamma: float, baseline_mode: str = "mean"
) -> GradientEstimate:
    """Monte-Carlo policy gradient (1/n) sum_j (R_j - b) sum_t grad log pi(a_t | s_t).

    Args:
        batch (TrajectoryBatch): Rollouts of a stochastic policy.
        policy (Policy): The policy that produced them.
        gamma (float): Discount of the trajectory return R_j.
        baseline_mode (str, optional): 'mean' for the batch-mean return or
            'zero' for no baseline.

    Raises:
        ValueError: If the batch holds no trajectories or no log-probabilities.
    """
    if batch.n_envs == 0:
        raise ValueError("cannot estimate a gradient from zero trajectories.")
    if batch.log_probs is None:
        raise ValueError("the batch was not produced by a stochastic policy.")
    if baseline_mode not in ("mean", "zero"):
        raise ValueError("baseline_mode must be 'mean' or 'zero'.")
    returns = discounted_returns(batch.rewards, gamma, batch.mask)
    baseline = float(returns.mean()) if baseline_mode == "mean" else 0.0
    weights = np.where(batch.mask, (returns - baseline)[:, None], 0.0)
    flat = batch.mask.reshape(-1)
    grad = policy.score(
        batch.states.reshape(-1, batch.states.shape[2])[flat],
        batch.actions.reshape(-1, batch.actions.shape[2])[flat],
        weights.reshape(-1)[flat],
    )
    n = batch.n_envs
    return GradientEstimate(grad=grad / n, baseline=baseline, n=n)


def measure_throughput(
    data: FeaturePanel,
    n_envs_list: Sequence[int],
    horizon: int,
    config: Optional[EnvConfig] = None,
    n_workers: int = 1,
    seed: int = 0,
) -> pd.DataFrame:
    """Samples per second of batched stepping for each number of environments.

    Every configuration steps `horizon` times with seeded random actions,
    resetting whenever the data runs out.

    Returns:
        pd.DataFrame: Columns n_envs, samples, seconds, samples_per_second.
    """
    config = config or EnvConfig()
    rows = []
    for n_envs in n_envs_list:
        venv = VecTradingEnv(data, n_envs=n_envs, config=config, n_workers=n_workers)
        rng = np.random.default_rng(seed)
        if config.action_mode == "discrete":
            actions = rng.choice(config.level_values, size=(horizon, n_envs, venv.n_assets))
        else:
            actions = rng.uniform(-config.max_shares, config.max_shares, size=(horizon, n_envs, venv.n_assets))
        venv.reset()
        started = time.perf_counter()
        for t in range(horizon):
            _, _, terminated, truncated, _ = venv.step(actions[t])
            if (terminated | truncated).all():
                venv.reset()
        seconds = time.perf_counter() - started
        venv.close()
        samples = n_envs * horizon
        rows.append(
            {
                "n_envs": n_envs,
                "samples": samples,
                "seconds": seconds,
                "samples_per_second": samples / seconds if seconds > 0 else float("inf"),
            }
        )
        logging.info("vecenv: %s envs -> %.0f samples/s", n_envs, rows[-1]["samples_per_second"])
    return pd.DataFrame(rows, columns=["n_envs", "samples", "seconds", "samples_per_second"])
