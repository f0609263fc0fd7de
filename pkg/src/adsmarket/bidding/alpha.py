"""Alpha: a tabular Q-learning controller over a discretized CPA-tracking state.

State is (time bucket, spend ratio, pcvr gap, cvr gap, CPA gap). The action is
one of 31 ratios in [-3, 3] mapped to a bid multiplier.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

N_TID = 8
N_SR = 10
N_SIGNED = 7
ACTIONS = np.round(np.linspace(-3.0, 3.0, 31), 1)
N_ACTIONS = len(ACTIONS)
NEUTRAL_ACTION = int(np.flatnonzero(ACTIONS == 0.0)[0])
# Edges of the signed gap bins; bin 3 is the neutral band around zero.
SIGNED_EDGES = np.array([-0.3, -0.15, -0.05, 0.05, 0.15, 0.3])
SIGNED_CENTERS = np.array([-0.45, -0.22, -0.1, 0.0, 0.1, 0.22, 0.45])
N_STATES = N_TID * N_SR * N_SIGNED ** 3
REWARD_CAP = 15.0


def alpha_reward(real_cpa: float, target_cpa: float) -> float:
    """min(15, target / |real - target|), with a zero gap giving the cap."""
    if target_cpa <= 0:
        raise ValueError("target_cpa must be positive")
    gap = abs(real_cpa - target_cpa)
    if gap == 0:
        return REWARD_CAP
    return min(REWARD_CAP, target_cpa / gap)


def alpha_to_factor(ratio: float) -> float:
    """Map an action ratio to the multiplier 1 + ratio / 10."""
    idx = int(np.argmin(np.abs(ACTIONS - ratio)))
    if abs(ACTIONS[idx] - ratio) > 1e-9:
        raise ValueError(f"ratio {ratio} is not one of the 31 action values")
    return round(1.0 + float(ACTIONS[idx]) / 10.0, 10)


def signed_bin(gap: float) -> int:
    return int(np.searchsorted(SIGNED_EDGES, gap, side="right"))


@dataclass(frozen=True)
class AlphaState:
    tid: int
    sr: int
    pg: int
    cg: int
    cd: int

    @property
    def index(self) -> int:
        return (((self.tid * N_SR + self.sr) * N_SIGNED + self.pg) * N_SIGNED + self.cg) * N_SIGNED + self.cd


def discretize(tid: float, spend_ratio: float, pcvr_gap: float, cvr_gap: float, cpa_gap: float) -> AlphaState:
    """Clamp each continuous component into its bin; out-of-grid values go to the edge bins."""
    t = int(min(max(int(tid), 0), N_TID - 1))
    sr = int(min(max(int(np.floor(spend_ratio * N_SR)), 0), N_SR - 1))
    return AlphaState(t, sr, signed_bin(pcvr_gap), signed_bin(cvr_gap), signed_bin(cpa_gap))


@dataclass
class AlphaPolicy:
    """Sparse Q-table with an optional dense fallback table.

    Rows not yet updated are read from ``prior`` (indexed by the full state
    index, or by a reduced index through ``prior_key``). Updating copies the
    row into the sparse table first.
    """

    learning_rate: float = 0.05
    discount: float = 0.9
    epsilon: float = 0.0
    table: dict = field(default_factory=dict)
    prior: Optional[np.ndarray] = None
    prior_key: str = "full"  # "full" or "tid_cd"

    def _prior_row(self, s: AlphaState) -> np.ndarray:
        if self.prior is None:
            return np.zeros(N_ACTIONS)
        if self.prior_key == "tid_cd":
            return self.prior[s.tid * N_SIGNED + s.cd]
        return self.prior[s.index]

    def q(self, s: AlphaState) -> np.ndarray:
        row = self.table.get(s.index)
        return row if row is not None else self._prior_row(s)

    def greedy(self, s: AlphaState) -> int:
        """Best action index; ties go to the action closest to neutral, then the lower one."""
        row = self.q(s)
        best = np.flatnonzero(row >= row.max() - 1e-12)
        return int(best[np.argmin(np.abs(best - NEUTRAL_ACTION) * 2 + (best > NEUTRAL_ACTION))])

    def act(self, s: AlphaState, rng: Optional[np.random.Generator] = None, explore: bool = False) -> int:
        if explore and rng is not None and rng.random() < self.epsilon:
            return int(rng.integers(N_ACTIONS))
        return self.greedy(s)

    def to_record(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "discount": self.discount,
            "epsilon": self.epsilon,
            "prior_key": self.prior_key,
            "prior": None if self.prior is None else self.prior.tolist(),
            "table": {str(k): v.tolist() for k, v in sorted(self.table.items())},
        }

    @classmethod
    def from_record(cls, rec: dict) -> "AlphaPolicy":
        prior = None if rec["prior"] is None else np.asarray(rec["prior"], dtype=float)
        table = {int(k): np.asarray(v, dtype=float) for k, v in rec["table"].items()}
        return cls(rec["learning_rate"], rec["discount"], rec["epsilon"], table, prior, rec["prior_key"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_record(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "AlphaPolicy":
        return cls.from_record(json.loads(Path(path).read_text()))


def alpha_step(policy: AlphaPolicy, state: AlphaState, action: int, reward: float,
               next_state: Optional[AlphaState]) -> AlphaPolicy:
    """One Q-learning update in place; ``next_state=None`` marks a terminal step."""
    if policy.learning_rate == 0:
        return policy
    row = policy.table.get(state.index)
    if row is None:
        row = policy._prior_row(state).copy()
        policy.table[state.index] = row
    future = 0.0 if next_state is None else float(policy.q(next_state).max())
    row[action] += policy.learning_rate * (reward + policy.discount * future - row[action])
    return policy


# ---------------------------------------------------------------------------
# Synthetic CPA-tracking MDP, used to pretrain the policy and to check it.


@dataclass(frozen=True)
class CpaTrackingMDP:
    """Deterministic eight-bucket day over (bucket, CPA-gap bin) states.

    Acting with ratio r in gap bin k produces a realized relative CPA error
    e = center[k] + sensitivity * r; the reward is min(15, 1/|e|) and the next
    gap bin is the bin of e + drift[bucket]. The other state components are
    held at their neutral bins.
    """

    sensitivity: float = 0.1
    drift: tuple[float, ...] = (0.0,) * N_TID
    discount: float = 0.9

    @property
    def n_states(self) -> int:
        return N_TID * N_SIGNED

    def step(self, tid: int, k: int, action: int) -> tuple[float, Optional[int]]:
        e = SIGNED_CENTERS[k] + self.sensitivity * ACTIONS[action]
        e = round(float(e), 12)
        reward = alpha_reward(1.0 + e, 1.0)
        if tid == N_TID - 1:
            return reward, None
        return reward, signed_bin(round(e + self.drift[tid], 12))

    def full_state(self, tid: int, k: int) -> AlphaState:
        return AlphaState(tid, min(tid * N_SR // N_TID, N_SR - 1), 3, 3, k)


def value_iteration(mdp: CpaTrackingMDP) -> np.ndarray:
    """Exact optimal Q by backward induction, shape (8 * 7, 31)."""
    q = np.zeros((N_TID, N_SIGNED, N_ACTIONS))
    v_next = np.zeros(N_SIGNED)
    for tid in reversed(range(N_TID)):
        for k in range(N_SIGNED):
            for a in range(N_ACTIONS):
                r, nk = mdp.step(tid, k, a)
                q[tid, k, a] = r + (0.0 if nk is None else mdp.discount * v_next[nk])
        v_next = q[tid].max(axis=1)
    return q.reshape(N_TID * N_SIGNED, N_ACTIONS)


def train_on_mdp(mdp: CpaTrackingMDP, episodes: int, rng: np.random.Generator,
                 learning_rate: float = 1.0, epsilon: float = 0.5) -> np.ndarray:
    """Q-learning with exploring starts; returns the (8 * 7, 31) table.

    The MDP is deterministic, so a unit learning rate is a valid choice.
    """
    q = np.zeros((N_TID * N_SIGNED, N_ACTIONS))
    for _ in range(episodes):
        tid = int(rng.integers(N_TID))
        k = int(rng.integers(N_SIGNED))
        while True:
            s = tid * N_SIGNED + k
            if rng.random() < epsilon:
                a = int(rng.integers(N_ACTIONS))
            else:
                a = int(np.argmax(q[s]))
            r, nk = mdp.step(tid, k, a)
            future = 0.0 if nk is None else q[(tid + 1) * N_SIGNED + nk].max()
            q[s, a] += learning_rate * (r + mdp.discount * future - q[s, a])
            if nk is None:
                break
            tid, k = tid + 1, nk
    return q


def optimal_agreement(learned: np.ndarray, optimal: np.ndarray, tol: float = 1e-9) -> float:
    """Fraction of states whose greedy learned action is optimal (ties allowed)."""
    picks = learned.argmax(axis=1)
    best = optimal.max(axis=1)
    chosen = optimal[np.arange(len(picks)), picks]
    return float(np.mean(chosen >= best - tol))


def pretrained_prior(episodes: int, seed: int, discount: float = 0.9) -> np.ndarray:
    """Policy prior learned on the drift-free tracking MDP."""
    mdp = CpaTrackingMDP(discount=discount)
    return train_on_mdp(mdp, episodes, np.random.default_rng(seed))


def bandit_run(rewards: Sequence[float], steps: int, rng: np.random.Generator,
               learning_rate: float = 0.1, epsilon: float = 0.2) -> int:
    """Single-state bandit used to sanity-check the update; returns the greedy action."""
    policy = AlphaPolicy(learning_rate, 0.0, epsilon)
    s = AlphaState(0, 0, 3, 3, 3)
    for _ in range(steps):
        a = int(rng.integers(len(rewards))) if rng.random() < epsilon else int(np.argmax(policy.q(s)[:len(rewards)]))
        alpha_step(policy, s, a, rewards[a], None)
    return int(np.argmax(policy.q(s)[:len(rewards)]))
