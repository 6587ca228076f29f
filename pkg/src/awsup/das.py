"""REINFORCE search over deep-supervision loss weights.

The four supervision heads get weights ``alpha = softmax(beta)``. Each epoch
the controller samples K additive moves on ``beta`` (one of -step, 0, +step per
head), K network replicas train for one epoch under the resulting weights,
and their validation Dice is turned into a cubic reward. The controller takes
a baseline-corrected REINFORCE step and training continues from the replica
with the best validation score.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

N_LAYERS = 4
STEP = 0.15
BETA_INIT = (0.5, 0.5, 0.5, 1.0)
BETA_CLIP = 3.0
REWARD_SHIFT = 0.04


def softmax_weights(beta):
    beta = np.asarray(beta, dtype=np.float64)
    if not np.all(np.isfinite(beta)):
        raise ContractError(f"beta must be finite, got {beta.tolist()}")
    e = np.exp(beta - beta.max())
    return e / e.sum()


def action_values(step=STEP):
    return np.array([-step, 0.0, step])


def action_probs(theta):
    """Per-layer categorical probabilities, shape (layers, 3)."""
    theta = np.asarray(theta, dtype=np.float64)
    e = np.exp(theta - theta.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def sample_actions(theta, rng):
    """Draw one action index per layer by inverse CDF on ``rng.random``.

    Returns indices into ``action_values()``: 0 -> -step, 1 -> 0, 2 -> +step.
    """
    probs = action_probs(theta)
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def apply_actions(beta, actions, clip=BETA_CLIP):
    return np.clip(np.asarray(beta, dtype=np.float64) + np.asarray(actions, dtype=np.float64), -clip, clip)


def reward(eps_dice):
    return (eps_dice + REWARD_SHIFT) ** 3


def baseline_update(B, rewards, gamma=0.99):
    """``(1 - gamma) * B + gamma * mean(rewards)``."""
    return (1.0 - gamma) * B + gamma * float(np.mean(rewards))


@dataclass
class EpochSample:
    replica: int
    action_idx: np.ndarray
    actions: np.ndarray
    beta: np.ndarray
    eps: float = float("nan")
    reward: float = float("nan")

    @property
    def alpha(self):
        return softmax_weights(self.beta)


def log_prob_grad(theta, action_idx):
    """Gradient of sum_i log p(a_i) w.r.t. theta: one-hot minus probabilities."""
    probs = action_probs(theta)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(action_idx)), action_idx] = 1.0
    return onehot - probs


def controller_update(theta, samples, B, lr):
    """theta + lr / K * sum_j (R_j - B) * grad log p(a^j)."""
    if not samples:
        raise ContractError("controller_update needs at least one sample")
    theta = np.asarray(theta, dtype=np.float64)
    step = np.zeros_like(theta)
    for s in samples:
        adv = s.reward - B
        if not np.isfinite(adv):
            raise ContractError(f"non-finite advantage for replica {s.replica}")
        if adv != 0.0:
            step += adv * log_prob_grad(theta, s.action_idx)
    return theta + lr * step / len(samples)


def select_best(samples):
    """Index and beta of the sample with the highest validation score; ties go to the lowest index."""
    best = max(range(len(samples)), key=lambda j: (samples[j].eps, -j))
    return best, samples[best].beta.copy()


def no_rl_update(samples):
    return select_best(samples)[1]


@dataclass
class ControllerState:
    theta: np.ndarray
    baseline: float = 0.0
    lr: float = 1e-3
    gamma: float = 0.99
    step: float = STEP
    epoch: int = 0

    @classmethod
    def initial(cls, rng, variance=1e-3, **kw):
        return cls(theta=rng.normal(0.0, np.sqrt(variance), size=(N_LAYERS, 3)), **kw)


@dataclass
class WeightSearch:
    """Epoch-level driver for the auto (``"auto"``) and best-pick-only (``"norl"``) searches.

    ``propose`` draws the K candidate weight vectors; after the caller has
    trained and validated each replica and filled in ``eps``, ``finish``
    computes rewards, updates the baseline and controller (auto only) and
    returns the index of the replica to continue from.
    """

    mode: str
    state: ControllerState
    beta: np.ndarray = field(default_factory=lambda: np.array(BETA_INIT))
    K: int = 10
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("auto", "norl"):
            raise ContractError(f"unknown search mode {self.mode!r}")
        self.beta = np.asarray(self.beta, dtype=np.float64)

    def policy_theta(self):
        if self.mode == "norl":
            return np.zeros_like(self.state.theta)
        return self.state.theta

    def propose(self, rng):
        values = action_values(self.state.step)
        theta = self.policy_theta()
        out = []
        for j in range(self.K):
            idx = sample_actions(theta, rng)
            acts = values[idx]
            out.append(EpochSample(j, idx, acts, apply_actions(self.beta, acts)))
        return out

    def finish(self, samples):
        for s in samples:
            s.reward = reward(s.eps)
        st = self.state
        if self.mode == "auto":
            st.baseline = baseline_update(st.baseline, [s.reward for s in samples], st.gamma)
            st.theta = controller_update(st.theta, samples, st.baseline, st.lr)
        best, self.beta = select_best(samples)
        self.history.append((st.epoch, samples, st.baseline))
        st.epoch += 1
        return best


TRACE_HEADER = (["epoch", "replica"] + [f"a{i}" for i in range(1, 5)] + [f"beta{i}" for i in range(1, 5)]
                + [f"alpha{i}" for i in range(1, 5)] + ["eps", "R", "B"])


def trace_rows(epoch, samples, baseline):
    rows = []
    for s in samples:
        rows.append([epoch, s.replica, *map(float, s.actions), *map(float, s.beta),
                     *map(float, s.alpha), float(s.eps), float(s.reward), float(baseline)])
    return rows


def write_trace(path, rows, append=False):
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(TRACE_HEADER)
        for r in rows:
            w.writerow([r[0], r[1]] + [repr(v) for v in r[2:]])


def read_trace(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != TRACE_HEADER:
            raise ContractError(f"{path}: unexpected trace header")
        return [[int(r[0]), int(r[1])] + [float(v) for v in r[2:]] for r in reader]
