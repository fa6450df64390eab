"""Small, exactly solvable discrete MDPs and behavior policies for data collection.

Built-in environments:

``gridworld``
    N x N grid, start top-left, goal bottom-right (+1 on entry, terminal).
    With probability ``slip`` the chosen move is replaced by a uniformly random one.
``cliff``
    width x height grid, start bottom-left, goal bottom-right (+1). The bottom
    row between them is cliff: entering it pays -1 and ends the episode.
``chain``
    N states in a row, start at 0, state N-1 terminal. ``left`` jumps back to 0
    for a small reward, ``right`` advances and pays a large reward on reaching
    the end. ``slip`` swaps the two actions.

Actions on grids are 0=up, 1=right, 2=down, 3=left; on the chain 0=left, 1=right.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dataset import Dataset, EnvSpec, Episode, Transition, provenance_text

GRID_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))

ENV_PARAMS = {
    "gridworld": {"n": (int, 4, 2, 20), "slip": (float, 0.0, 0.0, 1.0), "horizon": (int, None, 1, 10_000)},
    "cliff": {
        "width": (int, 6, 3, 20),
        "height": (int, 4, 2, 20),
        "slip": (float, 0.0, 0.0, 1.0),
        "horizon": (int, None, 1, 10_000),
    },
    "chain": {
        "n": (int, 5, 2, 100),
        "small": (float, 0.1, -1e6, 1e6),
        "large": (float, 1.0, -1e6, 1e6),
        "slip": (float, 0.0, 0.0, 1.0),
        "horizon": (int, None, 1, 10_000),
    },
}


def describe_env_params() -> str:
    lines = []
    for name, params in ENV_PARAMS.items():
        parts = []
        for key, (typ, default, lo, hi) in params.items():
            shown = "auto" if default is None else default
            parts.append(f"{key}={shown} [{lo}..{hi}]")
        lines.append(f"{name}: " + ", ".join(parts))
    return "\n".join(lines)


@dataclass(frozen=True, eq=False)
class DiscreteMDP:
    """Finite MDP with per-outcome rewards.

    ``reward_kernel[s, a, s2]`` is the reward paid when (s, a) lands in s2;
    ``reward_table`` is its expectation under the transition kernel.
    Terminal states are absorbing with zero reward.
    """

    name: str
    params: dict
    transition_kernel: np.ndarray
    reward_kernel: np.ndarray
    initial_distribution: np.ndarray
    terminal_states: frozenset
    horizon: int
    _cdf: np.ndarray = field(init=False, repr=False)
    _init_cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P = np.asarray(self.transition_kernel, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError("transition kernel must have shape (S, A, S)")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("transition kernel rows must be distributions")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for arr in (P, self.reward_kernel, self.initial_distribution):
            arr.setflags(write=False)
        cdf = np.cumsum(P, axis=2)
        cdf[..., -1] = 1.0
        init_cdf = np.cumsum(self.initial_distribution)
        init_cdf[-1] = 1.0
        object.__setattr__(self, "_cdf", cdf)
        object.__setattr__(self, "_init_cdf", init_cdf)

    @property
    def n_states(self) -> int:
        return self.transition_kernel.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition_kernel.shape[1]

    @property
    def reward_table(self) -> np.ndarray:
        return (self.transition_kernel * self.reward_kernel).sum(axis=2)

    @property
    def env_id(self) -> str:
        args = ",".join(f"{k}={self.params[k]!r}" for k in ENV_PARAMS[self.name])
        return f"{self.name}:{args}"

    @property
    def env_spec(self) -> EnvSpec:
        return EnvSpec(self.env_id, "discrete", self.n_states, "discrete", self.n_actions, self.horizon)

    @property
    def nonterminal_mask(self) -> np.ndarray:
        mask = np.ones(self.n_states, dtype=bool)
        mask[list(self.terminal_states)] = False
        return mask

    def reset(self, rng: np.random.Generator) -> int:
        return int(np.searchsorted(self._init_cdf, rng.random(), side="right"))

    def step(self, s: int, a: int, rng: np.random.Generator) -> tuple[int, float, bool]:
        s2 = int(np.searchsorted(self._cdf[s, a], rng.random(), side="right"))
        return s2, float(self.reward_kernel[s, a, s2]), s2 in self.terminal_states


# -- construction -------------------------------------------------------------


def _resolve_params(name: str, params: dict) -> dict:
    if name not in ENV_PARAMS:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENV_PARAMS)}")
    spec = ENV_PARAMS[name]
    unknown = set(params) - set(spec)
    if unknown:
        raise ValueError(f"unknown parameters for {name}: {sorted(unknown)}")
    out = {}
    for key, (typ, default, lo, hi) in spec.items():
        value = params.get(key, default)
        if value is None:
            out[key] = None
            continue
        try:
            if typ is int and isinstance(value, float) and not value.is_integer():
                raise ValueError
            value = typ(value)
        except (TypeError, ValueError):
            raise ValueError(f"{name}.{key} must be {typ.__name__}, got {value!r}") from None
        if not (lo <= value <= hi) or (typ is float and not math.isfinite(value)):
            raise ValueError(f"{name}.{key}={value!r} outside [{lo}, {hi}]")
        out[key] = value
    return out


def _grid_mdp(name, params, rows, cols, start, goal, cliffs, slip, horizon):
    S, A = rows * cols, 4
    P = np.zeros((S, A, S))
    Rk = np.zeros((S, A, S))
    terminal = {goal, *cliffs}

    def move(s, b):
        r, c = divmod(s, cols)
        dr, dc = GRID_MOVES[b]
        r2, c2 = r + dr, c + dc
        if 0 <= r2 < rows and 0 <= c2 < cols:
            return r2 * cols + c2
        return s

    for s in range(S):
        if s in terminal:
            P[s, :, s] = 1.0
            continue
        for a in range(A):
            P[s, a, move(s, a)] += 1.0 - slip
            for b in range(A):
                P[s, a, move(s, b)] += slip / A
        Rk[s, :, goal] = 1.0
        for c in cliffs:
            Rk[s, :, c] = -1.0
    init = np.zeros(S)
    init[start] = 1.0
    return DiscreteMDP(name, params, P, Rk, init, frozenset(terminal), horizon)


def make_env(name: str, **params) -> DiscreteMDP:
    """Build a built-in environment; see the module docstring for the layouts."""
    p = _resolve_params(name, params)
    if name == "gridworld":
        n = p["n"]
        if p["horizon"] is None:
            p["horizon"] = 2 * n * n
        return _grid_mdp(name, p, n, n, 0, n * n - 1, (), p["slip"], p["horizon"])
    if name == "cliff":
        w, h = p["width"], p["height"]
        if p["horizon"] is None:
            p["horizon"] = 2 * w * h
        base = (h - 1) * w
        cliffs = tuple(base + c for c in range(1, w - 1))
        return _grid_mdp(name, p, h, w, base, base + w - 1, cliffs, p["slip"], p["horizon"])

    n = p["n"]
    if p["horizon"] is None:
        p["horizon"] = 4 * n
    P = np.zeros((n, 2, n))
    Rk = np.zeros((n, 2, n))
    last = n - 1
    for s in range(last):
        outcomes = {0: (0, p["small"]), 1: (s + 1, p["large"] if s + 1 == last else 0.0)}
        for a in (0, 1):
            for b, prob in ((a, 1.0 - p["slip"]), (1 - a, p["slip"])):
                s2, r = outcomes[b]
                P[s, a, s2] += prob
                Rk[s, a, s2] = r
    P[last, :, last] = 1.0
    init = np.zeros(n)
    init[0] = 1.0
    return DiscreteMDP(name, p, P, Rk, init, frozenset({last}), p["horizon"])


def parse_env_id(env_id: str) -> tuple[str, dict]:
    name, _, rest = env_id.partition(":")
    params = {}
    for item in filter(None, rest.split(",")):
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"bad environment parameter {item!r} in {env_id!r}")
        params[key.strip()] = None if value.strip() == "None" else value.strip()
    return name.strip(), params


def make_env_from_id(env_id: str) -> DiscreteMDP:
    name, params = parse_env_id(env_id)
    spec = ENV_PARAMS.get(name, {})
    typed = {}
    for key, value in params.items():
        typ = spec.get(key, (str,))[0]
        typed[key] = value if value is None else typ(float(value)) if typ is int else typ(value)
    return make_env(name, **typed)


# -- exact solution -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OptimalSolution:
    q: np.ndarray
    v: np.ndarray
    policy: np.ndarray
    iterations: int


def solve_optimal(m: DiscreteMDP, gamma: float, tol: float = 1e-10, max_iter: int = 1_000_000) -> OptimalSolution:
    """Value iteration to a sup-norm change below ``tol``; greedy ties go to the lowest action."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must be in [0, 1)")
    P, R = m.transition_kernel, m.reward_table
    v = np.zeros(m.n_states)
    for it in range(1, max_iter + 1):
        q = R + gamma * (P @ v)
        v_new = q.max(axis=1)
        delta = np.max(np.abs(v_new - v))
        v = v_new
        if delta < tol:
            break
    return OptimalSolution(q, v, np.argmax(q, axis=1), it)


def optimal_action_mask(q_star: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    return q_star >= q_star.max(axis=1, keepdims=True) - tol


# -- behavior policies --------------------------------------------------------

RANDOM, MEDIUM, EXPERT = "random", "medium", "expert"


@dataclass(frozen=True)
class BehaviorPolicyKind:
    kind: str
    training_fraction: float = 0.3
    epsilon: float = 0.1

    def __post_init__(self):
        if self.kind not in (RANDOM, MEDIUM, EXPERT):
            raise ValueError(f"unknown behavior policy {self.kind!r}")
        if self.kind == MEDIUM and not 0.0 < self.training_fraction < 1.0:
            raise ValueError("training_fraction must be strictly between 0 and 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")


@dataclass(frozen=True)
class MixSpec:
    random_episodes: int
    medium_episodes: int
    expert_episodes: int
    shuffle_seed: int = 0

    def __post_init__(self):
        counts = self.counts
        if min(counts) < 0 or max(counts) == 0:
            raise ValueError("mix needs non-negative counts with at least one positive")

    @property
    def counts(self) -> tuple[int, int, int]:
        return (self.random_episodes, self.medium_episodes, self.expert_episodes)

    @classmethod
    def from_weights(cls, weights, total: int, shuffle_seed: int = 0) -> "MixSpec":
        """Split ``total`` episodes by relative weights (largest remainder)."""
        weights = [float(w) for w in weights]
        if len(weights) != 3 or min(weights) < 0 or sum(weights) <= 0:
            raise ValueError("mix weights must be three non-negative numbers, not all zero")
        raw = [total * w / sum(weights) for w in weights]
        counts = [math.floor(x) for x in raw]
        order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
        for i in order[: total - sum(counts)]:
            counts[i] += 1
        return cls(*counts, shuffle_seed=shuffle_seed)


def _epsilon_greedy(greedy: np.ndarray, n_actions: int, epsilon: float) -> np.ndarray:
    probs = np.full((len(greedy), n_actions), epsilon / n_actions)
    probs[np.arange(len(greedy)), greedy] += 1.0 - epsilon
    return probs


@dataclass(frozen=True, eq=False)
class QLearningRun:
    snapshots: list  # (env steps, Q table) taken at episode ends
    convergence_steps: int
    converged: bool


def run_q_learning(
    m: DiscreteMDP,
    gamma: float,
    seed: int,
    max_steps: int = 200_000,
    learning_rate: float = 0.5,
    explore: float = 0.2,
) -> QLearningRun:
    """Online epsilon-greedy tabular Q-learning, snapshotting Q after each episode.

    Converged means the greedy action is optimal (w.r.t. value iteration) in
    every non-terminal state.
    """
    rng = np.random.default_rng([seed, 7])
    optimal = optimal_action_mask(solve_optimal(m, gamma).q)
    live = np.flatnonzero(m.nonterminal_mask)
    q = np.zeros((m.n_states, m.n_actions))
    snapshots = [(0, q.copy())]
    steps = 0
    while steps < max_steps:
        s = m.reset(rng)
        for _ in range(m.horizon):
            if rng.random() < explore:
                a = int(rng.integers(m.n_actions))
            else:
                # random tie-breaking while exploring; with a zero-initialised
                # table lowest-id ties would walk into the nearest wall forever
                best = np.flatnonzero(q[s] == q[s].max())
                a = int(best[rng.integers(len(best))]) if len(best) > 1 else int(best[0])
            s2, r, term = m.step(s, a, rng)
            target = r if term else r + gamma * q[s2].max()
            q[s, a] += learning_rate * (target - q[s, a])
            steps += 1
            s = s2
            if term:
                break
        snapshots.append((steps, q.copy()))
        greedy = np.argmax(q, axis=1)
        if optimal[live, greedy[live]].all():
            return QLearningRun(snapshots, steps, True)
    return QLearningRun(snapshots, steps, False)


def make_behavior_policy(
    m: DiscreteMDP, kind: BehaviorPolicyKind, seed: int, gamma: float = 0.99
) -> np.ndarray:
    """Return an (S, A) table of action probabilities.

    ``medium`` is the greedy policy of Q-learning stopped at ``training_fraction``
    of the environment steps it needed to converge, mixed with epsilon-uniform.
    """
    S, A = m.n_states, m.n_actions
    if kind.kind == RANDOM:
        return np.full((S, A), 1.0 / A)
    if kind.kind == EXPERT:
        return _epsilon_greedy(solve_optimal(m, gamma).policy, A, kind.epsilon)
    run = run_q_learning(m, gamma, seed)
    budget = kind.training_fraction * run.convergence_steps
    q = run.snapshots[0][1]
    for steps, snap in run.snapshots:
        if steps > budget:
            break
        q = snap
    return _epsilon_greedy(np.argmax(q, axis=1), A, kind.epsilon)


# -- rollouts and datasets ----------------------------------------------------


def run_episode(
    m: DiscreteMDP, act: Callable[[int, np.random.Generator], int], rng: np.random.Generator
) -> list[Transition]:
    """Roll out one episode; it ends on entering a terminal state or at the horizon."""
    s = m.reset(rng)
    out = []
    for t in range(m.horizon):
        a = act(s, rng)
        s2, r, term = m.step(s, a, rng)
        tout = not term and t + 1 == m.horizon
        out.append(Transition(s, a, r, s2, term, tout))
        if term:
            break
        s = s2
    return out


def table_actor(probs: np.ndarray) -> Callable[[int, np.random.Generator], int]:
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    last = probs.shape[1] - 1

    def act(s: int, rng: np.random.Generator) -> int:
        return min(int(np.searchsorted(cdf[s], rng.random(), side="right")), last)

    return act


def generate_dataset(
    m: DiscreteMDP,
    mix: MixSpec,
    seed: int,
    epsilon: float = 0.1,
    training_fraction: float = 0.3,
    gamma: float = 0.99,
) -> Dataset:
    """Collect a mixed-quality dataset from random, medium and expert policies.

    Each policy kind rolls out with its own stream derived from ``seed``;
    episodes are then interleaved by ``mix.shuffle_seed``. The provenance
    records the mix, seeds and the source policy of every episode.
    """
    kinds = (
        BehaviorPolicyKind(RANDOM, epsilon=epsilon),
        BehaviorPolicyKind(MEDIUM, training_fraction=training_fraction, epsilon=epsilon),
        BehaviorPolicyKind(EXPERT, epsilon=epsilon),
    )
    pool = []
    for k, (kind, count) in enumerate(zip(kinds, mix.counts)):
        if count == 0:
            continue
        act = table_actor(make_behavior_policy(m, kind, seed, gamma))
        rng = np.random.default_rng([seed, k])
        pool.extend((kind.kind, run_episode(m, act, rng)) for _ in range(count))
    order = np.random.default_rng(mix.shuffle_seed).permutation(len(pool))
    episodes = [Episode(pool[i][1], pos) for pos, i in enumerate(order)]
    provenance = provenance_text(
        {
            "generator": "sfrl.envs.generate_dataset",
            "env": m.env_id,
            "mix": {"random": mix.counts[0], "medium": mix.counts[1], "expert": mix.counts[2]},
            "seed": seed,
            "shuffle_seed": mix.shuffle_seed,
            "epsilon": epsilon,
            "training_fraction": training_fraction,
            "gamma": gamma,
            "episode_sources": [pool[i][0] for i in order],
        }
    )
    return Dataset(tuple(episodes), m.env_spec, provenance)
