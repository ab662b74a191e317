"""DQN agents, the two-agent (one agent per bending axis) learner, and the
single-agent joint-action baseline."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .env import ObservationState, Target
from .errors import EnvironmentFault
from .seeding import Streams
from .shield import ShieldConfig, shield_action, shield_inputs

N_AXIS_ACTIONS = 4


@dataclass(frozen=True)
class Hyperparameters:
    gamma: float = 0.95
    buffer_capacity: int = 10000
    lr: float = 1e-4
    batch_size: int = 100
    max_episodes: int = 150
    epsilon_start: float = 1.0
    epsilon_decay: float = 0.9995
    epsilon_min: float = 0.01
    target_sync: int = 200
    max_steps: int = 200
    # states are fed in raw mm unless this is changed
    input_scale: float = 1.0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 1 <= self.batch_size <= self.buffer_capacity:
            raise ValueError("batch_size must lie in [1, buffer_capacity]")
        if not 0 < self.epsilon_decay < 1:
            raise ValueError("epsilon_decay must lie in (0, 1)")
        if self.target_sync < 1:
            raise ValueError("target_sync must be >= 1")
        if not 0 <= self.epsilon_min <= self.epsilon_start <= 1:
            raise ValueError("need 0 <= epsilon_min <= epsilon_start <= 1")

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class Transition:
    s: ObservationState
    a: int
    r: float
    s_next: ObservationState
    terminal: bool = False


class ReplayBuffer:
    """Fixed-capacity ring of transitions; the oldest entry is overwritten first."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, 2))
        self.a = np.zeros(self.capacity, dtype=np.int64)
        self.r = np.zeros(self.capacity)
        self.s_next = np.zeros((self.capacity, 2))
        self.terminal = np.zeros(self.capacity, dtype=bool)
        self.inserted = 0

    def __len__(self):
        return min(self.inserted, self.capacity)

    def add(self, t: Transition):
        i = self.inserted % self.capacity
        self.s[i] = (t.s.delta1, t.s.delta2)
        self.a[i] = t.a
        self.r[i] = t.r
        self.s_next[i] = (t.s_next.delta1, t.s_next.delta2)
        self.terminal[i] = t.terminal
        self.inserted += 1

    def transitions(self):
        """Stored transitions, oldest first."""
        n = len(self)
        start = self.inserted % self.capacity if self.inserted > self.capacity else 0
        order = [(start + k) % self.capacity for k in range(n)]
        return [
            Transition(
                ObservationState(*self.s[i]), int(self.a[i]), float(self.r[i]),
                ObservationState(*self.s_next[i]), bool(self.terminal[i]),
            )
            for i in order
        ]

    def sample_indices(self, rng, batch_size):
        return rng.choice(len(self), size=batch_size, replace=False)


@dataclass
class DqnAgent:
    net: nn.MlpParams
    target: nn.MlpParams
    adam: nn.AdamState
    buffer: ReplayBuffer
    hp: Hyperparameters
    epsilon: float
    learn_steps: int = 0

    @property
    def n_actions(self):
        return self.net.topology[-1]

    def q_values(self, states):
        return nn.forward(self.net, np.asarray(states) * self.hp.input_scale)


def make_agent(topology, hp, rng):
    net = nn.mlp_init(topology, rng)
    return DqnAgent(
        net=net,
        target=nn.copy_weights(net),
        adam=nn.AdamState.for_params(net, lr=hp.lr),
        buffer=ReplayBuffer(hp.buffer_capacity),
        hp=hp,
        epsilon=hp.epsilon_start,
    )


def choose_action(agent, s, rng):
    """Epsilon-greedy index; greedy ties go to the lowest index."""
    if rng.random() < agent.epsilon:
        return int(rng.integers(agent.n_actions))
    x = s.as_array() if isinstance(s, ObservationState) else np.asarray(s, dtype=np.float64)
    return int(np.argmax(agent.q_values(x)))


def td_targets(agent, rewards, next_states, terminal, gamma):
    """y_j = r_j + gamma * max_a Q_target(s_{j+1}, a); y_j = r_j on terminal transitions."""
    q_next = nn.forward(agent.target, np.asarray(next_states) * agent.hp.input_scale)
    bootstrap = np.where(terminal, 0.0, q_next.max(axis=1))
    return np.asarray(rewards) + gamma * bootstrap


def learn_step(agent, rng):
    """One minibatch TD update. Returns the loss, or ``None`` if the buffer is too small."""
    hp = agent.hp
    if len(agent.buffer) < hp.batch_size:
        return None
    idx = agent.buffer.sample_indices(rng, hp.batch_size)
    buf = agent.buffer
    y = td_targets(agent, buf.r[idx], buf.s_next[idx], buf.terminal[idx], hp.gamma)
    grad, loss_value = nn.loss_gradient(agent.net, buf.s[idx] * hp.input_scale, buf.a[idx], y)
    nn.adam_step(agent.net, grad, agent.adam)
    agent.epsilon = max(hp.epsilon_min, agent.epsilon * hp.epsilon_decay)
    agent.learn_steps += 1
    if agent.learn_steps % hp.target_sync == 0:
        agent.target = nn.copy_weights(agent.net)
    return loss_value


def decode_joint(index):
    """Joint action index (0..15) -> per-axis indices."""
    if not 0 <= index < N_AXIS_ACTIONS**2:
        raise IndexError(f"joint action index {index} out of range")
    return divmod(int(index), N_AXIS_ACTIONS)


def encode_joint(i1, i2):
    return int(i1) * N_AXIS_ACTIONS + int(i2)


def safe_pair(obs, indices, shield_cfg):
    d1, d2 = shield_inputs((obs.delta1, obs.delta2), shield_cfg)
    return (shield_action(d1, indices[0], shield_cfg), shield_action(d2, indices[1], shield_cfg))


class MadqnLearner:
    """Two independent DQN agents, agent 1 on the pitch axis and agent 2 on yaw.

    Both see the shared state; each stores and learns from its own action
    index and its own axis reward. Updates run agent 1 first, then agent 2.
    """

    mode = "madqn"

    def __init__(self, agents, shield_cfg=None, learning=True):
        self.agents = list(agents)
        self.shield_cfg = shield_cfg or ShieldConfig()
        self.learning = learning

    @classmethod
    def create(cls, hp, streams, shield_cfg=None, topology=nn.AGENT_TOPOLOGY):
        agents = [make_agent(topology, hp, streams[f"init{k}"]) for k in (1, 2)]
        return cls(agents, shield_cfg)

    @property
    def n_agents(self):
        return 2

    def act(self, obs, streams):
        indices = tuple(choose_action(ag, obs, streams[f"explore{k}"]) for k, ag in enumerate(self.agents, 1))
        return indices, safe_pair(obs, indices, self.shield_cfg)

    def store(self, obs, indices, rewards, obs_next, terminal):
        for ag, a, r in zip(self.agents, indices, rewards):
            ag.buffer.add(Transition(obs, a, r, obs_next, terminal))

    def learn(self, streams):
        if not self.learning:
            return (None, None)
        return tuple(learn_step(ag, streams[f"sample{k}"]) for k, ag in enumerate(self.agents, 1))

    def episode_rewards(self, rewards):
        return tuple(rewards)

    @property
    def epsilon(self):
        return self.agents[0].epsilon


class SingleAgentLearner:
    """One DQN over the 4 x 4 joint action set, rewarded with r1 + r2."""

    mode = "single"

    def __init__(self, agent, shield_cfg=None, learning=True):
        self.agents = [agent]
        self.shield_cfg = shield_cfg or ShieldConfig()
        self.learning = learning

    @classmethod
    def create(cls, hp, streams, shield_cfg=None, topology=nn.SINGLE_AGENT_TOPOLOGY):
        return cls(make_agent(topology, hp, streams["init1"]), shield_cfg)

    @property
    def n_agents(self):
        return 1

    def act(self, obs, streams):
        joint = choose_action(self.agents[0], obs, streams["explore1"])
        indices = decode_joint(joint)
        return indices, safe_pair(obs, indices, self.shield_cfg)

    def store(self, obs, indices, rewards, obs_next, terminal):
        self.agents[0].buffer.add(Transition(obs, encode_joint(*indices), rewards[0] + rewards[1], obs_next, terminal))

    def learn(self, streams):
        if not self.learning:
            return (None,)
        return (learn_step(self.agents[0], streams["sample1"]),)

    def episode_rewards(self, rewards):
        return (rewards[0] + rewards[1],)

    @property
    def epsilon(self):
        return self.agents[0].epsilon


@dataclass
class StepRecord:
    step: int
    obs: ObservationState
    indices: tuple
    action: tuple
    rewards: tuple
    tip: tuple
    saturated: bool


@dataclass
class EpisodeLog:
    steps: int = 0
    success: bool = False
    fault: bool = False
    rewards: tuple = ()
    mean_losses: tuple = ()
    epsilon: float = 1.0
    records: list = field(default_factory=list)

    @property
    def failed(self):
        return not self.success


def run_episode(env, learner, target, streams, keep_records=False, trace=None):
    """One episode from the home configuration to ``target`` (or the step limit)."""
    log = EpisodeLog()
    totals = np.zeros(learner.n_agents)
    loss_sums = np.zeros(learner.n_agents)
    loss_counts = np.zeros(learner.n_agents)
    try:
        obs = env.reset(target)
        while True:
            indices, action = learner.act(obs, streams)
            res = env.step(action)
            learner.store(obs, indices, res.rewards, res.obs, res.success)
            losses = learner.learn(streams)
            for k, lv in enumerate(losses):
                if lv is not None:
                    loss_sums[k] += lv
                    loss_counts[k] += 1
            totals += learner.episode_rewards(res.rewards)
            log.steps += 1
            if keep_records:
                log.records.append(StepRecord(log.steps, obs, indices, action, res.rewards, res.tip, res.saturated))
            if trace is not None:
                trace.record(log.steps, res, action)
            obs = res.obs
            if res.done:
                log.success = res.success
                break
    except EnvironmentFault:
        log.fault = True
        log.success = False
    log.rewards = tuple(float(v) for v in totals)
    log.mean_losses = tuple(
        float(s / c) if c else float("nan") for s, c in zip(loss_sums, loss_counts)
    )
    log.epsilon = learner.epsilon
    return log


def madqn_episode(env, agent1, agent2, shield_cfg, hp, streams, target=Target(10.0, -10.0), **kw):
    learner = MadqnLearner([agent1, agent2], shield_cfg)
    return run_episode(env, learner, target, streams, **kw)


@dataclass
class TrainingLog:
    mode: str
    episodes: list = field(default_factory=list)

    def __len__(self):
        return len(self.episodes)

    def rewards(self, agent=0):
        return np.array([ep.rewards[agent] for ep in self.episodes])

    def rolling(self, agent=0, window=10):
        """Trailing-window (mean, std) of episode reward at every episode."""
        r = self.rewards(agent)
        means, stds = [], []
        for i in range(len(r)):
            w = r[max(0, i - window + 1) : i + 1]
            means.append(w.mean())
            stds.append(w.std())
        return np.array(means), np.array(stds)

    def header(self):
        n = len(self.episodes[0].rewards) if self.episodes else (2 if self.mode == "madqn" else 1)
        cols = ["episode", "steps", "success"]
        cols += [f"reward_{k}" for k in range(1, n + 1)]
        cols += [f"loss_{k}" for k in range(1, n + 1)]
        return cols + ["epsilon"]

    def write_csv(self, stream):
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(self.header())
        for i, ep in enumerate(self.episodes, 1):
            w.writerow([i, ep.steps, int(ep.success), *map(repr, ep.rewards), *map(repr, ep.mean_losses), repr(ep.epsilon)])

    def to_csv(self):
        s = io.StringIO()
        self.write_csv(s)
        return s.getvalue()


def train(env, hp, seed, mode="madqn", shield_cfg=None, target=Target(10.0, -10.0), episodes=None, learner=None):
    """Train from scratch (or continue ``learner``) for ``episodes`` episodes.

    Returns ``(learner, TrainingLog)``; deterministic for a given seed.
    """
    streams = seed if isinstance(seed, Streams) else Streams(seed)
    if shield_cfg is None:
        shield_cfg = ShieldConfig(enabled=False)
    if learner is None:
        cls = MadqnLearner if mode == "madqn" else SingleAgentLearner
        learner = cls.create(hp, streams, shield_cfg)
    n = hp.max_episodes if episodes is None else episodes
    log = TrainingLog(learner.mode)
    for _ in range(n):
        log.episodes.append(run_episode(env, learner, target, streams))
    return learner, log


def stabilization_episode(log, agent=0, window=10, tol=0.1):
    """First episode (1-based) whose trailing-window std is below ``tol`` x the run's reward range."""
    r = log.rewards(agent)
    if len(r) < window:
        return None
    span = r.max() - r.min()
    _, stds = log.rolling(agent, window)
    for i in range(window - 1, len(r)):
        if stds[i] < tol * span:
            return i + 1
    return None


# Agent checkpoint layout (little-endian): magic b"CRAG", version u16,
# epsilon f64, learn_steps u64, then three u64-length-prefixed sections:
# evaluate net + Adam (nn format), target net (nn format), replay buffer
# (inserted u64, capacity u64, then len rows of s1 s2 a r s1' s2' terminal as f64).
AGENT_MAGIC = b"CRAG"


def dump_agent(agent):
    out = io.BytesIO()
    out.write(struct.pack("<4sHdQ", AGENT_MAGIC, 1, agent.epsilon, agent.learn_steps))
    buf = agent.buffer
    rows = np.column_stack([buf.s, buf.a.astype(np.float64), buf.r, buf.s_next, buf.terminal.astype(np.float64)])
    rows = rows[: len(buf)]
    sections = [
        nn.dump_params(agent.net, agent.adam),
        nn.dump_params(agent.target),
        struct.pack("<QQ", buf.inserted, buf.capacity) + rows.astype("<f8").tobytes(),
    ]
    for sec in sections:
        out.write(struct.pack("<Q", len(sec)))
        out.write(sec)
    return out.getvalue()


def load_agent(data, hp):
    stream = io.BytesIO(data)
    head = stream.read(struct.calcsize("<4sHdQ"))
    magic, version, eps, learn_steps = struct.unpack("<4sHdQ", head)
    if magic != AGENT_MAGIC or version != 1:
        raise ValueError("not an agent checkpoint")
    sections = []
    for _ in range(3):
        (n,) = struct.unpack("<Q", stream.read(8))
        sections.append(stream.read(n))
    net, adam = nn.load_params(sections[0])
    target, _ = nn.load_params(sections[1])
    inserted, capacity = struct.unpack("<QQ", sections[2][:16])
    rows = np.frombuffer(sections[2][16:], dtype="<f8").reshape(-1, 7)
    buf = ReplayBuffer(capacity)
    n = len(rows)
    buf.s[:n] = rows[:, 0:2]
    buf.a[:n] = rows[:, 2].astype(np.int64)
    buf.r[:n] = rows[:, 3]
    buf.s_next[:n] = rows[:, 4:6]
    buf.terminal[:n] = rows[:, 6] > 0.5
    buf.inserted = inserted
    return DqnAgent(net, target, adam, buf, hp, eps, learn_steps)
