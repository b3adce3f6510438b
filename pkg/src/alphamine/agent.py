"""Masked-action PPO over token prefixes.

The policy embeds each token (width 32), encodes the prefix with a 2-layer
LSTM of hidden width 128 (dropout 0.1 between layers, active only during
update-phase forward passes), and feeds the final hidden state to separate
policy and value heads of two 64-wide hidden layers each. Illegal actions
have their logits forced to -inf before the softmax, so their
probabilities are exactly zero and they are never sampled.

Updates use the clipped surrogate objective min(r*A, clip(r, 1-eps, 1+eps)*A)
with generalized advantage estimation at discount 1, advantage
normalization per update batch, and value targets equal to advantage plus
the collected value estimate.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import dsl
from .env import MiningEnv
from .errors import UpdateError

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

EMBED_DIM = 32
HIDDEN_SIZE = 128
NUM_LAYERS = 2
HEAD_WIDTH = 64


@dataclass
class PpoConfig:
    clip_epsilon: float = 0.2
    discount: float = 1.0
    gae_lambda: float = 0.95
    epochs_per_update: int = 4
    minibatch_size: int = 64
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    learning_rate: float = 3e-4
    rollout_episodes: int = 64
    max_env_steps: int = 100_000
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError(f"clip_epsilon must be in (0, 1), got {self.clip_epsilon}")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError(f"discount must be in (0, 1], got {self.discount}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if self.minibatch_size < 1 or self.epochs_per_update < 1 or self.rollout_episodes < 1:
            raise ValueError("minibatch_size, epochs_per_update, rollout_episodes must be >= 1")


class ActorCritic(nn.Module):
    """Token embedding, recurrent prefix encoder, and twin MLP heads."""

    def __init__(self, vocab_size: int, embed_dim: int = EMBED_DIM,
                 hidden_size: int = HIDDEN_SIZE, num_layers: int = NUM_LAYERS,
                 head_width: int = HEAD_WIDTH, dropout: float = 0.1):
        super().__init__()
        self.vocab_size = vocab_size
        self.arch = {
            "vocab_size": vocab_size, "embed_dim": embed_dim, "hidden_size": hidden_size,
            "num_layers": num_layers, "head_width": head_width, "dropout": dropout,
        }
        self.pad_id = vocab_size
        self.embedding = nn.Embedding(vocab_size + 1, embed_dim, padding_idx=self.pad_id)
        self.encoder = nn.LSTM(
            embed_dim, hidden_size, num_layers=num_layers, batch_first=True,
            dropout=dropout if num_layers > 1 else 0.0,
        )
        self.policy_head = self._head(hidden_size, head_width, vocab_size)
        self.value_head = self._head(hidden_size, head_width, 1)

    @staticmethod
    def _head(in_dim: int, width: int, out_dim: int) -> nn.Sequential:
        return nn.Sequential(
            nn.Linear(in_dim, width), nn.ReLU(),
            nn.Linear(width, width), nn.ReLU(),
            nn.Linear(width, out_dim),
        )

    def forward(self, token_ids: torch.Tensor, lengths: torch.Tensor):
        """Batch of padded prefixes -> (logits (B, V), values (B,))."""
        emb = self.embedding(token_ids)
        packed = nn.utils.rnn.pack_padded_sequence(
            emb, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        _, (hidden, _) = self.encoder(packed)
        feat = hidden[-1]
        return self.policy_head(feat), self.value_head(feat).squeeze(-1)

    def step(self, token_id: int, carry=None):
        """Extend a running encoding by one token; used during rollouts
        where re-encoding the whole prefix every step would be wasteful."""
        param = next(self.parameters())
        ids = torch.tensor([[token_id]], dtype=torch.long)
        out, carry = self.encoder(self.embedding(ids).to(param.dtype), carry)
        feat = out[:, -1, :]
        return self.policy_head(feat)[0], self.value_head(feat)[0, 0], carry


class MaskedCategorical:
    """Categorical distribution with hard-masked support.

    Masked entries get probability exactly 0; entropy treats their
    0 * log 0 terms as 0.
    """

    def __init__(self, logits: torch.Tensor, mask: torch.Tensor):
        masked = logits.masked_fill(~mask, float("-inf"))
        self.log_probs = masked - torch.logsumexp(masked, dim=-1, keepdim=True)
        self.probs = torch.exp(self.log_probs)
        self.mask = mask

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        flat = self.probs.reshape(-1, self.probs.shape[-1])
        picks = torch.multinomial(flat, 1, generator=generator)
        return picks.reshape(self.probs.shape[:-1])

    def log_prob(self, actions: torch.Tensor) -> torch.Tensor:
        return self.log_probs.gather(-1, actions.unsqueeze(-1)).squeeze(-1)

    def entropy(self) -> torch.Tensor:
        # Zero the -inf log-probs before multiplying: 0 * -inf is NaN, and even
        # under torch.where that NaN poisons the backward pass.
        safe_log = torch.where(self.mask, self.log_probs,
                               torch.zeros((), dtype=self.probs.dtype))
        return -(self.probs * safe_log).sum(dim=-1)


def policy_distribution(net: ActorCritic, token_ids, mask) -> MaskedCategorical:
    """Distribution over next tokens for one prefix (a sequence of ids)."""
    ids = torch.as_tensor(token_ids, dtype=torch.long).unsqueeze(0)
    lengths = torch.tensor([ids.shape[1]])
    logits, _ = net(ids, lengths)
    mask_t = torch.as_tensor(np.asarray(mask), dtype=torch.bool).unsqueeze(0)
    return MaskedCategorical(logits, mask_t)


# ---------------------------------------------------------------------------
# Rollout storage and advantage estimation


@dataclass
class RolloutBuffer:
    """Flattened transitions of one update's episodes."""

    state_ids: list = field(default_factory=list)   # list of id tuples
    masks: list = field(default_factory=list)       # list of bool arrays
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    terminals: list = field(default_factory=list)
    episode_rewards: list = field(default_factory=list)

    def __len__(self):
        return len(self.actions)

    def add(self, state_ids, mask, action, log_prob, value, reward, terminal):
        self.state_ids.append(tuple(state_ids))
        self.masks.append(np.asarray(mask, dtype=bool))
        self.actions.append(int(action))
        self.log_probs.append(float(log_prob))
        self.values.append(float(value))
        self.rewards.append(float(reward))
        self.terminals.append(bool(terminal))


def compute_advantages(buffer: RolloutBuffer, config: PpoConfig):
    """Generalized advantage estimation over the buffer's episodes.

    Returns (normalized advantages, returns). Returns are raw advantage
    plus the collected value estimate; normalization (zero mean, unit
    standard deviation over the update batch) applies to the advantages
    only. Episodes are delimited by the terminal flags; values bootstrap
    to zero past a terminal.
    """
    gamma, lam = config.discount, config.gae_lambda
    n = len(buffer)
    advantages = np.zeros(n)
    running = 0.0
    next_value = 0.0
    for t in range(n - 1, -1, -1):
        if buffer.terminals[t]:
            running = 0.0
            next_value = 0.0
        delta = buffer.rewards[t] + gamma * next_value - buffer.values[t]
        running = delta + gamma * lam * running
        advantages[t] = running
        next_value = buffer.values[t]
    returns = advantages + np.asarray(buffer.values)
    std = advantages.std()
    normalized = (advantages - advantages.mean()) / (std + 1e-8)
    return normalized, returns


def clipped_surrogate(ratio: torch.Tensor, advantage: torch.Tensor,
                      clip_epsilon: float) -> torch.Tensor:
    """Per-transition clipped policy objective (to be maximized)."""
    clipped = torch.clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon)
    return torch.minimum(ratio * advantage, clipped * advantage)


# ---------------------------------------------------------------------------
# Updates


class _Batch:
    """Buffer contents as padded tensors in one dtype."""

    def __init__(self, buffer: RolloutBuffer, advantages, returns, dtype, pad_id):
        n = len(buffer)
        max_len = max(len(s) for s in buffer.state_ids)
        ids = np.full((n, max_len), pad_id, dtype=np.int64)
        for i, seq in enumerate(buffer.state_ids):
            ids[i, : len(seq)] = seq
        self.token_ids = torch.from_numpy(ids)
        self.lengths = torch.tensor([len(s) for s in buffer.state_ids], dtype=torch.long)
        self.masks = torch.from_numpy(np.stack(buffer.masks))
        self.actions = torch.tensor(buffer.actions, dtype=torch.long)
        self.old_log_probs = torch.tensor(buffer.log_probs, dtype=dtype)
        self.advantages = torch.as_tensor(advantages, dtype=dtype)
        self.returns = torch.as_tensor(returns, dtype=dtype)

    def __len__(self):
        return self.actions.shape[0]

    def slice(self, index: torch.Tensor) -> dict:
        return {
            "token_ids": self.token_ids[index],
            "lengths": self.lengths[index],
            "masks": self.masks[index],
            "actions": self.actions[index],
            "old_log_probs": self.old_log_probs[index],
            "advantages": self.advantages[index],
            "returns": self.returns[index],
        }


def ppo_loss(net: ActorCritic, part: dict, config: PpoConfig):
    """Full PPO loss on one minibatch, with diagnostics."""
    logits, values = net(part["token_ids"], part["lengths"])
    dist = MaskedCategorical(logits, part["masks"])
    new_log_probs = dist.log_prob(part["actions"])
    ratio = torch.exp(new_log_probs - part["old_log_probs"])
    policy_loss = -clipped_surrogate(ratio, part["advantages"], config.clip_epsilon).mean()
    value_loss = F.mse_loss(values, part["returns"])
    entropy = dist.entropy().mean()
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    stats = {
        "mean_ratio": float(ratio.detach().mean()),
        "clip_fraction": float(((ratio.detach() - 1.0).abs() > config.clip_epsilon).float().mean()),
        "entropy": float(entropy.detach()),
        "policy_loss": float(policy_loss.detach()),
        "value_loss": float(value_loss.detach()),
    }
    return loss, stats


def ppo_update(net: ActorCritic, optimizer, buffer: RolloutBuffer, config: PpoConfig,
               shuffle_generator: torch.Generator) -> dict:
    """Several epochs of minibatch updates over one rollout buffer.

    Aborts (raising UpdateError, parameters already partially updated but
    never stepped on garbage) if any minibatch loss is non-finite.
    Returns averaged diagnostics: mean ratio, clip fraction, entropy.
    """
    advantages, returns = compute_advantages(buffer, config)
    dtype = next(net.parameters()).dtype
    batch = _Batch(buffer, advantages, returns, dtype, net.pad_id)
    net.train()
    totals: dict[str, float] = {}
    count = 0
    for _ in range(config.epochs_per_update):
        order = torch.randperm(len(batch), generator=shuffle_generator)
        for start in range(0, len(batch), config.minibatch_size):
            part = batch.slice(order[start : start + config.minibatch_size])
            loss, stats = ppo_loss(net, part, config)
            if not torch.isfinite(loss):
                raise UpdateError(f"non-finite loss in update: {stats}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            for key, val in stats.items():
                totals[key] = totals.get(key, 0.0) + val
            count += 1
    return {key: val / count for key, val in totals.items()}


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    env_steps: int
    episodes: int
    updates: int
    pool_objective: float


def train(config: PpoConfig, env: MiningEnv, net: ActorCritic | None = None,
          optimizer=None, episode_callback=None, update_callback=None,
          prior_env_steps: int = 0, prior_episodes: int = 0,
          prior_updates: int = 0) -> tuple[TrainResult, ActorCritic, object]:
    """Run masked PPO against the mining environment until the step budget.

    max_env_steps counts prior_env_steps plus steps taken here, and is a
    hard ceiling: a new episode starts only when the longest possible
    episode still fits. The pool is shared state inside env and is never
    reset between episodes.

    episode_callback(dict) fires per episode with the expression, reward,
    pool objective, and pool size; update_callback(dict) fires per update
    with cumulative env steps and update diagnostics.
    """
    torch.manual_seed(config.seed)
    if net is None:
        net = ActorCritic(env.vocab.size, dropout=config.dropout)
    if optimizer is None:
        optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    sample_gen = torch.Generator().manual_seed(config.seed)
    shuffle_gen = torch.Generator().manual_seed(config.seed + 1)

    episode_cost = env.max_tokens - 1  # worst-case actions per episode
    episodes = prior_episodes
    updates = prior_updates

    def steps_total() -> int:
        return prior_env_steps + env.steps_taken

    while steps_total() + episode_cost <= config.max_env_steps:
        buffer = RolloutBuffer()
        net.eval()
        with torch.no_grad():
            for _ in range(config.rollout_episodes):
                if steps_total() + episode_cost > config.max_env_steps:
                    break
                info = _collect_episode(net, env, buffer, sample_gen)
                episodes += 1
                if episode_callback is not None:
                    record = {"episode": episodes, **info}
                    episode_callback(record)
        if len(buffer) == 0:
            break
        stats = ppo_update(net, optimizer, buffer, config, shuffle_gen)
        updates += 1
        if update_callback is not None:
            update_callback({
                "update": updates,
                "env_steps": steps_total(),
                "pool_objective": env.pool.objective,
                "mean_reward": float(np.mean(buffer.episode_rewards)),
                "entropy": stats["entropy"],
                "clip_fraction": stats["clip_fraction"],
            })
    result = TrainResult(
        env_steps=steps_total(), episodes=episodes, updates=updates,
        pool_objective=env.pool.objective,
    )
    return result, net, optimizer


def _collect_episode(net: ActorCritic, env: MiningEnv, buffer: RolloutBuffer,
                     sample_gen: torch.Generator) -> dict:
    state = env.reset()
    carry = None
    prefix_ids = [env.vocab.id_of(state.tokens[0])]
    logits, value, carry = net.step(prefix_ids[0], carry)
    while True:
        mask = env.action_mask(state)
        mask_t = torch.from_numpy(mask)
        dist = MaskedCategorical(logits.unsqueeze(0), mask_t.unsqueeze(0))
        action = int(dist.sample(generator=sample_gen)[0])
        log_prob = float(dist.log_probs[0, action])
        outcome = env.step(state, action)
        buffer.add(prefix_ids, mask, action, log_prob, float(value), outcome.reward,
                   outcome.terminal)
        if outcome.terminal:
            buffer.episode_rewards.append(outcome.reward)
            info = dict(outcome.info)
            info["reward"] = outcome.reward
            return info
        state = outcome.state
        prefix_ids = prefix_ids + [action]
        logits, value, carry = net.step(action, carry)


# ---------------------------------------------------------------------------
# Checkpointing (deterministic bytes: JSON header line + raw tensor data)


def save_checkpoint(path: str, net: ActorCritic, optimizer, counters: dict,
                    config: PpoConfig) -> None:
    specs = []
    blobs = []

    def push(name: str, tensor: torch.Tensor):
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy())
        specs.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        blobs.append(arr.tobytes())

    named = list(net.named_parameters())
    for name, param in named:
        push(f"param:{name}", param)
    for index, (name, param) in enumerate(named):
        state = optimizer.state.get(param)
        if state:
            push(f"opt:{index}:step", torch.as_tensor(state["step"]))
            push(f"opt:{index}:exp_avg", state["exp_avg"])
            push(f"opt:{index}:exp_avg_sq", state["exp_avg_sq"])
    header = {
        "version": CHECKPOINT_VERSION,
        "arch": net.arch,
        "counters": counters,
        "config": asdict(config),
        "tensors": specs,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode())
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str):
    """Returns (net, optimizer, counters, config) rebuilt from save_checkpoint."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
        tensors = {}
        for spec in header["tensors"]:
            arr = np.frombuffer(
                fh.read(int(np.prod(spec["shape"]) or 1) * np.dtype(spec["dtype"]).itemsize),
                dtype=spec["dtype"],
            ).reshape(spec["shape"])
            tensors[spec["name"]] = torch.from_numpy(arr.copy())
    config = PpoConfig(**header["config"])
    net = ActorCritic(**header["arch"])
    with torch.no_grad():
        for name, param in net.named_parameters():
            param.copy_(tensors[f"param:{name}"])
    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    named = list(net.named_parameters())
    for index, (name, param) in enumerate(named):
        key = f"opt:{index}:step"
        if key in tensors:
            optimizer.state[param] = {
                "step": tensors[key],
                "exp_avg": tensors[f"opt:{index}:exp_avg"],
                "exp_avg_sq": tensors[f"opt:{index}:exp_avg_sq"],
            }
    return net, optimizer, header["counters"], config


# ---------------------------------------------------------------------------
# Gradient verification


def gradient_check(seed: int = 0, num_transitions: int = 12,
                   step_size: float = 1e-5) -> float:
    """Compare analytic gradients of the full PPO loss against central
    finite differences on a tiny double-precision network, dropout off.

    Returns the maximum relative error over all parameters.
    """
    rng = np.random.default_rng(seed)
    vocab = dsl.Vocabulary(
        features=("open", "close"), constants=(0.5,), deltas=(10,),
        operators=("Abs", "Add", "Mean"),
    )
    net = ActorCritic(vocab.size, embed_dim=4, hidden_size=8, num_layers=2,
                      head_width=8, dropout=0.0).double()
    config = PpoConfig(dropout=0.0, seed=seed)

    buffer = RolloutBuffer()
    for _ in range(num_transitions):
        prefix = [dsl.BEG]
        depth = int(rng.integers(0, 4))
        for _ in range(depth):
            options = dsl.valid_next_tokens(prefix, vocab, max_len=8)
            options = [t for t in options if t.kind is not dsl.TokenKind.SEP]
            if not options:
                break
            prefix.append(options[int(rng.integers(len(options)))])
        mask = dsl.action_mask(prefix, vocab, max_len=8)
        action = int(rng.choice(np.nonzero(mask)[0]))
        buffer.add([vocab.id_of(t) for t in prefix], mask, action,
                   log_prob=float(np.log(rng.uniform(0.05, 0.9))),
                   value=float(rng.normal()), reward=float(rng.normal()),
                   terminal=bool(rng.random() < 0.3))
    buffer.terminals[-1] = True

    advantages, returns = compute_advantages(buffer, config)
    batch = _Batch(buffer, advantages, returns, torch.float64, net.pad_id)
    part = batch.slice(torch.arange(len(batch)))

    net.eval()
    loss, _ = ppo_loss(net, part, config)
    net.zero_grad()
    loss.backward()
    analytic = [p.grad.detach().clone() for p in net.parameters()]

    def loss_at() -> float:
        with torch.no_grad():
            value, _ = ppo_loss(net, part, config)
        return float(value)

    worst = 0.0
    with torch.no_grad():
        for param, grad in zip(net.parameters(), analytic):
            flat = param.reshape(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.numel()):
                keep = float(flat[i])
                flat[i] = keep + step_size
                up = loss_at()
                flat[i] = keep - step_size
                down = loss_at()
                flat[i] = keep
                fd = (up - down) / (2.0 * step_size)
                a = float(gflat[i])
                err = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
                if not np.isfinite(err):
                    return float("inf")  # max() would silently drop a NaN
                worst = max(worst, err)
    return worst
