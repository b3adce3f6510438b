"""Sequential expression-building environment.

States are token prefixes starting at BEG; actions append one token.
Dynamics are deterministic and intermediate rewards are zero. An episode
ends when SEP arrives (the finished formula is evaluated and offered to
the alpha pool, whose updated objective becomes the reward, with -1 for a
semantically invalid formula) or, defensively, when the token cap is hit
without SEP (reward -1; unreachable while actions respect the mask).

Episodes run strictly sequentially against one shared pool: the reward of
an episode depends on every expression committed before it, and that is
the only non-stationary part of the problem.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import dsl
from .errors import ContractViolation
from .evaluator import DEFAULT_MIN_VALID_FRACTION, evaluate, semantic_validity
from .metrics import normalize_matrix
from .panel import PanelData
from .pool import AlphaPool

log = logging.getLogger(__name__)

INVALID_REWARD = -1.0


@dataclass(frozen=True)
class MdpState:
    tokens: tuple[dsl.Token, ...]
    kinds: tuple = ()  # abstract stack of the body tokens

    @property
    def num_tokens(self) -> int:
        return len(self.tokens)


@dataclass
class StepOutcome:
    state: MdpState
    reward: float
    terminal: bool
    info: dict = field(default_factory=dict)


class MiningEnv:
    """Glues the token DSL, the evaluator, and one alpha pool together."""

    def __init__(self, pool: AlphaPool, panel: PanelData, day_range: tuple[int, int],
                 vocab: dsl.Vocabulary | None = None, max_tokens: int = dsl.MAX_TOKENS,
                 min_valid_fraction: float = DEFAULT_MIN_VALID_FRACTION):
        self.pool = pool
        self.panel = panel
        self.day_range = day_range
        self.vocab = vocab or dsl.DEFAULT_VOCAB
        self.max_tokens = max_tokens
        self.min_valid_fraction = min_valid_fraction
        self.steps_taken = 0
        self.episodes_done = 0
        self._mask_cache: dict[tuple, np.ndarray] = {}
        self._invalid_rpn: set[tuple] = set()

    def reset(self) -> MdpState:
        return MdpState(tokens=(dsl.BEG,), kinds=())

    def action_mask(self, state: MdpState) -> np.ndarray:
        """Boolean vector over vocabulary ids; at least one entry is True
        for every state reachable through masked actions."""
        key = (state.kinds, state.num_tokens)
        mask = self._mask_cache.get(key)
        if mask is None:
            mask = dsl.mask_from_stack(state.kinds, state.num_tokens, self.vocab, self.max_tokens)
            self._mask_cache[key] = mask
        return mask

    def step(self, state: MdpState, action_id: int) -> StepOutcome:
        mask = self.action_mask(state)
        if not 0 <= action_id < self.vocab.size or not mask[action_id]:
            raise ContractViolation(
                f"action {action_id} is masked at state {[t.text for t in state.tokens]}"
            )
        self.steps_taken += 1
        token = self.vocab.token_of(action_id)
        tokens = state.tokens + (token,)

        if token.kind is dsl.TokenKind.SEP:
            outcome = self._finish(tokens)
            self.episodes_done += 1
            return outcome

        kinds = dsl.apply_to_kinds(state.kinds, token)
        next_state = MdpState(tokens=tokens, kinds=kinds)
        if len(tokens) >= self.max_tokens:
            # Cannot happen for masked actions; kept for callers that break
            # the precondition in ways the mask check cannot see.
            self.episodes_done += 1
            return StepOutcome(next_state, INVALID_REWARD, True, {"outcome": "overflow"})
        return StepOutcome(next_state, 0.0, False, {})

    def _finish(self, tokens: tuple) -> StepOutcome:
        expr = dsl.parse_rpn(tokens, self.max_tokens)
        state = MdpState(tokens=tokens, kinds=("E",))
        info = {"expression": expr.to_infix()}

        if self.pool.contains(expr.rpn):
            info["outcome"] = "duplicate"
            reward = self.pool.objective
        elif expr.rpn in self._invalid_rpn:
            info["outcome"] = "invalid"
            reward = INVALID_REWARD
        else:
            matrix = evaluate(expr, self.panel, self.day_range)
            report = semantic_validity(matrix, self.min_valid_fraction)
            if not report.valid:
                self._invalid_rpn.add(expr.rpn)
                info["outcome"] = "invalid"
                info["valid_fraction"] = report.valid_fraction
                reward = INVALID_REWARD
            else:
                added = self.pool.add_alpha(expr, normalize_matrix(matrix.values))
                info["outcome"] = "added" if added else "duplicate"
                reward = self.pool.objective

        info["pool_objective"] = self.pool.objective
        info["pool_size"] = self.pool.size
        return StepOutcome(state, reward, True, info)

    def episode_rollout(self, policy, rng: np.random.Generator):
        """Play one episode with `policy(state, mask, rng) -> action id`.

        Returns (transitions, reward, info) where transitions is a list of
        (state, action_id, mask) triples in order. Useful for tests and for
        uniform random-search baselines; the learned agent keeps its own
        collection loop because it also needs values and log-probs.
        """
        state = self.reset()
        transitions = []
        while True:
            mask = self.action_mask(state)
            action = int(policy(state, mask, rng))
            outcome = self.step(state, action)
            transitions.append((state, action, mask))
            if outcome.terminal:
                return transitions, outcome.reward, outcome.info
            state = outcome.state


def uniform_policy(state: MdpState, mask: np.ndarray, rng: np.random.Generator) -> int:
    """Uniform choice over unmasked actions; the random-search baseline."""
    choices = np.nonzero(mask)[0]
    return int(rng.choice(choices))
