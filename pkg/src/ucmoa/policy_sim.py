"""Synthetic stand-in for a conditioned language model.

A "response" is one categorical choice of *style*; each style emits a noisy
multi-objective reward.  The policy keeps one row of style logits per
conditioning token plus a final unconditioned row (the base policy that
generated the offline data).  Training is full-batch cross-entropy on
(token, style) pairs; the online stage generates with the current policy,
relabels by percentile, rejects weak samples and retrains on the buffer.
"""

from __future__ import annotations

import json
import logging
from importlib import resources
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .ensemble import UtilityEnsemble
from .errors import ConfigError, DataError, NumericError, ParseError, ShapeError
from .inference import RewardBounds, preference_to_reward, select_inference_index
from .metrics import hypervolume_2d, pareto_front
from .labeler import DEFAULT_TOKEN, LabeledSample, RawSample, label_dataset
from .reward_stats import NormalizationParams, PercentileTable, RunningBounds, normalize, update_bounds

log = logging.getLogger(__name__)


@dataclass
class Style:
    mean: np.ndarray
    stdev: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.stdev = np.asarray(self.stdev, dtype=float)
        if self.mean.shape != self.stdev.shape:
            raise ShapeError("style mean and stdev differ in length")
        if np.any(self.stdev < 0):
            raise DataError("style stdev must be non-negative")


@dataclass
class SynthEnv:
    k: int
    styles: List[Style]

    def __post_init__(self):
        if len(self.styles) < 2:
            raise ConfigError("environment needs at least two styles")
        for idx, s in enumerate(self.styles):
            if s.mean.shape != (self.k,):
                raise ShapeError(f"style {idx}: expected {self.k} reward dimensions")
        means = self.means
        if np.all(means == means[0]):
            raise ConfigError("all styles share one mean; the environment has no trade-offs")
        self._stdevs = np.stack([s.stdev for s in self.styles])

    @property
    def n_styles(self) -> int:
        return len(self.styles)

    @property
    def means(self) -> np.ndarray:
        return np.stack([s.mean for s in self.styles])

    def to_dict(self) -> dict:
        return {"k": self.k, "styles": [{"mean": s.mean.tolist(), "stdev": s.stdev.tolist()} for s in self.styles]}

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthEnv":
        try:
            return cls(int(doc["k"]), [Style(s["mean"], s["stdev"]) for s in doc["styles"]])
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed environment file: {exc}") from exc

    @classmethod
    def load(cls, path) -> "SynthEnv":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from exc
        return cls.from_dict(doc)


def sample_response(env: SynthEnv, style_id: int, rng: np.random.Generator) -> np.ndarray:
    """One reward vector: ``mean + stdev * N(0, I)``."""
    if not 0 <= style_id < env.n_styles:
        raise ConfigError(f"invalid style {style_id} (environment has {env.n_styles})")
    style = env.styles[style_id]
    return style.mean + style.stdev * rng.standard_normal(env.k)


def sample_responses(env: SynthEnv, style_ids, rng: np.random.Generator) -> np.ndarray:
    ids = np.asarray(style_ids, dtype=int)
    if np.any(ids < 0) or np.any(ids >= env.n_styles):
        raise ConfigError("invalid style id in batch")
    noise = rng.standard_normal((len(ids), env.k))
    return env.means[ids] + env._stdevs[ids] * noise


BUILTIN_ENVS = ("tradeoff", "separable")


def builtin_env(name: str) -> SynthEnv:
    """Load one of the environment definitions shipped with the package."""
    if name not in BUILTIN_ENVS:
        raise ConfigError(f"unknown builtin environment {name!r} (choose from {', '.join(BUILTIN_ENVS)})")
    text = resources.files("ucmoa").joinpath("envs").joinpath(f"{name}.json").read_text()
    return SynthEnv.from_dict(json.loads(text))


def tradeoff_env() -> SynthEnv:
    """2-objective environment with a curved front plus three dominated styles."""
    return builtin_env("tradeoff")


def separable_env() -> SynthEnv:
    """Low-noise 2-objective environment: nine styles spread along a quarter circle."""
    return builtin_env("separable")


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ConditionedPolicy:
    """Style logits: rows ``0..M-1`` per token, row ``M`` unconditioned."""

    logits: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        if self.logits.ndim != 2 or self.logits.shape[0] < 2:
            raise ShapeError("logits must be an (M + 1, S) matrix")
        if not np.all(np.isfinite(self.logits)):
            raise NumericError("policy logits must be finite")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")

    @classmethod
    def uniform(cls, m: int, n_styles: int, base_logits=None) -> "ConditionedPolicy":
        logits = np.zeros((m + 1, n_styles))
        if base_logits is not None:
            logits[m] = base_logits
        return cls(logits)

    @property
    def m(self) -> int:
        return self.logits.shape[0] - 1

    @property
    def base_row(self) -> int:
        return self.m

    def probs(self, row: Optional[int] = None) -> np.ndarray:
        p = _softmax(self.logits / self.temperature)
        return p if row is None else p[row]

    def sample_styles(self, rows, rng: np.random.Generator) -> np.ndarray:
        rows = np.asarray(rows, dtype=int)
        cdf = np.cumsum(self.probs(), axis=1)[rows]
        u = rng.uniform(size=len(rows))[:, None]
        return np.minimum((u >= cdf).sum(axis=1), self.logits.shape[1] - 1)

    def copy(self) -> "ConditionedPolicy":
        return ConditionedPolicy(self.logits.copy(), self.temperature)

    def to_dict(self) -> dict:
        return {"logits": self.logits.tolist(), "temperature": self.temperature}

    @classmethod
    def from_dict(cls, doc: dict) -> "ConditionedPolicy":
        return cls(doc["logits"], doc.get("temperature", 1.0))


def cross_entropy(policy: ConditionedPolicy, tokens, styles) -> float:
    logp = np.log(policy.probs())
    return float(-logp[np.asarray(tokens), np.asarray(styles)].mean())


def _pairs(labeled) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(labeled, tuple) and len(labeled) == 2:
        return np.asarray(labeled[0], dtype=int), np.asarray(labeled[1], dtype=int)
    tokens = [item.chosen_index for item in labeled]
    styles = [item.sample.extra["style"] for item in labeled]
    return np.asarray(tokens, dtype=int), np.asarray(styles, dtype=int)


def offline_train(
    policy: ConditionedPolicy, labeled, epochs: int, lr: float = 0.5, history: Optional[list] = None
) -> ConditionedPolicy:
    """Full-batch gradient descent on mean cross-entropy of style given token.

    ``labeled`` is a sequence of ``LabeledSample`` whose ``sample.extra``
    carries ``"style"``, or a ``(tokens, styles)`` pair of arrays.  If
    ``history`` is a list, the loss before every step (and after the last)
    is appended to it.
    """
    tokens, styles = _pairs(labeled)
    if len(tokens) == 0:
        raise DataError("cannot train on an empty dataset")
    if np.any(tokens < 0) or np.any(tokens > policy.m):
        raise DataError("token index outside the policy's rows")
    out = policy.copy()
    n_rows, n_styles = out.logits.shape
    counts = np.zeros((n_rows, n_styles))
    np.add.at(counts, (tokens, styles), 1.0)
    counts /= len(tokens)
    row_mass = counts.sum(axis=1, keepdims=True)
    for _ in range(epochs):
        p = out.probs()
        if history is not None:
            history.append(float(-(counts * np.log(p)).sum()))
        # d/dlogits of mean CE, including the temperature
        grad = (row_mass * p - counts) / out.temperature
        out.logits -= lr * grad
        if not np.all(np.isfinite(out.logits)):
            raise NumericError("non-finite logits during offline training")
    if history is not None:
        history.append(float(-(counts * np.log(out.probs())).sum()))
    return out


@dataclass
class OnlineBuffer:
    """FIFO store of admitted samples: rewards, producing style and label."""

    capacity: int = 10_000
    rewards: deque = field(default_factory=deque)
    styles: deque = field(default_factory=deque)
    tokens: deque = field(default_factory=deque)
    percentiles: deque = field(default_factory=deque)

    def __len__(self) -> int:
        return len(self.tokens)

    def extend(self, rewards, styles, tokens, percentiles=None):
        if percentiles is None:
            percentiles = [np.nan] * len(tokens)
        for row in zip(rewards, styles, tokens, percentiles):
            self.rewards.append(np.asarray(row[0], dtype=float))
            self.styles.append(int(row[1]))
            self.tokens.append(int(row[2]))
            self.percentiles.append(float(row[3]))
        while len(self.tokens) > self.capacity:
            for q in (self.rewards, self.styles, self.tokens, self.percentiles):
                q.popleft()

    def reward_matrix(self, k: int) -> np.ndarray:
        return np.stack(list(self.rewards)) if self.rewards else np.zeros((0, k))

    def training_pairs(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.tokens, dtype=int), np.asarray(self.styles, dtype=int)

    def copy(self) -> "OnlineBuffer":
        return OnlineBuffer(self.capacity, deque(self.rewards), deque(self.styles), deque(self.tokens), deque(self.percentiles))


@dataclass
class SimConfig:
    n_offline: int = 2000
    offline_epochs: int = 300
    lr: float = 0.5
    n_generate: int = 2000
    tau: float = 0.7
    online_iters: int = 2
    online_epochs: int = 300
    buffer_capacity: int = 10_000
    n_eval: int = 1000
    n_preferences: int = 10
    token: str = DEFAULT_TOKEN

    def validate(self) -> "SimConfig":
        if self.n_offline < 1 or self.n_generate < 1 or self.n_eval < 1:
            raise ConfigError("sample counts must be positive")
        if self.online_iters < 0 or self.offline_epochs < 0 or self.online_epochs < 0:
            raise ConfigError("iteration and epoch counts must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.buffer_capacity < 1:
            raise ConfigError("buffer_capacity must be >= 1")
        return self


def score_rewards(ensemble: UtilityEnsemble, bounds: RunningBounds, rewards) -> np.ndarray:
    """Strict utility values ``(M, n)`` of raw rewards under ``bounds``' normalization."""
    z = normalize(NormalizationParams.from_bounds(bounds), np.asarray(rewards, dtype=float))
    return np.atleast_2d(ensemble.scores(z)).reshape(len(ensemble), -1)


def mean_utility_per_token(policy, env, ensemble, bounds, n: int, rng) -> np.ndarray:
    """``E[g_t(z) | token t]`` under the current policy, for every token ``t``."""
    m = len(ensemble)
    rows = np.repeat(np.arange(m), n)
    styles = policy.sample_styles(rows, rng)
    scores = score_rewards(ensemble, bounds, sample_responses(env, styles, rng))
    return np.array([scores[t, rows == t].mean() for t in range(m)])


def online_iteration(
    policy: ConditionedPolicy,
    env: SynthEnv,
    ensemble: UtilityEnsemble,
    bounds: RunningBounds,
    buffer: OnlineBuffer,
    config: SimConfig,
    rng: np.random.Generator,
) -> Tuple[ConditionedPolicy, OnlineBuffer, dict]:
    """Generate, relabel, reject and retrain once.

    Returns the new policy, the new buffer and a stats dict holding
    ``accept_rate``, ``n_accepted``, ``bounds`` (extrema merged with the new
    batch) and ``mean_utility_token`` (per-token mean utility of the batch).
    """
    m = len(ensemble)
    tokens = rng.integers(0, m, size=config.n_generate)
    styles = policy.sample_styles(tokens, rng)
    rewards = sample_responses(env, styles, rng)

    for idx, z in enumerate(rewards):
        bounds = update_bounds(bounds, z, label=f"online[{idx}]")

    reference = np.concatenate([buffer.reward_matrix(env.k), rewards])
    table = PercentileTable(score_rewards(ensemble, bounds, reference))
    batch_scores = score_rewards(ensemble, bounds, rewards)
    pct = table.percentiles(batch_scores)  # (M, n)
    chosen = np.argmax(pct, axis=0)
    chosen_pct = pct[chosen, np.arange(len(chosen))]
    keep = chosen_pct >= config.tau

    per_token = np.array([batch_scores[t, tokens == t].mean() if np.any(tokens == t) else np.nan for t in range(m)])
    stats = {
        "accept_rate": float(keep.mean()),
        "n_accepted": int(keep.sum()),
        "bounds": bounds,
        "mean_utility_token": per_token,
    }
    if not keep.any():
        log.warning("online iteration admitted no samples (tau=%s); policy unchanged", config.tau)
        return policy.copy(), buffer.copy(), stats

    new_buffer = buffer.copy()
    new_buffer.extend(rewards[keep], styles[keep], chosen[keep], chosen_pct[keep])
    new_policy = offline_train(policy, new_buffer.training_pairs(), config.online_epochs, config.lr)
    return new_policy, new_buffer, stats


def generate_offline_dataset(env: SynthEnv, n: int, rng: np.random.Generator, base_probs=None) -> List[RawSample]:
    """Responses of the base policy (uniform over styles unless ``base_probs``)."""
    p = np.full(env.n_styles, 1.0 / env.n_styles) if base_probs is None else np.asarray(base_probs, dtype=float)
    styles = rng.choice(env.n_styles, size=n, p=p)
    rewards = sample_responses(env, styles, rng)
    return [
        RawSample(f"p{idx:05d}", f"prompt {idx}", f"style-{int(s)}", rewards[idx], {"style": int(s)})
        for idx, s in enumerate(styles)
    ]


def evaluate_consistency(
    policy: ConditionedPolicy,
    env: SynthEnv,
    ensemble: UtilityEnsemble,
    bounds: RunningBounds,
    token_index: int,
    n: int,
    rng: np.random.Generator,
    normalization: str = "percentile",
) -> np.ndarray:
    """Mean per-utility normalized score of ``n`` responses under one token.

    ``normalization="percentile"`` ranks each utility's score against ``n``
    responses of the unconditioned base row; ``"minmax"`` rescales each utility
    to [0, 1] over the evaluation set itself.
    """
    if n < 1:
        raise DataError("need at least one evaluation response")
    if normalization not in ("percentile", "minmax"):
        raise ConfigError(f"unknown normalization {normalization!r}")
    if not 0 <= token_index < policy.m:
        raise ConfigError(f"token index {token_index} outside 0..{policy.m - 1}")
    styles = policy.sample_styles(np.full(n, token_index), rng)
    scores = score_rewards(ensemble, bounds, sample_responses(env, styles, rng))
    if normalization == "percentile":
        ref_styles = policy.sample_styles(np.full(n, policy.base_row), rng)
        reference = score_rewards(ensemble, bounds, sample_responses(env, ref_styles, rng))
        return PercentileTable(reference).percentiles(scores).mean(axis=1)
    lo = scores.min(axis=1, keepdims=True)
    span = scores.max(axis=1, keepdims=True) - lo
    normed = np.divide(scores - lo, span, out=np.zeros_like(scores), where=span > 0)
    return normed.mean(axis=1)


def preference_grid(n: int, k: int = 2) -> np.ndarray:
    """``n`` preferences ``(a, 1 - a)`` evenly spaced (K = 2 only)."""
    if k != 2:
        raise ConfigError("the built-in preference grid is two-dimensional")
    a = np.linspace(0.0, 1.0, n)
    return np.stack([a, 1.0 - a], axis=1)


def sweep_pareto(
    policy: ConditionedPolicy,
    env: SynthEnv,
    ensemble: UtilityEnsemble,
    bounds: RunningBounds,
    preferences,
    n: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Mean raw reward per preference; also returns the chosen token per preference."""
    params = NormalizationParams.from_bounds(bounds)
    rbounds = RewardBounds.from_running(bounds)
    points, chosen = [], []
    for w in np.atleast_2d(np.asarray(preferences, dtype=float)):
        idx = select_inference_index(preference_to_reward(w, rbounds), ensemble, params)
        styles = policy.sample_styles(np.full(n, idx), rng)
        points.append(sample_responses(env, styles, rng).mean(axis=0))
        chosen.append(idx)
    return np.array(points), np.array(chosen)


def _check_styles(raw: List[RawSample], env: SynthEnv) -> None:
    if not raw:
        raise DataError("offline dataset is empty")
    for s in raw:
        style = s.extra.get("style")
        if not isinstance(style, int) or isinstance(style, bool) or not 0 <= style < env.n_styles:
            raise DataError(f"record {s.prompt_id!r}: 'style' must be an integer in 0..{env.n_styles - 1}")
        if len(s.rewards) != env.k:
            raise ShapeError(f"record {s.prompt_id!r}: expected {env.k} rewards, got {len(s.rewards)}")


def arm_hypervolumes(
    policies: List[ConditionedPolicy],
    bounds: List[RunningBounds],
    env: SynthEnv,
    ensemble: UtilityEnsemble,
    preferences,
    n: int,
    seed: int,
) -> Tuple[List[float], List[Tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Sweep every training arm over ``preferences`` and score each front.

    All arms share one random stream per sweep (common random numbers) and one
    reference point: the first arm's lower bounds, lowered further if a swept
    point falls below them.  Returns ``(hypervolumes, sweeps, reference)``.
    """
    sweeps = [
        sweep_pareto(p, env, ensemble, b, preferences, n, np.random.default_rng([seed, 3]))
        for p, b in zip(policies, bounds)
    ]
    ref = bounds[0].z_min.copy()
    for pts, _ in sweeps:
        ref = np.minimum(ref, pts.min(axis=0))
    hvs = [hypervolume_2d(pareto_front(pts), ref) for pts, _ in sweeps]
    return hvs, sweeps, ref


def top_tokens(histogram, count: int) -> List[int]:
    """The ``count`` most frequent labels (ties to the lower index), skipping unused ones."""
    hist = np.asarray(histogram)
    order = np.argsort(-hist, kind="stable")
    return [int(t) for t in order[:count] if hist[t] > 0]


def consistency_table(
    policy: ConditionedPolicy,
    env: SynthEnv,
    ensemble: UtilityEnsemble,
    bounds: RunningBounds,
    tokens,
    n: int,
    seed: int,
    normalization: str = "percentile",
) -> np.ndarray:
    """``evaluate_consistency`` for each token, one seeded stream per token; shape ``(len(tokens), M)``."""
    return np.stack([
        evaluate_consistency(policy, env, ensemble, bounds, int(t), n, np.random.default_rng([seed, 6, int(t)]), normalization)
        for t in tokens
    ])


@dataclass
class PipelineResult:
    policies: List[ConditionedPolicy]  # offline, then one per online iteration
    bounds: List[RunningBounds]
    stats: List[dict]
    offline_labeled: List[LabeledSample]
    buffer: OnlineBuffer


def run_pipeline(
    env: SynthEnv,
    ensemble: UtilityEnsemble,
    config: SimConfig,
    seed: int,
    base_probs=None,
    offline: Optional[List[RawSample]] = None,
) -> PipelineResult:
    """Offline labeling and training followed by ``config.online_iters`` online rounds.

    ``offline`` replaces the generated offline dataset; each record must carry
    the ``style`` that produced it in ``extra``.
    """
    config.validate()
    rng = np.random.default_rng([seed, 1])
    eval_rng = np.random.default_rng([seed, 2])
    if offline is None:
        raw = generate_offline_dataset(env, config.n_offline, rng, base_probs)
    else:
        raw = list(offline)
        _check_styles(raw, env)
    bounds = RunningBounds.from_samples(np.stack([s.rewards for s in raw]))
    labeled, _ = label_dataset(raw, ensemble, bounds, config.token)

    policy = ConditionedPolicy.uniform(len(ensemble), env.n_styles)
    tokens, styles = _pairs(labeled)
    # the unconditioned row learns the base distribution from the same data
    all_tokens = np.concatenate([tokens, np.full(len(styles), len(ensemble))])
    all_styles = np.concatenate([styles, styles])
    policy = offline_train(policy, (all_tokens, all_styles), config.offline_epochs, config.lr)

    buffer = OnlineBuffer(config.buffer_capacity)
    buffer.extend(np.stack([s.rewards for s in raw]), styles, tokens, [item.percentiles[item.chosen_index] for item in labeled])

    policies, bound_hist, stats = [policy], [bounds], []
    stats.append({
        "iter": 0,
        "accept_rate": 1.0,
        "mean_utility_token": mean_utility_per_token(policy, env, ensemble, bounds, config.n_eval, eval_rng),
    })
    for it in range(1, config.online_iters + 1):
        policy, buffer, st = online_iteration(policy, env, ensemble, bounds, buffer, config, rng)
        bounds = st["bounds"]
        policies.append(policy)
        bound_hist.append(bounds)
        stats.append({
            "iter": it,
            "accept_rate": st["accept_rate"],
            "mean_utility_token": mean_utility_per_token(policy, env, ensemble, bounds, config.n_eval, eval_rng),
        })
    return PipelineResult(policies, bound_hist, stats, labeled, buffer)
