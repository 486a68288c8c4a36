"""Label scored samples with their max-percentile utility token.

Each sample's rewards are normalized, scored by every utility, ranked against
the whole dataset per utility, and the prompt is suffixed with a token plus a
letter naming the utility where the sample ranks highest::

    ### Prompt: {x} <max_utility_idx> c
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from .ensemble import UtilityEnsemble
from .errors import ConfigError, DataError, ParseError, ShapeError
from .reward_stats import NormalizationParams, PercentileTable, RunningBounds, normalize

DEFAULT_TOKEN = "<max_utility_idx>"
PROMPT_PREFIX = "### Prompt: "
MAX_LETTER_INDEX = 25


@dataclass
class RawSample:
    prompt_id: str
    prompt: str
    response: str
    rewards: np.ndarray
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            "prompt_id": self.prompt_id,
            "prompt": self.prompt,
            "response": self.response,
            "rewards": [float(r) for r in self.rewards],
        }
        doc.update(self.extra)
        return doc


@dataclass
class LabeledSample:
    sample: RawSample
    normalized_rewards: np.ndarray
    utilities: np.ndarray
    percentiles: np.ndarray
    chosen_index: int
    augmented_prompt: str

    def to_dict(self) -> dict:
        doc = self.sample.to_dict()
        doc.update(
            normalized_rewards=self.normalized_rewards.tolist(),
            utilities=self.utilities.tolist(),
            percentiles=self.percentiles.tolist(),
            chosen_index=self.chosen_index,
            augmented_prompt=self.augmented_prompt,
        )
        return doc


def index_to_letter(i: int) -> str:
    if not 0 <= i <= MAX_LETTER_INDEX:
        raise ConfigError(f"utility index {i} cannot be encoded as a letter (0..25 supported)")
    return chr(ord("a") + i)


def letter_to_index(letter: str) -> int:
    if len(letter) != 1 or not "a" <= letter <= "z":
        raise ParseError(f"not an index letter: {letter!r}")
    return ord(letter) - ord("a")


def augment_prompt(x: str, i: int, token: str = DEFAULT_TOKEN) -> str:
    if not token:
        raise ConfigError("conditioning token must be non-empty")
    return f"{PROMPT_PREFIX}{x} {token} {index_to_letter(i)}"


def parse_augmented_prompt(text: str, token: str = DEFAULT_TOKEN) -> Tuple[str, int]:
    """Inverse of ``augment_prompt``: returns ``(prompt, index)``."""
    if not text.startswith(PROMPT_PREFIX):
        raise ParseError("missing prompt prefix")
    m = re.fullmatch(re.escape(PROMPT_PREFIX) + r"(.*) " + re.escape(token) + r" ([a-z])", text, flags=re.S)
    if m is None:
        raise ParseError(f"no {token!r} suffix found")
    return m.group(1), letter_to_index(m.group(2))


def label_dataset(
    samples: Sequence[RawSample],
    ensemble: UtilityEnsemble,
    bounds: Optional[RunningBounds] = None,
    token: str = DEFAULT_TOKEN,
) -> Tuple[List[LabeledSample], PercentileTable]:
    """Label every sample; the percentile reference set is the dataset itself.

    ``bounds`` defaults to the extrema of the dataset's own rewards.
    """
    if len(samples) == 0:
        raise DataError("cannot label an empty dataset")
    rewards = np.stack([np.asarray(s.rewards, dtype=float) for s in samples])
    if rewards.shape[1] != ensemble.k:
        raise ShapeError(f"rewards have K={rewards.shape[1]}, ensemble expects K={ensemble.k}")
    if bounds is None:
        bounds = RunningBounds.from_samples(rewards)
    params = NormalizationParams.from_bounds(bounds)
    z = normalize(params, rewards)
    scores = ensemble.scores(z)  # (M, N)
    table = PercentileTable(scores)
    pct = table.percentiles(scores)
    chosen = np.argmax(pct, axis=0)
    labeled = [
        LabeledSample(
            sample=s,
            normalized_rewards=z[n],
            utilities=scores[:, n],
            percentiles=pct[:, n],
            chosen_index=int(chosen[n]),
            augmented_prompt=augment_prompt(s.prompt, int(chosen[n]), token),
        )
        for n, s in enumerate(samples)
    ]
    return labeled, table


def label_histogram(labeled: Iterable[LabeledSample], m: int) -> List[int]:
    counts = [0] * m
    for item in labeled:
        counts[item.chosen_index] += 1
    return counts


_REQUIRED = {"prompt_id": str, "prompt": str, "response": str}


def parse_record(line: str, lineno: int, k: Optional[int] = None, source: str = "<input>") -> RawSample:
    where = f"{source}:{lineno}"
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", where) from exc
    if not isinstance(doc, dict):
        raise ParseError("record must be a JSON object", where)
    for key, typ in _REQUIRED.items():
        if not isinstance(doc.get(key), typ):
            raise ParseError(f"field {key!r} missing or not a {typ.__name__}", where)
    rewards = doc.get("rewards")
    if not isinstance(rewards, list) or not all(isinstance(r, (int, float)) and not isinstance(r, bool) for r in rewards):
        raise ParseError("field 'rewards' must be a list of numbers", where)
    if k is not None and len(rewards) != k:
        raise ShapeError(f"{where}: expected {k} rewards, got {len(rewards)}")
    arr = np.asarray(rewards, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{where}: non-finite reward")
    extra = {key: val for key, val in doc.items() if key not in _REQUIRED and key != "rewards"}
    return RawSample(doc["prompt_id"], doc["prompt"], doc["response"], arr, extra)


def read_jsonl(fh: TextIO, k: Optional[int] = None) -> List[RawSample]:
    source = getattr(fh, "name", "<input>")
    samples = []
    for lineno, line in enumerate(fh, start=1):
        if not line.strip():
            continue
        samples.append(parse_record(line, lineno, k, source))
    return samples


def write_jsonl(items: Iterable, fh: TextIO):
    for item in items:
        doc = item.to_dict() if hasattr(item, "to_dict") else item
        fh.write(json.dumps(doc) + "\n")
