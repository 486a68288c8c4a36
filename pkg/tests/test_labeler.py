import io
import json

import numpy as np
import pytest

from ucmoa.errors import ConfigError, DataError, ParseError, ShapeError
from ucmoa.labeler import (
    DEFAULT_TOKEN,
    RawSample,
    augment_prompt,
    index_to_letter,
    label_dataset,
    label_histogram,
    letter_to_index,
    parse_augmented_prompt,
    parse_record,
    read_jsonl,
    write_jsonl,
)
from ucmoa.reward_stats import NormalizationParams, RunningBounds, normalize


def make_samples(rng, n=60, k=2):
    z = rng.normal(size=(n, k))
    return [RawSample(f"id{i}", f"question {i}", f"answer {i}", z[i]) for i in range(n)]


class TestPromptFormat:
    def test_letters(self):
        assert index_to_letter(0) == "a"
        assert index_to_letter(2) == "c"
        assert index_to_letter(8) == "i"
        assert letter_to_index("c") == 2
        with pytest.raises(ConfigError):
            index_to_letter(26)
        with pytest.raises(ParseError):
            letter_to_index("A")

    def test_augment(self):
        assert augment_prompt("What is 2+2?", 2) == "### Prompt: What is 2+2? <max_utility_idx> c"

    def test_round_trip(self):
        for i in range(26):
            text = augment_prompt("multi\nline <b> prompt", i, "<tok>")
            assert parse_augmented_prompt(text, "<tok>") == ("multi\nline <b> prompt", i)

    def test_parse_errors(self):
        with pytest.raises(ParseError):
            parse_augmented_prompt("no prefix <max_utility_idx> a")
        with pytest.raises(ParseError):
            parse_augmented_prompt("### Prompt: x")

    def test_empty_token(self):
        with pytest.raises(ConfigError):
            augment_prompt("x", 0, "")


class TestLabelDataset:
    def test_choice_is_brute_force_argmax_percentile(self, rng, small_ensemble):
        samples = make_samples(rng)
        labeled, _ = label_dataset(samples, small_ensemble)
        z_all = np.stack([s.rewards for s in samples])
        params = NormalizationParams.from_bounds(RunningBounds.from_samples(z_all))
        scores = small_ensemble.scores(normalize(params, z_all))
        for n, item in enumerate(labeled):
            pct = [np.mean(scores[i] <= scores[i, n]) for i in range(len(small_ensemble))]
            best = max(range(len(pct)), key=lambda i: (pct[i], -i))
            assert item.chosen_index == best
            np.testing.assert_allclose(item.percentiles, pct)
            assert item.augmented_prompt.endswith(f"{DEFAULT_TOKEN} {index_to_letter(best)}")

    def test_input_order_and_histogram(self, rng, small_ensemble):
        samples = make_samples(rng, n=25)
        labeled, table = label_dataset(samples, small_ensemble)
        assert [item.sample.prompt_id for item in labeled] == [s.prompt_id for s in samples]
        assert sum(label_histogram(labeled, len(small_ensemble))) == 25
        assert table.n_samples == 25

    def test_deterministic(self, rng, small_ensemble):
        samples = make_samples(rng)
        a, _ = label_dataset(samples, small_ensemble)
        b, _ = label_dataset(samples, small_ensemble)
        assert [x.to_dict() for x in a] == [x.to_dict() for x in b]

    def test_wrong_k(self, rng, small_ensemble):
        with pytest.raises(ShapeError):
            label_dataset(make_samples(rng, k=3), small_ensemble)

    def test_empty(self, small_ensemble):
        with pytest.raises(DataError):
            label_dataset([], small_ensemble)


class TestJsonl:
    def test_parse_record_fields(self):
        s = parse_record(json.dumps({"prompt_id": "a", "prompt": "p", "response": "r", "rewards": [1, 2.5], "style": 3}), 1)
        np.testing.assert_array_equal(s.rewards, [1.0, 2.5])
        assert s.extra == {"style": 3}

    def test_line_numbers_in_errors(self):
        good = json.dumps({"prompt_id": "a", "prompt": "p", "response": "r", "rewards": [1, 2]})
        short = json.dumps({"prompt_id": "b", "prompt": "p", "response": "r", "rewards": [1]})
        fh = io.StringIO(good + "\n\n" + short + "\n")
        with pytest.raises(ShapeError, match=":3:"):
            read_jsonl(fh, k=2)
        with pytest.raises(ParseError, match=":4"):
            read_jsonl(io.StringIO(good + "\n" * 3 + "{oops\n"), k=2)

    def test_field_validation(self):
        with pytest.raises(ParseError, match="prompt_id"):
            parse_record(json.dumps({"prompt": "p", "response": "r", "rewards": [1]}), 1)
        with pytest.raises(ParseError, match="rewards"):
            parse_record(json.dumps({"prompt_id": "a", "prompt": "p", "response": "r", "rewards": ["x"]}), 1)
        with pytest.raises(ParseError):
            parse_record("[1, 2]", 1)

    def test_write_read_round_trip(self, rng, small_ensemble):
        samples = make_samples(rng, n=5)
        labeled, _ = label_dataset(samples, small_ensemble)
        buf = io.StringIO()
        write_jsonl(labeled, buf)
        back = read_jsonl(io.StringIO(buf.getvalue()), k=2)
        assert [b.prompt_id for b in back] == [s.prompt_id for s in samples]
        assert back[0].extra["chosen_index"] == labeled[0].chosen_index
