"""Synthetic prompt -> target tasks standing in for real instruction corpora.

Each task has a fixed prompt length and a generation region of ``gen_len``
positions. Targets are the answer followed by one eot and eot padding.
"""

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from ._validation import ValidationError, check_positive_int, check_random_state
from .trace import FilterConfig, Vocab, extract_answer

# 32-token vocabulary: values 0..28, then separator, eot, mask.
VOCAB32 = Vocab(size=32, mask_id=31, eot_id=30)
SEP32 = 29
# 16-token bracket vocabulary.
VOCAB16 = Vocab(size=16, mask_id=15, eot_id=14)
SEP16 = 13
OPENERS = {0: 1, 2: 3, 4: 5}  # opener -> matching closer
CLOSERS = {v: k for k, v in OPENERS.items()}


class TaskKind(str, Enum):
    COPY_SORT = "copysort"
    MODULAR_CHAIN = "modchain"
    BRACKETS = "brackets"


@dataclass(frozen=True)
class SyntheticTask:
    """A deterministic task. Parameters not used by ``kind`` are ignored.

    copysort: ``payload_len`` values drawn from 0..28, target is the sorted payload.
    modchain: prompt ``[a0, c, d, n, SEP]``; target ``a_1..a_n`` with
        ``a_{i+1} = (c*a_i + d) mod modulus``.
    brackets: prompt is an unclosed bracket prefix of ``prefix_len`` tokens;
        target is its unique minimal closing completion.
    """

    kind: TaskKind
    gen_len: int
    payload_len: int = 8
    modulus: int = 10
    multipliers: tuple = (1, 2, 3)
    chain_len: tuple = (6, 15)
    prefix_len: int = 8
    name: str = field(default="")

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        check_positive_int(self.gen_len, "gen_len")
        if not self.name:
            object.__setattr__(self, "name", self.kind.value)
        if self.kind is TaskKind.COPY_SORT and self.gen_len < self.payload_len + 1:
            raise ValidationError("copysort needs gen_len >= payload_len + 1")
        if self.kind is TaskKind.MODULAR_CHAIN:
            lo, hi = self.chain_len
            if not 1 <= lo <= hi or hi > min(self.gen_len - 1, SEP32 - 1):
                raise ValidationError(f"chain_len {self.chain_len} incompatible with gen_len {self.gen_len}")
            if not 2 <= self.modulus <= SEP32:
                raise ValidationError("modulus must be in [2, 29]")
        if self.kind is TaskKind.BRACKETS and self.gen_len < self.prefix_len + 1:
            raise ValidationError("brackets needs gen_len >= prefix_len + 1")

    @property
    def vocab(self):
        return VOCAB16 if self.kind is TaskKind.BRACKETS else VOCAB32

    @property
    def prompt_len(self):
        if self.kind is TaskKind.COPY_SORT:
            return self.payload_len + 1
        if self.kind is TaskKind.MODULAR_CHAIN:
            return 5
        return self.prefix_len + 1

    def with_gen_len(self, gen_len):
        return replace(self, gen_len=gen_len)

    # -- prompts and answers ------------------------------------------------

    def sample_prompt(self, rng):
        rng = check_random_state(rng)
        if self.kind is TaskKind.COPY_SORT:
            payload = rng.integers(0, SEP32, size=self.payload_len)
            return np.concatenate([payload, [SEP32]]).astype(np.int64)
        if self.kind is TaskKind.MODULAR_CHAIN:
            a0 = rng.integers(0, self.modulus)
            c = rng.choice(np.asarray(self.multipliers))
            d = rng.integers(0, self.modulus)
            n = rng.integers(self.chain_len[0], self.chain_len[1] + 1)
            return np.array([a0, c, d, n, SEP32], dtype=np.int64)
        return np.concatenate([_random_bracket_prefix(rng, self.prefix_len), [SEP16]]).astype(np.int64)

    def answer_tokens(self, prompt):
        """The answer without eot/padding."""
        prompt = np.asarray(prompt, dtype=np.int64)
        if prompt.size != self.prompt_len:
            raise ValidationError(f"{self.name}: prompt length {prompt.size} != {self.prompt_len}")
        if self.kind is TaskKind.COPY_SORT:
            return np.sort(prompt[:-1])
        if self.kind is TaskKind.MODULAR_CHAIN:
            a, c, d, n = (int(x) for x in prompt[:4])
            out = []
            for _ in range(n):
                a = (c * a + d) % self.modulus
                out.append(a)
            return np.array(out, dtype=np.int64)
        stack = []
        for tok in prompt[:-1]:
            tok = int(tok)
            if tok in OPENERS:
                stack.append(tok)
            elif stack and OPENERS[stack[-1]] == tok:
                stack.pop()
            else:
                raise ValidationError("bracket prompt is not a valid prefix")
        return np.array([OPENERS[t] for t in reversed(stack)], dtype=np.int64)

    def answer(self, prompt):
        """Full target of length ``gen_len``: answer, eot, eot padding."""
        ans = self.answer_tokens(prompt)
        if ans.size >= self.gen_len:
            raise ValidationError(f"answer of length {ans.size} does not fit gen_len {self.gen_len}")
        pad = np.full(self.gen_len - ans.size, self.vocab.eot_id, dtype=np.int64)
        return np.concatenate([ans, pad])

    # -- scoring --------------------------------------------------------------

    def reward(self, prompt, gen_tokens):
        """Exact-match fraction over the answer and its terminating eot."""
        target = self.answer(prompt)
        span = self.answer_tokens(prompt).size + 1
        gen = np.asarray(gen_tokens)[:span]
        return float(np.mean(gen == target[:span]))

    def is_correct(self, prompt, gen_tokens):
        ans = extract_answer(np.asarray(gen_tokens), self.vocab.eot_id)
        return np.array_equal(ans, self.answer_tokens(prompt)) and len(ans) < len(gen_tokens)

    def verdict(self, prompt, answer):
        """Compile/run analog for brackets: unbalanced is a syntax error,
        balanced but different from the target is a runtime error."""
        if self.kind is not TaskKind.BRACKETS:
            return "ok"
        stack = []
        for tok in list(np.asarray(prompt)[:-1]) + list(np.asarray(answer)):
            tok = int(tok)
            if tok in OPENERS:
                stack.append(tok)
            elif tok in CLOSERS and stack and OPENERS[stack[-1]] == tok:
                stack.pop()
            else:
                return "syntax_error"
        if stack:
            return "syntax_error"
        if not np.array_equal(np.asarray(answer), self.answer_tokens(prompt)):
            return "runtime_error"
        return "ok"

    def filter_config(self):
        if self.kind is TaskKind.BRACKETS:
            return FilterConfig(min_len=1, verdict_fn=self.verdict)
        return FilterConfig()


def _random_bracket_prefix(rng, length):
    while True:
        stack, out = [], []
        for _ in range(length):
            if stack and rng.random() < 0.4:
                out.append(OPENERS[stack.pop()])
            else:
                tok = int(rng.choice([0, 2, 4]))
                stack.append(tok)
                out.append(tok)
        if stack:
            return np.array(out, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class Corpus:
    task: SyntheticTask
    prompts: np.ndarray  # (count, prompt_len)
    targets: np.ndarray  # (count, gen_len)

    def __len__(self):
        return len(self.prompts)

    def digest(self):
        h = hashlib.sha256()
        h.update(self.task.name.encode())
        h.update(self.prompts.astype("<i8").tobytes())
        h.update(self.targets.astype("<i8").tobytes())
        return h.hexdigest()

    def split(self, holdout_fraction, seed=0):
        rng = np.random.default_rng(seed)
        idx = rng.permutation(len(self))
        n_hold = max(1, int(round(holdout_fraction * len(self))))
        hold, train = np.sort(idx[:n_hold]), np.sort(idx[n_hold:])
        return (
            Corpus(self.task, self.prompts[train], self.targets[train]),
            Corpus(self.task, self.prompts[hold], self.targets[hold]),
        )


def synth_corpus(task, count, seed):
    count = check_positive_int(count, "count")
    rng = np.random.default_rng(seed)
    prompts = np.stack([task.sample_prompt(rng) for _ in range(count)])
    targets = np.stack([task.answer(p) for p in prompts])
    return Corpus(task, prompts, targets)


def save_corpus(path, corpus):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p, t in zip(corpus.prompts, corpus.targets):
            fh.write(json.dumps({"prompt": p.tolist(), "target": t.tolist()}, separators=(",", ":")) + "\n")


def load_corpus(path, task):
    prompts, targets = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        prompts.append(rec["prompt"])
        targets.append(rec["target"])
    return Corpus(task, np.array(prompts, dtype=np.int64), np.array(targets, dtype=np.int64))


TASK_PRESETS = {
    "copysort": dict(kind=TaskKind.COPY_SORT, gen_len=12, payload_len=8),
    "modchain": dict(kind=TaskKind.MODULAR_CHAIN, gen_len=16, chain_len=(6, 15)),
    "brackets": dict(kind=TaskKind.BRACKETS, gen_len=12, prefix_len=8),
}


def parse_task_args(text):
    """``"payload_len=3,chain_len=3-4"`` -> ``{"payload_len": 3, "chain_len": (3, 4)}``."""
    out = {}
    for item in filter(None, (t.strip() for t in (text or "").split(","))):
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValidationError(f"task argument {item!r} is not key=value")
        try:
            value = tuple(int(v) for v in raw.split("-")) if "-" in raw.strip("-") else int(raw)
        except ValueError:
            raise ValidationError(f"task argument {item!r} needs integer values") from None
        out[key.strip()] = value
    return out


def make_task(name, gen_len=None, **overrides):
    if name not in TASK_PRESETS:
        raise ValidationError(f"unknown task {name!r}; choose from {sorted(TASK_PRESETS)}")
    params = dict(TASK_PRESETS[name])
    unknown = set(overrides) - set(SyntheticTask.__dataclass_fields__) - {"name"}
    if unknown:
        raise ValidationError(f"unknown task arguments {sorted(unknown)}")
    params.update(overrides)
    if gen_len is not None:
        params["gen_len"] = gen_len
    return SyntheticTask(name=name, **params)
