"""Sequence state machine, decoding traces, future-stability labels and trace files.

A decode starts from a prompt followed by ``gen_len`` mask tokens. Each step the
backbone proposes a token for every visible generation position and a policy
commits some of them (``GEN -> LOCKED``). The completed trace keeps every step's
proposals so that each proposal can later be compared with the final sequence.
"""

import hashlib
import json
import struct
import threading
import uuid
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ._validation import (
    StateMachineError,
    TraceFormatError,
    ValidationError,
    check_positive_int,
    check_token_array,
)

SCHEMA_VERSION = 1
HIDDEN_MAGIC = b"CLHB"
_HIDDEN_HEADER = struct.Struct("<4sIIII")  # magic, version, trace count, n_layers, d


@dataclass(frozen=True)
class Vocab:
    size: int
    mask_id: int
    eot_id: int

    def __post_init__(self):
        check_positive_int(self.size, "size", minimum=2)
        if self.mask_id == self.eot_id:
            raise ValidationError("mask_id and eot_id must differ")
        for name in ("mask_id", "eot_id"):
            value = getattr(self, name)
            if not 0 <= value < self.size:
                raise ValidationError(f"{name}={value} outside vocabulary of size {self.size}")


class PositionState(IntEnum):
    PROMPT = 0
    GEN = 1
    LOCKED = 2
    EOT = 3


def _frozen(arr, dtype):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SequenceState:
    tokens: np.ndarray
    states: np.ndarray
    prompt_len: int
    gen_len: int
    vocab: Vocab
    step: int = 0

    @property
    def length(self):
        return self.prompt_len + self.gen_len

    def gen_positions(self):
        """Positions still in state GEN, ascending."""
        return np.flatnonzero(self.states == PositionState.GEN)

    @property
    def done(self):
        return not np.any(self.states == PositionState.GEN)

    def locked_count(self):
        return int(np.sum(self.states == PositionState.LOCKED))


def new_sequence_state(prompt, gen_len, vocab):
    prompt = check_token_array(prompt, "prompt")
    if prompt.size == 0:
        raise ValidationError("prompt must be non-empty")
    if np.any(prompt == vocab.mask_id):
        raise ValidationError("prompt must not contain the mask token")
    if np.any((prompt < 0) | (prompt >= vocab.size)):
        raise ValidationError("prompt token outside vocabulary")
    gen_len = check_positive_int(gen_len, "gen_len")
    tokens = np.concatenate([prompt, np.full(gen_len, vocab.mask_id, dtype=np.int64)])
    states = np.concatenate(
        [
            np.full(prompt.size, PositionState.PROMPT, dtype=np.int8),
            np.full(gen_len, PositionState.GEN, dtype=np.int8),
        ]
    )
    return SequenceState(
        tokens=_frozen(tokens, np.int64),
        states=_frozen(states, np.int8),
        prompt_len=int(prompt.size),
        gen_len=gen_len,
        vocab=vocab,
        step=0,
    )


def apply_commits(state, decisions, candidates):
    """Lock ``decisions`` with their candidate tokens and advance the step counter.

    ``candidates`` maps position -> token. Returns a new state; ``state`` is untouched.
    """
    tokens = state.tokens.copy()
    states = state.states.copy()
    for pos in sorted(int(p) for p in decisions):
        if not 0 <= pos < state.length:
            raise StateMachineError(f"position {pos} outside sequence of length {state.length}")
        if states[pos] != PositionState.GEN:
            raise StateMachineError(
                f"cannot commit position {pos} in state {PositionState(states[pos]).name}"
            )
        if pos not in candidates:
            raise StateMachineError(f"no candidate token for position {pos}")
        token = int(candidates[pos])
        if token == state.vocab.mask_id:
            raise StateMachineError(f"cannot lock the mask token at position {pos}")
        tokens[pos] = token
        states[pos] = PositionState.LOCKED
    return SequenceState(
        tokens=_frozen(tokens, np.int64),
        states=_frozen(states, np.int8),
        prompt_len=state.prompt_len,
        gen_len=state.gen_len,
        vocab=state.vocab,
        step=state.step + 1,
    )


def finalize_state(state):
    """Mark every locked position after the first committed eot as EOT."""
    states = state.states.copy()
    gen = state.tokens[state.prompt_len :]
    hits = np.flatnonzero(gen == state.vocab.eot_id)
    if hits.size:
        first = state.prompt_len + int(hits[0])
        tail = np.arange(first, state.length)
        tail = tail[states[tail] == PositionState.LOCKED]
        states[tail] = PositionState.EOT
    return SequenceState(
        tokens=state.tokens,
        states=_frozen(states, np.int8),
        prompt_len=state.prompt_len,
        gen_len=state.gen_len,
        vocab=state.vocab,
        step=state.step,
    )


def extract_answer(gen_tokens, eot_id):
    """Generated tokens up to (not including) the first eot."""
    gen_tokens = np.asarray(gen_tokens)
    hits = np.flatnonzero(gen_tokens == eot_id)
    return gen_tokens[: hits[0]] if hits.size else gen_tokens


@dataclass(frozen=True, eq=False)
class StepRecord:
    """Everything observed at one denoising step.

    ``positions``/``candidates``/``confidences`` cover every visible GEN position.
    ``hidden`` has shape (n_layers, visible_limit, d) when snapshots were kept.
    ``scores`` holds the controller margin per candidate (NaN where unscored).
    """

    step: int
    positions: np.ndarray
    candidates: np.ndarray
    confidences: np.ndarray
    committed: np.ndarray
    visible_limit: int
    hidden: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None
    threshold: Optional[float] = None
    fallback: bool = False

    def __post_init__(self):
        object.__setattr__(self, "positions", _frozen(self.positions, np.int64))
        object.__setattr__(self, "candidates", _frozen(self.candidates, np.int64))
        object.__setattr__(self, "confidences", _frozen(self.confidences, np.float64))
        object.__setattr__(self, "committed", _frozen(self.committed, np.int64))
        if self.hidden is not None:
            object.__setattr__(self, "hidden", _frozen(self.hidden, np.float32))
        if self.scores is not None:
            object.__setattr__(self, "scores", _frozen(self.scores, np.float64))
        if not (self.positions.shape == self.candidates.shape == self.confidences.shape):
            raise ValidationError("positions, candidates and confidences must align")
        if not np.all(np.isfinite(self.confidences)):
            raise ValidationError("confidences must be finite")
        if not np.all(np.isin(self.committed, self.positions)):
            raise ValidationError("committed positions must have candidates")

    def candidate_map(self):
        return dict(zip(self.positions.tolist(), self.candidates.tolist()))


@dataclass(frozen=True, eq=False)
class CompletedTrace:
    prompt: np.ndarray
    final: np.ndarray
    steps: tuple
    vocab: Vocab
    policy: str
    backbone: str
    task: str
    seed: int
    truncated: bool = False
    trace_id: str = field(default_factory=lambda: uuid.uuid4().hex[:16])
    rl: Optional[dict] = None

    def __post_init__(self):
        object.__setattr__(self, "prompt", _frozen(self.prompt, np.int64))
        object.__setattr__(self, "final", _frozen(self.final, np.int64))
        object.__setattr__(self, "steps", tuple(self.steps))

    @property
    def executed_steps(self):
        return len(self.steps)

    @property
    def prompt_len(self):
        return int(self.prompt.size)

    @property
    def gen_len(self):
        return int(self.final.size)

    def answer(self):
        return extract_answer(self.final, self.vocab.eot_id)

    def state_at(self, t):
        """Sequence state before step ``t`` is applied, rebuilt by replaying commits."""
        state = new_sequence_state(self.prompt, self.gen_len, self.vocab)
        for record in self.steps[:t]:
            state = apply_commits(state, record.committed.tolist(), record.candidate_map())
        return state

    def iter_states(self):
        """Yield ``(record, state_before_record)`` for every step."""
        state = new_sequence_state(self.prompt, self.gen_len, self.vocab)
        for record in self.steps:
            yield record, state
            state = apply_commits(state, record.committed.tolist(), record.candidate_map())


@dataclass(frozen=True, eq=False)
class LabeledTrace:
    trace: CompletedTrace
    labels: tuple  # per step: bool array aligned with record.positions

    @property
    def n_labels(self):
        return int(sum(lab.size for lab in self.labels))


def label_future_stability(trace):
    """Label each recorded proposal 1 iff it equals the final token at its position."""
    if trace.truncated or np.any(trace.final == trace.vocab.mask_id):
        raise ValidationError("cannot label an incomplete trace")
    labels = []
    for record in trace.steps:
        target = trace.final[record.positions - trace.prompt_len]
        lab = record.candidates == target
        lab.setflags(write=False)
        labels.append(lab)
    return LabeledTrace(trace=trace, labels=tuple(labels))


@dataclass(frozen=True)
class FilterConfig:
    min_len: int = 4
    max_rep: int = 3
    ngram: int = 4
    verdict_fn: Optional[Callable] = None  # (prompt, answer) -> "ok" | "syntax_error" | "runtime_error"


@dataclass(frozen=True)
class FilterVerdict:
    accepted: bool
    reason: str


def max_ngram_count(tokens, n=4):
    tokens = [int(x) for x in tokens]
    counts = {}
    for i in range(len(tokens) - n + 1):
        key = tuple(tokens[i : i + n])
        counts[key] = counts.get(key, 0) + 1
    return max(counts.values(), default=0)


def filter_trace(trace, rules=FilterConfig()):
    if trace.truncated:
        return FilterVerdict(False, "truncated")
    answer = trace.answer()
    if answer.size < rules.min_len:
        return FilterVerdict(False, "too_short")
    if max_ngram_count(answer, rules.ngram) >= rules.max_rep:
        return FilterVerdict(False, "repetition")
    if rules.verdict_fn is not None:
        verdict = rules.verdict_fn(trace.prompt, answer)
        if verdict != "ok":
            return FilterVerdict(False, verdict)
    return FilterVerdict(True, "ok")


# --- trace files -----------------------------------------------------------


def _floats_or_none(arr):
    if arr is None:
        return None
    return [None if not np.isfinite(x) else float(x) for x in arr]


def _to_record(trace, hidden_refs):
    steps = []
    for record, ref in zip(trace.steps, hidden_refs):
        steps.append(
            {
                "t": record.step,
                "pos": record.positions.tolist(),
                "tok": record.candidates.tolist(),
                "conf": [float(c) for c in record.confidences],
                "commit": record.committed.tolist(),
                "limit": record.visible_limit,
                "h": ref,
                "score": _floats_or_none(record.scores),
                "tau": record.threshold,
                "fallback": record.fallback,
            }
        )
    out = {
        "v": SCHEMA_VERSION,
        "id": trace.trace_id,
        "vocab": [trace.vocab.size, trace.vocab.mask_id, trace.vocab.eot_id],
        "prompt": trace.prompt.tolist(),
        "final": trace.final.tolist(),
        "policy": trace.policy,
        "backbone": trace.backbone,
        "task": trace.task,
        "seed": trace.seed,
        "truncated": trace.truncated,
        "executed_steps": trace.executed_steps,
        "steps": steps,
    }
    if trace.rl is not None:
        out["rl"] = trace.rl
    return out


def _from_record(rec, hidden_data, layout):
    if rec.get("v") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version {rec.get('v')!r}")
    size, mask_id, eot_id = rec["vocab"]
    steps = []
    for s in rec["steps"]:
        hidden = None
        if s["h"] is not None:
            if hidden_data is None:
                raise ValueError("step references hidden snapshots but no sidecar is present")
            offset, rows = s["h"]
            n_layers, d = layout
            count = n_layers * rows * d
            if offset + count > hidden_data.size:
                raise ValueError("hidden reference past end of sidecar")
            hidden = hidden_data[offset : offset + count].reshape(n_layers, rows, d)
        scores = None
        if s["score"] is not None:
            scores = np.array([np.nan if x is None else x for x in s["score"]], dtype=np.float64)
        steps.append(
            StepRecord(
                step=s["t"],
                positions=np.array(s["pos"], dtype=np.int64),
                candidates=np.array(s["tok"], dtype=np.int64),
                confidences=np.array(s["conf"], dtype=np.float64),
                committed=np.array(s["commit"], dtype=np.int64),
                visible_limit=s["limit"],
                hidden=hidden,
                scores=scores,
                threshold=s["tau"],
                fallback=s["fallback"],
            )
        )
    trace = CompletedTrace(
        prompt=np.array(rec["prompt"], dtype=np.int64),
        final=np.array(rec["final"], dtype=np.int64),
        steps=steps,
        vocab=Vocab(size, mask_id, eot_id),
        policy=rec["policy"],
        backbone=rec["backbone"],
        task=rec["task"],
        seed=rec["seed"],
        truncated=rec["truncated"],
        trace_id=rec["id"],
        rl=rec.get("rl"),
    )
    if trace.executed_steps != rec["executed_steps"]:
        raise ValueError("executed_steps does not match the number of step records")
    return trace


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".hidden.bin")


class TraceWriter:
    """Appends traces to a line-record file plus its hidden-snapshot sidecar.

    ``append`` may be called from several threads; records are written whole.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._text = open(self.path, "w", encoding="utf-8", newline="\n")
        self._bin = None
        self._layout = None
        self._offset = 0
        self._count = 0

    def _open_sidecar(self, layout):
        self._bin = open(sidecar_path(self.path), "wb")
        self._layout = layout
        self._bin.write(_HIDDEN_HEADER.pack(HIDDEN_MAGIC, SCHEMA_VERSION, 0, *layout))

    def append(self, trace):
        with self._lock:
            refs = []
            for record in trace.steps:
                if record.hidden is None:
                    refs.append(None)
                    continue
                n_layers, rows, d = record.hidden.shape
                if self._bin is None:
                    self._open_sidecar((n_layers, d))
                elif (n_layers, d) != self._layout:
                    raise ValidationError(
                        f"hidden layout {(n_layers, d)} differs from file layout {self._layout}"
                    )
                self._bin.write(record.hidden.astype("<f4").tobytes())
                refs.append([self._offset, rows])
                self._offset += record.hidden.size
            line = json.dumps(_to_record(trace, refs), separators=(",", ":"))
            self._text.write(line + "\n")
            self._count += 1

    def close(self):
        with self._lock:
            self._text.close()
            if self._bin is not None:
                self._bin.seek(0)
                self._bin.write(_HIDDEN_HEADER.pack(HIDDEN_MAGIC, SCHEMA_VERSION, self._count, *self._layout))
                self._bin.close()
            else:
                stale = sidecar_path(self.path)
                if stale.exists():
                    stale.unlink()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_traces(path, traces):
    with TraceWriter(path) as writer:
        for trace in traces:
            writer.append(trace)


def _read_sidecar(path):
    blob = Path(path).read_bytes()
    if len(blob) < _HIDDEN_HEADER.size:
        raise TraceFormatError("hidden sidecar shorter than its header", offset=len(blob))
    magic, version, _count, n_layers, d = _HIDDEN_HEADER.unpack_from(blob)
    if magic != HIDDEN_MAGIC or version != SCHEMA_VERSION:
        raise TraceFormatError("bad hidden sidecar header", offset=0)
    body = blob[_HIDDEN_HEADER.size :]
    if len(body) % 4:
        raise TraceFormatError("hidden sidecar truncated", offset=len(blob))
    return np.frombuffer(body, dtype="<f4"), (n_layers, d)


def read_traces(path):
    path = Path(path)
    hidden_data, layout = None, None
    if sidecar_path(path).exists():
        hidden_data, layout = _read_sidecar(sidecar_path(path))
    traces = []
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.endswith(b"\n"):
                raise TraceFormatError("unterminated record (truncated file?)", lineno, offset)
            try:
                rec = json.loads(raw.decode("utf-8"))
                traces.append(_from_record(rec, hidden_data, layout))
            except TraceFormatError:
                raise
            except (ValueError, KeyError, TypeError) as exc:
                raise TraceFormatError(str(exc), lineno, offset) from exc
            offset += len(raw)
    return traces


def trace_digest(trace):
    """SHA-256 over the canonical record and the raw hidden snapshots."""
    refs = [None if r.hidden is None else list(r.hidden.shape) for r in trace.steps]
    h = hashlib.sha256(json.dumps(_to_record(trace, refs), sort_keys=True).encode())
    for record in trace.steps:
        if record.hidden is not None:
            h.update(record.hidden.astype("<f4").tobytes())
    return h.hexdigest()
