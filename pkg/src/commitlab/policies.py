"""Decode loop and commitment policies.

Baselines act on a semi-autoregressive schedule: the active block is the
leftmost block of ``block_size`` generation positions that still holds a GEN
position. TraceLock acts on a soft-crop window that starts at the first GEN
position and spans ``window`` positions; the backbone only sees the sequence up
to the window's right edge.
"""

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from torch import nn

from . import checkpoint
from ._validation import CheckpointError, ValidationError, check_probability
from .backbone import propose
from .features import build_features
from .trace import CompletedTrace, StepRecord, apply_commits, new_sequence_state


class PolicyKind(str, Enum):
    RANDOM = "random"
    CONFIDENCE = "confidence"
    THRESHOLD = "threshold"
    L2P = "l2p"
    TRACELOCK = "tracelock"


POLICY_NAMES = tuple(k.value for k in PolicyKind)


def parse_policy(name):
    try:
        return PolicyKind(name)
    except ValueError:
        raise ValidationError(f"unknown policy {name!r}; valid options: {', '.join(POLICY_NAMES)}") from None


@dataclass(frozen=True, eq=False)
class PolicyDecision:
    commit: np.ndarray
    eligible: np.ndarray
    scores: Optional[np.ndarray] = None  # score per eligible position
    threshold: Optional[float] = None
    fallback_used: bool = False

    def __post_init__(self):
        object.__setattr__(self, "commit", np.asarray(self.commit, dtype=np.int64))
        object.__setattr__(self, "eligible", np.asarray(self.eligible, dtype=np.int64))
        if not np.all(np.isin(self.commit, self.eligible)):
            raise ValidationError("commit set must be a subset of the eligible positions")
        if self.eligible.size and not self.commit.size:
            raise ValidationError("a step with eligible positions must commit at least one")


@dataclass(frozen=True)
class WindowState:
    start: int  # first GEN position
    width: int
    end: int  # inclusive

    def positions(self):
        return np.arange(self.start, self.end + 1)


def active_window(state, w):
    gen = state.gen_positions()
    if gen.size == 0:
        raise ValidationError("no active positions: decoding already finished")
    if w < 1:
        raise ValidationError("window width must be >= 1")
    start = int(gen[0])
    return WindowState(start=start, width=int(w), end=min(start + int(w) - 1, state.length - 1))


def active_block(state, block_size):
    """(start, end) of the leftmost generation block still holding a GEN position."""
    if state.gen_len % block_size:
        raise ValidationError(f"block size {block_size} does not divide gen_len {state.gen_len}")
    gen = state.gen_positions()
    if gen.size == 0:
        raise ValidationError("no active positions: decoding already finished")
    b = (int(gen[0]) - state.prompt_len) // block_size
    start = state.prompt_len + b * block_size
    return start, start + block_size - 1


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def logit(p):
    return math.log(p) - math.log1p(-p)


def tracelock_step(positions, margins, window, op_threshold=0.95):
    """Commit every windowed position with ``sigmoid(m) > op_threshold``.

    Falls back to the single highest-margin position (leftmost on ties).
    """
    positions = np.asarray(positions, dtype=np.int64)
    margins = np.asarray(margins, dtype=np.float64)
    inside = (positions >= window.start) & (positions <= window.end)
    positions, margins = positions[inside], margins[inside]
    accept = _sigmoid(margins) > op_threshold
    if positions.size and not accept.any():
        return PolicyDecision(
            commit=positions[[int(np.argmax(margins))]],
            eligible=positions,
            scores=margins,
            threshold=op_threshold,
            fallback_used=True,
        )
    return PolicyDecision(commit=positions[accept], eligible=positions, scores=margins, threshold=op_threshold)


def baseline_step(kind, positions, confidences, rng=None, threshold=0.9, filter_probs=None):
    """Random / confidence / fixed-threshold / learned-filter commit over one block."""
    kind = PolicyKind(kind)
    positions = np.asarray(positions, dtype=np.int64)
    conf = np.asarray(confidences, dtype=np.float64)
    if positions.size == 0:
        return PolicyDecision(commit=positions, eligible=positions)
    top1 = positions[[int(np.argmax(conf))]]
    if kind is PolicyKind.RANDOM:
        if rng is None:
            raise ValidationError("random transfer needs an rng")
        return PolicyDecision(commit=positions[[int(rng.integers(positions.size))]], eligible=positions, scores=conf)
    if kind is PolicyKind.CONFIDENCE:
        return PolicyDecision(commit=top1, eligible=positions, scores=conf)
    if kind is PolicyKind.THRESHOLD:
        accept = conf > threshold
        if not accept.any():
            return PolicyDecision(commit=top1, eligible=positions, scores=conf, threshold=threshold, fallback_used=True)
        return PolicyDecision(commit=positions[accept], eligible=positions, scores=conf, threshold=threshold)
    if kind is PolicyKind.L2P:
        probs = np.asarray(filter_probs, dtype=np.float64)
        accept = probs > threshold
        if not accept.any():
            return PolicyDecision(commit=top1, eligible=positions, scores=probs, threshold=threshold, fallback_used=True)
        return PolicyDecision(commit=positions[accept], eligible=positions, scores=probs, threshold=threshold)
    raise ValidationError(f"{kind.value} is not a baseline policy")


# --- learned blockwise filter --------------------------------------------------


class _FilterMLP(nn.Module):
    def __init__(self, block_size, hidden):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(2 * block_size, hidden), nn.ReLU(), nn.Linear(hidden, block_size))

    def forward(self, x):
        return self.net(x)


def block_inputs(block_positions, positions, confidences):
    """Filter input for one block: confidences (0 for non-GEN) and a GEN indicator."""
    B = len(block_positions)
    conf = np.zeros(B)
    is_gen = np.zeros(B)
    idx = {int(p): j for j, p in enumerate(block_positions)}
    for p, c in zip(positions, confidences):
        j = idx.get(int(p))
        if j is not None:
            conf[j] = c
            is_gen[j] = 1.0
    return np.concatenate([conf, is_gen])


class BlockFilter(BaseEstimator):
    """Two-layer MLP over a fixed-size block of confidences (Learn2PD-style).

    The input interface is tied to ``block_size``. Applied to a larger block,
    the filter is tiled over consecutive ``block_size`` chunks.
    """

    def __init__(self, block_size=8, hidden=64, threshold=0.96, steps=1500, batch_size=128, lr=1e-3, seed=0):
        self.block_size = block_size
        self.hidden = hidden
        self.threshold = threshold
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def _examples(self, labeled_traces):
        X, Y, M = [], [], []
        for lt in labeled_traces:
            for (record, state), labels in zip(lt.trace.iter_states(), lt.labels):
                if state.done:
                    continue
                start, end = active_block(state, self.block_size)
                block = np.arange(start, end + 1)
                x = block_inputs(block, record.positions, record.confidences)
                y = np.zeros(self.block_size)
                m = np.zeros(self.block_size)
                for p, lab in zip(record.positions, labels):
                    if start <= p <= end:
                        y[p - start] = float(lab)
                        m[p - start] = 1.0
                if m.any():
                    X.append(x)
                    Y.append(y)
                    M.append(m)
        if not X:
            raise ValidationError("no block examples in the pool")
        return (torch.tensor(np.array(X), dtype=torch.float32),
                torch.tensor(np.array(Y), dtype=torch.float32),
                torch.tensor(np.array(M), dtype=torch.float32))

    def fit(self, labeled_traces):
        X, Y, M = self._examples(labeled_traces)
        torch.manual_seed(self.seed)
        self.model_ = _FilterMLP(self.block_size, self.hidden)
        opt = torch.optim.Adam(self.model_.parameters(), lr=self.lr)
        g = torch.Generator().manual_seed(self.seed)
        for _ in range(self.steps):
            idx = torch.randint(0, len(X), (self.batch_size,), generator=g)
            logits = self.model_(X[idx])
            loss = (nn.functional.binary_cross_entropy_with_logits(logits, Y[idx], reduction="none") * M[idx]).sum()
            loss = loss / M[idx].sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
        self.model_.eval()
        return self

    def predict_proba(self, block_positions, positions, confidences):
        """Accept probabilities for ``positions`` inside ``block_positions``."""
        if not hasattr(self, "model_"):
            raise NotFittedError("BlockFilter is not fitted")
        block_positions = np.asarray(block_positions)
        out = {}
        for c0 in range(0, len(block_positions), self.block_size):
            chunk = block_positions[c0 : c0 + self.block_size]
            if len(chunk) < self.block_size:
                chunk = np.concatenate([chunk, -1 - np.arange(self.block_size - len(chunk))])
            x = torch.tensor(block_inputs(chunk, positions, confidences), dtype=torch.float32)
            with torch.no_grad():
                probs = torch.sigmoid(self.model_(x[None]))[0].numpy()
            for j, p in enumerate(chunk):
                out[int(p)] = float(probs[j])
        return np.array([out[int(p)] for p in positions])

    def save(self, path):
        meta = {"kind": "block-filter", "params": self.get_params()}
        return checkpoint.save(path, checkpoint.state_dict_to_numpy(self.model_), meta)

    @classmethod
    def load(cls, path):
        tensors, meta, _ = checkpoint.load(path)
        if meta.get("kind") != "block-filter":
            raise CheckpointError(f"{path} is not a block-filter checkpoint")
        est = cls(**meta["params"])
        est.model_ = _FilterMLP(est.block_size, est.hidden)
        checkpoint.load_numpy_state(est.model_, tensors)
        est.model_.eval()
        return est


# --- policies ---------------------------------------------------------------------


class BlockPolicy:
    """Random, confidence, fixed-threshold and learned-filter transfer."""

    def __init__(self, kind, block_size=8, threshold=None, block_filter=None):
        self.kind = PolicyKind(kind)
        self.block_size = block_size
        if threshold is None:
            threshold = {PolicyKind.THRESHOLD: 0.9, PolicyKind.L2P: 0.96}.get(self.kind, 0.9)
        self.threshold = threshold
        self.block_filter = block_filter
        if self.kind is PolicyKind.L2P and block_filter is None:
            raise ValidationError("l2p policy needs a fitted BlockFilter")
        if self.kind is PolicyKind.TRACELOCK:
            raise ValidationError("use TraceLockPolicy for tracelock")

    @property
    def name(self):
        return self.kind.value

    def visible_limit(self, state):
        return state.length

    def decide(self, state, output, positions, tokens, confidences, rng):
        start, end = active_block(state, self.block_size)
        inside = (positions >= start) & (positions <= end)
        pos, conf = positions[inside], confidences[inside]
        probs = None
        if self.kind is PolicyKind.L2P:
            probs = self.block_filter.predict_proba(np.arange(start, end + 1), pos, conf)
        return baseline_step(self.kind, pos, conf, rng=rng, threshold=self.threshold, filter_probs=probs)


class TraceLockPolicy:
    """Learned commitment over the soft-crop window.

    ``soft_crop=False`` scores the whole generation region; ``dynamic_threshold=False``
    compares ``sigmoid(a)`` (no learned threshold) with the operating threshold.
    """

    kind = PolicyKind.TRACELOCK
    name = "tracelock"

    def __init__(self, controller, window=8, op_threshold=0.95, soft_crop=True, dynamic_threshold=True):
        self.controller = controller
        self.window = window
        self.op_threshold = check_probability(op_threshold, "op_threshold", open_interval=True)
        self.soft_crop = soft_crop
        self.dynamic_threshold = dynamic_threshold

    def _window(self, state):
        if self.soft_crop:
            return active_window(state, self.window)
        return active_window(state, state.length)

    def visible_limit(self, state):
        return self._window(state).end + 1

    def margins(self, state, output):
        frame = build_features(output, state, self.controller.compressor)
        scored = self.controller.score(frame)
        m = scored.m if self.dynamic_threshold else scored.a
        return scored.positions, m, scored.tau

    def decide(self, state, output, positions, tokens, confidences, rng):
        window = self._window(state)
        pos, m, tau = self.margins(state, output)
        d = tracelock_step(pos, m, window, self.op_threshold)
        return PolicyDecision(d.commit, d.eligible, d.scores, tau, d.fallback_used)


# --- decode loop ---------------------------------------------------------------------


@dataclass(frozen=True)
class DecodeConfig:
    gen_len: int
    seed: int = 0
    max_steps: Optional[int] = None
    confidence: str = "softmax"
    record_hidden: bool = False
    task: str = ""

    def __post_init__(self):
        if self.gen_len < 1:
            raise ValidationError("gen_len must be >= 1")


def _trace_id(policy_name, seed, stream, prompt):
    key = f"{policy_name}|{seed}|{stream}|{','.join(map(str, np.asarray(prompt).tolist()))}"
    return hashlib.sha1(key.encode()).hexdigest()[:16]


def decode(backbone, policy, prompt, config, stream=0):
    """Run one decode to completion (or ``max_steps``) and return its trace.

    Every step commits at least one position, so a full decode takes at most
    ``gen_len`` steps. ``stream`` separates RNG streams across prompts.
    """
    state = new_sequence_state(prompt, config.gen_len, backbone.vocab)
    rng = np.random.default_rng([config.seed, stream])
    T = config.max_steps if config.max_steps is not None else config.gen_len
    steps = []
    while not state.done and state.step < T:
        limit = policy.visible_limit(state)
        output = backbone.forward(state, limit)
        gen = state.gen_positions()
        pos, tok, conf = propose(output, gen[gen < limit], config.confidence)
        decision = policy.decide(state, output, pos, tok, conf, rng)
        scores = None
        if decision.scores is not None:
            lookup = dict(zip(decision.eligible.tolist(), decision.scores.tolist()))
            scores = np.array([lookup.get(int(p), np.nan) for p in pos])
        steps.append(
            StepRecord(
                step=state.step,
                positions=pos,
                candidates=tok,
                confidences=conf,
                committed=decision.commit,
                visible_limit=limit,
                hidden=output.hiddens[:, :limit] if config.record_hidden else None,
                scores=scores,
                threshold=None if decision.threshold is None else float(decision.threshold),
                fallback=decision.fallback_used,
            )
        )
        state = apply_commits(state, decision.commit.tolist(), dict(zip(pos.tolist(), tok.tolist())))
    return CompletedTrace(
        prompt=prompt,
        final=state.tokens[state.prompt_len :],
        steps=steps,
        vocab=backbone.vocab,
        policy=policy.name,
        backbone=backbone.tag,
        task=config.task,
        seed=config.seed,
        truncated=not state.done,
        trace_id=_trace_id(policy.name, config.seed, stream, prompt),
    )


def decode_many(backbone, policy, prompts, config):
    return [decode(backbone, policy, p, config, stream=i) for i, p in enumerate(prompts)]


def generalize_deploy(backbone, make_policy, prompts, config, sizes):
    """Decode the same prompts under each window/block size in ``sizes``.

    ``make_policy(size)`` must reuse one fixed checkpoint; nothing is retrained.
    Returns ``{size: traces}``.
    """
    return {size: decode_many(backbone, make_policy(size), prompts, config) for size in sizes}
