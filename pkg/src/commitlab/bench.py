"""Quality/steps metrics, trace divergence, score-confidence correlation, schedule oracle, runtime correction."""

import csv
import io
import itertools
import math
import time
import warnings
from dataclasses import astuple, dataclass, fields
from functools import lru_cache

import numpy as np

from ._validation import ValidationError, check_positive_int
from .backbone import propose
from .policies import TraceLockPolicy, _sigmoid, decode_many, generalize_deploy
from .trace import apply_commits, new_sequence_state

METRIC_COLUMNS = ("policy", "task", "N", "size", "n_traces", "quality", "avg_steps", "norm_steps")
DIVERGENCE_COLUMNS = ("step", "mask_sym_diff", "mask_jaccard", "common_token_diff")


# --- metrics -------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricRow:
    policy: str
    task: str
    N: int
    size: int
    n_traces: int
    quality: float
    avg_steps: float
    norm_steps: float

    def __post_init__(self):
        if not 0.0 <= self.quality <= 1.0:
            raise ValidationError(f"quality {self.quality} outside [0, 1]")
        if not 0.0 < self.norm_steps <= 1.0:
            raise ValidationError(f"normalized steps {self.norm_steps} outside (0, 1]")

    def point(self):
        return self.quality, self.norm_steps


def eval_suite(traces, task, size=0):
    """One MetricRow per (policy, N) group. Truncated traces count as incorrect."""
    groups = {}
    for tr in traces:
        if tr.task and tr.task != task.name:
            raise ValidationError(f"trace {tr.trace_id} is for task {tr.task!r}, not {task.name!r}")
        if tr.prompt_len != task.prompt_len:
            raise ValidationError(f"trace {tr.trace_id} prompt length {tr.prompt_len} != {task.prompt_len}")
        task.answer_tokens(tr.prompt)  # raises on prompts the task cannot have produced
        groups.setdefault((tr.policy, tr.gen_len), []).append(tr)
    rows = []
    for (policy, N), group in sorted(groups.items()):
        correct = [not tr.truncated and task.is_correct(tr.prompt, tr.final) for tr in group]
        avg_steps = float(np.mean([tr.executed_steps for tr in group]))
        rows.append(
            MetricRow(
                policy=policy,
                task=task.name,
                N=N,
                size=int(size),
                n_traces=len(group),
                quality=float(np.mean(correct)),
                avg_steps=avg_steps,
                norm_steps=avg_steps / N,
            )
        )
    return rows


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def rows_to_csv(rows, columns=None):
    rows = list(rows)
    columns = columns or tuple(f.name for f in fields(rows[0]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in astuple(r)])
    return buf.getvalue()


def write_csv(path, rows, columns=None):
    text = rows_to_csv(rows, columns)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    return text


def dominates(p, q):
    """Pareto dominance on (quality up, normalized steps down)."""
    return p[0] >= q[0] and p[1] <= q[1] and (p[0] > q[0] or p[1] < q[1])


def window_generalization(backbone, make_policy, prompts, config, task, sizes):
    """Rows for one fixed checkpoint deployed at several window/block sizes."""
    runs = generalize_deploy(backbone, make_policy, prompts, config, sizes)
    return {size: eval_suite(traces, task, size)[0] for size, traces in runs.items()}


def plot_frontier(path, rows, title=""):
    """Static SVG of quality against normalized steps, one marker per row."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "commitlab", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for r in rows:
            ax.scatter([r.norm_steps], [r.quality], label=f"{r.policy} ({r.size})")
        ax.set_xlabel("normalized steps")
        ax.set_ylabel("exact match")
        ax.set_xlim(0, 1.05)
        ax.set_ylim(-0.02, 1.02)
        if title:
            ax.set_title(title)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


# --- divergence ----------------------------------------------------------------------


@dataclass(frozen=True)
class DivergenceRow:
    step: int
    mask_sym_diff: float
    mask_jaccard: float
    common_token_diff: float


def set_divergence(revealed_a, revealed_b, tokens_a, tokens_b, N):
    """``(|A ^ B| / N, |A & B| / |A | B|, token disagreement on A & B)`` over revealed positions."""
    a, b = set(revealed_a), set(revealed_b)
    union, inter = a | b, a & b
    jac = len(inter) / len(union) if union else 1.0
    diff = sum(tokens_a[i] != tokens_b[i] for i in inter) / len(inter) if inter else 0.0
    return len(a ^ b) / N, jac, float(diff)


def _revealed(trace, t):
    state = trace.state_at(min(t, trace.executed_steps))
    gen = state.tokens[state.prompt_len :]
    rel = np.flatnonzero(state.states[state.prompt_len :] != 1)  # anything but GEN
    return rel.tolist(), gen


def divergence(trace_a, trace_b, stride=16):
    """Probe both traces every ``stride`` steps."""
    stride = check_positive_int(stride, "stride")
    if not np.array_equal(trace_a.prompt, trace_b.prompt):
        raise ValidationError("divergence needs traces of the same prompt")
    if trace_a.gen_len != trace_b.gen_len:
        raise ValidationError("divergence needs traces of the same generation length")
    N = trace_a.gen_len
    last = max(trace_a.executed_steps, trace_b.executed_steps)
    rows = []
    for t in range(stride, last + 1, stride):
        ra, ta = _revealed(trace_a, t)
        rb, tb = _revealed(trace_b, t)
        rows.append(DivergenceRow(t, *set_divergence(ra, rb, ta, tb, N)))
    return rows


def mean_divergence(pairs, stride=16):
    """Average DivergenceRows over many trace pairs, per probe step."""
    by_step = {}
    for a, b in pairs:
        for r in divergence(a, b, stride):
            by_step.setdefault(r.step, []).append(astuple(r)[1:])
    return [DivergenceRow(s, *map(float, np.mean(v, axis=0))) for s, v in sorted(by_step.items())]


# --- score / confidence correlation --------------------------------------------------


@dataclass(frozen=True)
class CorrelationPoint:
    step: int
    r: float
    n: int
    skipped: str = ""


def score_conf_correlation(trace, min_positions=3):
    """Per-step Pearson r between sigmoid(margin) and confidence over the scored positions."""
    out = []
    for rec in trace.steps:
        if rec.scores is None:
            out.append(CorrelationPoint(rec.step, math.nan, 0, "no scores"))
            continue
        ok = np.isfinite(rec.scores)
        s, c = _sigmoid(rec.scores[ok]), rec.confidences[ok]
        if ok.sum() < min_positions:
            out.append(CorrelationPoint(rec.step, math.nan, int(ok.sum()), "too few positions"))
        elif np.ptp(s) == 0 or np.ptp(c) == 0:
            out.append(CorrelationPoint(rec.step, math.nan, int(ok.sum()), "zero variance"))
        else:
            out.append(CorrelationPoint(rec.step, float(np.corrcoef(s, c)[0, 1]), int(ok.sum())))
    return out


# --- commitment-schedule oracle ------------------------------------------------------


@lru_cache(maxsize=None)
def fubini(n):
    """Ordered set partitions of ``n`` items: a(n) = sum_k C(n, k) a(n - k)."""
    if n < 0:
        raise ValidationError("n must be >= 0")
    if n == 0:
        return 1
    return sum(math.comb(n, k) * fubini(n - k) for k in range(1, n + 1))


def _nonempty_subsets(items):
    subs = [c for k in range(1, len(items) + 1) for c in itertools.combinations(items, k)]
    return sorted(subs)


def ordered_set_partitions(items):
    """All ordered set partitions, lexicographic over the block sequence."""
    items = tuple(sorted(items))
    if not items:
        yield ()
        return
    for first in _nonempty_subsets(items):
        rest = tuple(i for i in items if i not in first)
        for tail in ordered_set_partitions(rest):
            yield (first,) + tail


@dataclass(frozen=True)
class OracleFrontier:
    min_steps: int | None
    schedule: tuple | None
    enumerated: int
    matching: int
    complete: bool


MAX_ORACLE_N = 6


def oracle_enumerate(backbone, prompt, gen_len, reference, budget=None):
    """Minimal step count over every commitment schedule that reproduces ``reference``.

    Schedules are replayed through the decode loop depth-first, so shared
    prefixes reuse one backbone call. Positions in the schedule are absolute.
    """
    if gen_len > MAX_ORACLE_N:
        raise ValidationError(f"oracle enumeration is limited to N <= {MAX_ORACLE_N}")
    reference = np.asarray(reference)
    budget = fubini(gen_len) if budget is None else budget
    best = [None, None]
    counts = {"enumerated": 0, "matching": 0}

    def walk(state, prefix):
        if counts["enumerated"] >= budget:
            return
        gen = state.gen_positions()
        if gen.size == 0:
            counts["enumerated"] += 1
            if np.array_equal(state.tokens[state.prompt_len :], reference):
                counts["matching"] += 1
                if best[0] is None or len(prefix) < best[0]:
                    best[0], best[1] = len(prefix), prefix
            return
        pos, tok, _ = propose(backbone.forward(state), gen)
        cand = dict(zip(pos.tolist(), tok.tolist()))
        for block in _nonempty_subsets(tuple(pos.tolist())):
            walk(apply_commits(state, list(block), cand), prefix + (block,))

    walk(new_sequence_state(prompt, gen_len, backbone.vocab), ())
    complete = counts["enumerated"] == fubini(gen_len)
    return OracleFrontier(best[0], best[1], counts["enumerated"], counts["matching"], complete)


def replay_schedule(backbone, prompt, gen_len, schedule):
    state = new_sequence_state(prompt, gen_len, backbone.vocab)
    for block in schedule:
        pos, tok, _ = propose(backbone.forward(state), state.gen_positions())
        state = apply_commits(state, list(block), dict(zip(pos.tolist(), tok.tolist())))
    return state.tokens[state.prompt_len :]


# --- wall-clock correction -----------------------------------------------------------


def runtime_correction(t_dlm, t_ctrl, t_wall, t_tl):
    """``alpha = (T_dlm + T_ctrl) / T_wall`` and the corrected estimate ``alpha * T_tl``."""
    for name, v in (("t_dlm", t_dlm), ("t_wall", t_wall), ("t_tl", t_tl)):
        if not v > 0:
            raise ValidationError(f"{name} must be > 0")
    if t_ctrl < 0:
        raise ValidationError("t_ctrl must be >= 0")
    alpha = (t_dlm + t_ctrl) / t_wall
    if alpha > 1:
        warnings.warn(f"runtime correction factor {alpha:.3f} > 1; timings look inconsistent", RuntimeWarning)
    return alpha, alpha * t_tl


class _TimedBackbone:
    def __init__(self, inner):
        self.inner = inner
        self.elapsed = 0.0

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def forward(self, state, visible_limit=None):
        t = time.perf_counter()
        out = self.inner.forward(state, visible_limit)
        self.elapsed += time.perf_counter() - t
        return out


class _TimedController:
    def __init__(self, inner):
        self.inner = inner
        self.elapsed = 0.0

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def score(self, frame):
        t = time.perf_counter()
        out = self.inner.score(frame)
        self.elapsed += time.perf_counter() - t
        return out


def measure_runtime(backbone, policy, prompts, config):
    """Time a TraceLock run and return ``(alpha, corrected, wall)`` from host monotonic timers."""
    timed_bb = _TimedBackbone(backbone)
    timed_ctrl = _TimedController(policy.controller)
    timed = TraceLockPolicy(
        timed_ctrl, policy.window, policy.op_threshold, policy.soft_crop, policy.dynamic_threshold
    )
    t = time.perf_counter()
    decode_many(timed_bb, timed, prompts, config)
    wall = time.perf_counter() - t
    alpha, corrected = runtime_correction(timed_bb.elapsed, timed_ctrl.elapsed, wall, wall)
    return alpha, corrected, wall
