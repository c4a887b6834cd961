import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from commitlab._validation import StateMachineError, TraceFormatError, ValidationError
from commitlab.trace import (
    FilterConfig,
    PositionState,
    TraceWriter,
    Vocab,
    apply_commits,
    filter_trace,
    finalize_state,
    label_future_stability,
    max_ngram_count,
    new_sequence_state,
    read_traces,
    sidecar_path,
    trace_digest,
    write_traces,
)

from conftest import VOCAB, make_trace

P, G, L = PositionState.PROMPT, PositionState.GEN, PositionState.LOCKED


def test_vocab_invariants():
    with pytest.raises(ValidationError):
        Vocab(size=4, mask_id=1, eot_id=1)
    with pytest.raises(ValidationError):
        Vocab(size=4, mask_id=4, eot_id=1)


def test_new_state_layout():
    s = new_sequence_state([3, 4], 3, VOCAB)
    assert s.tokens.tolist() == [3, 4, 0, 0, 0]
    assert s.states.tolist() == [P, P, G, G, G]
    assert s.step == 0
    s = new_sequence_state([7], 1, VOCAB)
    assert s.length == 2 and s.step == 0


@pytest.mark.parametrize("prompt,n", [([], 2), ([3, 0], 2), ([3], 0)])
def test_new_state_rejects(prompt, n):
    with pytest.raises(ValidationError):
        new_sequence_state(prompt, n, VOCAB)


def test_apply_commits_single_and_empty():
    s = new_sequence_state([5], 2, VOCAB)
    s1 = apply_commits(s, {1}, {1: 9})
    assert s1.tokens[1] == 9
    assert s1.states.tolist() == [P, L, G]
    assert s1.step == 1
    s2 = apply_commits(s1, set(), {})
    assert s2.tokens.tolist() == s1.tokens.tolist() and s2.step == 2
    # the input state is not modified
    assert s.states.tolist() == [P, G, G]


@pytest.mark.parametrize("pos", [0, 1])
def test_apply_commits_rejects_non_gen(pos):
    s = apply_commits(new_sequence_state([5], 2, VOCAB), {1}, {1: 9})
    with pytest.raises(StateMachineError):
        apply_commits(s, {pos}, {pos: 3})


def test_apply_commits_needs_candidate():
    with pytest.raises(StateMachineError):
        apply_commits(new_sequence_state([5], 2, VOCAB), {1}, {})


def test_state_arrays_are_read_only():
    s = new_sequence_state([5], 2, VOCAB)
    with pytest.raises(ValueError):
        s.tokens[1] = 3


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_state_machine_safety(data):
    n = data.draw(st.integers(1, 8))
    prompt = data.draw(st.lists(st.integers(1, 10), min_size=1, max_size=4))
    s = new_sequence_state(prompt, n, VOCAB)
    locked_before = {}
    while not s.done:
        gen = s.gen_positions().tolist()
        chosen = data.draw(st.sets(st.sampled_from(gen), min_size=1, max_size=len(gen)))
        cand = {p: data.draw(st.integers(1, 11)) for p in gen}
        nxt = apply_commits(s, chosen, cand)
        assert nxt.tokens[: len(prompt)].tolist() == list(prompt)
        assert np.all(nxt.states[: len(prompt)] == P)
        for p, tok in locked_before.items():
            assert nxt.tokens[p] == tok and nxt.states[p] == L
        assert nxt.locked_count() >= s.locked_count()
        assert np.all(nxt.tokens[nxt.states == G] == VOCAB.mask_id)
        assert np.all(nxt.tokens[nxt.states == L] != VOCAB.mask_id)
        locked_before.update({p: cand[p] for p in chosen})
        s = nxt


def test_finalize_marks_eot_tail():
    s = new_sequence_state([5], 4, VOCAB)
    s = apply_commits(s, {1, 2, 3, 4}, {1: 7, 2: 11, 3: 4, 4: 11})
    f = finalize_state(s)
    assert f.states.tolist() == [P, L, PositionState.EOT, PositionState.EOT, PositionState.EOT]


# --- labels ------------------------------------------------------------------


def _three_step_trace():
    # prompt length 1, final x* = [5, 7, 9] at positions 1..3
    return make_trace(
        prompt=[2],
        final=[5, 7, 9],
        steps=[
            ([1, 2, 3], [5, 8, 9], [1]),
            ([2, 3], [8, 4], [3]),  # position 3 commits 4 here, so the final token differs
            ([2], [7], [2]),
        ],
    )


def test_labels_by_definition():
    tr = make_trace(
        prompt=[2],
        final=[5, 7, 9],
        steps=[([1, 2, 3], [5, 8, 9], [1]), ([2, 3], [8, 9], [3]), ([2], [7], [2])],
    )
    lt = label_future_stability(tr)
    assert lt.labels[2].tolist() == [True]  # candidate 7 at (t=2, i=1) matches x*_1 = 7
    assert lt.labels[1].tolist() == [False, True]  # candidate 8 at (t=1, i=1) vs 7
    assert lt.n_labels == 6


def test_labels_match_brute_force():
    tr = make_trace(
        prompt=[2],
        final=[5, 7, 9],
        steps=[([1, 2, 3], [5, 8, 9], [1]), ([2, 3], [8, 9], [3]), ([2], [7], [2])],
    )
    lt = label_future_stability(tr)
    for t, rec in enumerate(tr.steps):
        for j, pos in enumerate(rec.positions):
            assert lt.labels[t][j] == (rec.candidates[j] == tr.final[pos - 1])


def test_label_rejects_incomplete():
    tr = make_trace(prompt=[2], final=[5, 0], steps=[([1, 2], [5, 3], [1])], truncated=True)
    with pytest.raises(ValidationError):
        label_future_stability(tr)


# --- filtering ---------------------------------------------------------------------


def _final_trace(answer, n=None):
    n = n or len(answer) + 1
    final = list(answer) + [VOCAB.eot_id] * (n - len(answer))
    pos = list(range(1, n + 1))
    return make_trace(prompt=[2], final=final, steps=[(pos, final, pos)])


def test_filter_too_short():
    assert filter_trace(_final_trace([3, 4]), FilterConfig(min_len=8)).reason == "too_short"


def test_filter_repetition():
    a, b = 3, 4
    seq = [a, b] * 5
    assert max_ngram_count(seq, 4) == 4
    v = filter_trace(_final_trace(seq), FilterConfig(max_rep=3))
    assert v == v.__class__(False, "repetition")


def test_filter_accepts_clean_and_uses_verdict():
    assert filter_trace(_final_trace([1, 2, 3, 4, 5])).accepted
    rules = FilterConfig(verdict_fn=lambda prompt, ans: "syntax_error")
    assert filter_trace(_final_trace([1, 2, 3, 4, 5]), rules).reason == "syntax_error"


def test_filter_rejects_truncated():
    tr = make_trace(prompt=[2], final=[5, 0], steps=[([1, 2], [5, 3], [1])], truncated=True)
    assert filter_trace(tr).reason == "truncated"


def test_ngram_counter_against_sliding_window():
    rng = np.random.default_rng(3)
    for _ in range(50):
        seq = rng.integers(0, 3, size=rng.integers(0, 20)).tolist()
        windows = [tuple(seq[i : i + 4]) for i in range(len(seq) - 3)]
        expected = max((windows.count(w) for w in windows), default=0)
        assert max_ngram_count(seq, 4) == expected


# --- persistence ----------------------------------------------------------------------


def _fields(tr):
    steps = [
        (r.step, r.positions.tolist(), r.candidates.tolist(), r.confidences.tolist(), r.committed.tolist(),
         r.visible_limit, None if r.hidden is None else r.hidden.tolist(),
         None if r.scores is None else np.nan_to_num(r.scores, nan=-99).tolist(), r.threshold, r.fallback)
        for r in tr.steps
    ]
    return (tr.prompt.tolist(), tr.final.tolist(), steps, tr.vocab, tr.policy, tr.backbone, tr.task, tr.seed,
            tr.truncated, tr.trace_id, tr.rl)


def test_round_trip_with_hidden(tmp_path, random_traces):
    path = tmp_path / "t.jsonl"
    write_traces(path, random_traces[:5])
    back = read_traces(path)
    assert sidecar_path(path).exists()
    assert [_fields(t) for t in back] == [_fields(t) for t in random_traces[:5]]
    assert [trace_digest(t) for t in back] == [trace_digest(t) for t in random_traces[:5]]


def test_round_trip_plain(tmp_path):
    tr = _three_step_trace()
    path = tmp_path / "t.jsonl"
    write_traces(path, [tr])
    (back,) = read_traces(path)
    assert _fields(back) == _fields(tr)
    assert json.loads(path.read_text().splitlines()[0])["v"] == 1


def test_thousand_traces_digests(tmp_path):
    rng = np.random.default_rng(0)
    traces = []
    for k in range(1000):
        final = rng.integers(1, 11, size=3).tolist()
        traces.append(make_trace(prompt=[2], final=final, steps=[([1, 2, 3], final, [1, 2, 3])], trace_id=f"t{k}"))
    path = tmp_path / "many.jsonl"
    write_traces(path, traces)
    assert [trace_digest(t) for t in read_traces(path)] == [trace_digest(t) for t in traces]


def test_truncated_file_reports_offset(tmp_path):
    path = tmp_path / "t.jsonl"
    write_traces(path, [_three_step_trace(), _three_step_trace()])
    raw = path.read_bytes()
    first_len = raw.index(b"\n") + 1
    path.write_bytes(raw[: first_len + 20])
    with pytest.raises(TraceFormatError) as err:
        read_traces(path)
    assert err.value.lineno == 2 and err.value.offset == first_len
    assert "line 2" in str(err.value)


def test_malformed_line(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text('{"v": 1, "prompt": [1]}\n{not json\n')
    with pytest.raises(TraceFormatError) as err:
        read_traces(path)
    assert err.value.lineno == 1


def test_schema_version_checked(tmp_path):
    path = tmp_path / "t.jsonl"
    write_traces(path, [_three_step_trace()])
    rec = json.loads(path.read_text())
    rec["v"] = 99
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(TraceFormatError):
        read_traces(path)


def test_concurrent_appends(tmp_path, random_traces):
    from concurrent.futures import ThreadPoolExecutor

    path = tmp_path / "c.jsonl"
    with TraceWriter(path) as w, ThreadPoolExecutor(4) as pool:
        list(pool.map(w.append, random_traces[:12]))
    back = read_traces(path)
    assert sorted(trace_digest(t) for t in back) == sorted(trace_digest(t) for t in random_traces[:12])
