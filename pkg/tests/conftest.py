import numpy as np
import pytest
import torch

from commitlab.backbone import ProgrammaticBackbone
from commitlab.controller import TraceLockController
from commitlab.policies import BlockPolicy, DecodeConfig, decode_many
from commitlab.tasks import make_task
from commitlab.trace import StepRecord, CompletedTrace, Vocab, label_future_stability

torch.set_num_threads(1)

VOCAB = Vocab(size=12, mask_id=0, eot_id=11)


def make_trace(prompt, final, steps, vocab=VOCAB, **kw):
    """Hand-built trace. ``steps`` is a list of (positions, candidates, committed)."""
    records = []
    for t, (pos, cand, com) in enumerate(steps):
        records.append(
            StepRecord(
                step=t,
                positions=np.asarray(pos),
                candidates=np.asarray(cand),
                confidences=np.full(len(pos), 0.5),
                committed=np.asarray(com),
                visible_limit=len(prompt) + len(final),
            )
        )
    return CompletedTrace(prompt=prompt, final=final, steps=records, vocab=vocab, policy="hand",
                          backbone="none", task="", seed=0, **kw)


@pytest.fixture(scope="session")
def copysort():
    return make_task("copysort")


@pytest.fixture(scope="session")
def oracle_backbone(copysort):
    return ProgrammaticBackbone(copysort)


@pytest.fixture(scope="session")
def prompts(copysort):
    rng = np.random.default_rng(0)
    return [copysort.sample_prompt(rng) for _ in range(40)]


@pytest.fixture(scope="session")
def random_traces(copysort, oracle_backbone, prompts):
    cfg = DecodeConfig(gen_len=copysort.gen_len, seed=0, record_hidden=True, task=copysort.name)
    return decode_many(oracle_backbone, BlockPolicy("random", block_size=4), prompts, cfg)


@pytest.fixture(scope="session")
def small_controller(random_traces):
    labeled = [label_future_stability(t) for t in random_traces]
    return TraceLockController(steps=40, val_every=20, batch_size=16).fit(labeled)
