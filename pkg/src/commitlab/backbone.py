"""Frozen generators: a programmatic answer oracle and a small trainable masked LM.

Both expose ``forward(state, visible_limit) -> GeneratorOutput``. Positions at or
beyond ``visible_limit`` are excluded from attention; their logits are zero and
their hidden rows are zero.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from torch import nn

from . import checkpoint
from ._validation import CheckpointError, TrainingDivergedError, ValidationError
from .nn import Encoder, sinusoidal_encoding
from .tasks import SyntheticTask

log = logging.getLogger(__name__)

N_SNAPSHOTS = 3


@dataclass(frozen=True, eq=False)
class GeneratorOutput:
    logits: np.ndarray  # (L, |V|) float64
    hiddens: np.ndarray  # (n_layers, L, d) float32
    visible_limit: int

    def __post_init__(self):
        if self.hiddens.ndim != 3 or self.hiddens.shape[0] < N_SNAPSHOTS:
            raise ValidationError("generator output needs at least three hidden snapshots")
        if self.hiddens.shape[1] != self.logits.shape[0]:
            raise ValidationError("logits and hiddens disagree on sequence length")

    @property
    def d(self):
        return self.hiddens.shape[2]


def _check_limit(state, visible_limit):
    if visible_limit is None:
        return state.length
    visible_limit = int(visible_limit)
    if not state.prompt_len <= visible_limit <= state.length:
        raise ValidationError(
            f"visible_limit {visible_limit} outside [{state.prompt_len}, {state.length}]"
        )
    return visible_limit


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def propose(output, positions, confidence="softmax"):
    """Greedy proposals at ``positions``: ``(positions, tokens, confidences)``.

    Ties in the argmax go to the lowest token id. ``confidence="negentropy"``
    gives ``1 - H(p)/log|V|`` instead of the argmax probability.
    """
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size and positions.max() >= output.visible_limit:
        raise ValidationError("cannot propose at positions beyond the visible limit")
    probs = softmax(output.logits[positions]) if positions.size else np.zeros((0, output.logits.shape[1]))
    tokens = np.argmax(probs, axis=1) if positions.size else np.zeros(0, dtype=np.int64)
    if confidence == "softmax":
        conf = probs[np.arange(positions.size), tokens] if positions.size else np.zeros(0)
    elif confidence == "negentropy":
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = -np.sum(np.where(probs > 0, probs * np.log(probs), 0.0), axis=1)
        conf = 1.0 - ent / math.log(probs.shape[1])
    else:
        raise ValidationError(f"unknown confidence kind {confidence!r}")
    return positions, tokens.astype(np.int64), np.asarray(conf, dtype=np.float64)


class ProgrammaticBackbone:
    """Answer oracle: every visible generation position predicts its target token.

    Hidden rows are ``[scale * onehot(target); mask_fraction; sinusoid(pos)]``
    repeated over three pseudo-layers with per-layer additive offsets.
    """

    tag = "programmatic"

    def __init__(self, task, margin=100.0, scale=4.0, pos_dim=8):
        self.task = task
        self.margin = margin
        self.scale = scale
        self.pos_dim = pos_dim
        self.vocab = task.vocab

    @property
    def d(self):
        return self.vocab.size + 1 + self.pos_dim

    def forward(self, state, visible_limit=None):
        limit = _check_limit(state, visible_limit)
        V, L = self.vocab.size, state.length
        target = np.concatenate([state.tokens[: state.prompt_len], self.task.answer(state.tokens[: state.prompt_len])])
        logits = np.zeros((L, V))
        logits[np.arange(limit), target[:limit]] = self.margin
        onehot = np.zeros((L, V), dtype=np.float32)
        onehot[np.arange(limit), target[:limit]] = self.scale
        mask_frac = np.mean(state.tokens[state.prompt_len :] == self.vocab.mask_id)
        pos = sinusoidal_encoding(np.arange(L), self.pos_dim).numpy().astype(np.float32)
        base = np.concatenate([onehot, np.full((L, 1), mask_frac, dtype=np.float32), pos], axis=1)
        base[limit:] = 0.0
        hiddens = np.stack([base + 0.1 * k * (np.arange(L) < limit)[:, None] for k in range(N_SNAPSHOTS)])
        return GeneratorOutput(logits=logits, hiddens=hiddens.astype(np.float32), visible_limit=limit)


class _MaskedLM(nn.Module):
    def __init__(self, vocab_size, max_len, d_model, n_layers, n_heads, ff_dim, dropout):
        super().__init__()
        self.tok = nn.Embedding(vocab_size, d_model)
        self.pos = nn.Embedding(max_len, d_model)
        self.encoder = Encoder(d_model, n_layers, n_heads, ff_dim, dropout)
        self.norm = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, vocab_size)
        nn.init.normal_(self.tok.weight, std=0.1)
        nn.init.normal_(self.pos.weight, std=0.1)
        # zero head: the untrained model is a uniform predictor
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, tokens, pad_mask=None):
        L = tokens.shape[1]
        x = self.tok(tokens) + self.pos(torch.arange(L))
        outs = self.encoder(x, pad_mask)
        return self.head(self.norm(outs[-1])), outs


class MaskedLMBackbone(BaseEstimator):
    """Bidirectional masked LM trained on a synthetic corpus, then frozen.

    Training masks each generation position with probability
    ``r ~ Uniform(*mask_ratio)`` and, with probability ``crop_prob``, hides a
    random suffix of the sequence so that cropped-visibility decoding stays in
    distribution.
    """

    def __init__(
        self,
        d_model=64,
        n_layers=3,
        n_heads=4,
        ff_dim=128,
        dropout=0.0,
        epochs=20,
        batch_size=64,
        lr=3e-3,
        weight_decay=0.01,
        mask_ratio=(0.15, 0.9),
        crop_prob=0.3,
        max_len=None,
        seed=0,
    ):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.ff_dim = ff_dim
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.mask_ratio = mask_ratio
        self.crop_prob = crop_prob
        self.max_len = max_len
        self.seed = seed

    # -- construction ---------------------------------------------------------

    def _build(self, task, corpus_digest=""):
        if self.n_layers < N_SNAPSHOTS:
            raise ValidationError(f"need at least {N_SNAPSHOTS} layers for hidden snapshots")
        self.task_ = task
        self.vocab_ = task.vocab
        self.max_len_ = self.max_len or (task.prompt_len + task.gen_len)
        torch.manual_seed(self.seed)
        self.model_ = _MaskedLM(
            self.vocab_.size, self.max_len_, self.d_model, self.n_layers, self.n_heads, self.ff_dim, self.dropout
        )
        self.corpus_digest_ = corpus_digest
        self.history_ = []
        return self

    def _batch(self, corpus, idx, rng):
        P = corpus.prompts.shape[1]
        seqs = np.concatenate([corpus.prompts[idx], corpus.targets[idx]], axis=1)
        B, L = seqs.shape
        N = L - P
        lo, hi = self.mask_ratio
        ratio = rng.uniform(lo, hi, size=(B, 1))
        masked = rng.random((B, N)) < ratio
        none = ~masked.any(axis=1)
        masked[none, rng.integers(0, N, size=none.sum())] = True
        masked = np.concatenate([np.zeros((B, P), dtype=bool), masked], axis=1)
        limits = np.full(B, L)
        crop = rng.random(B) < self.crop_prob
        limits[crop] = P + rng.integers(1, N + 1, size=crop.sum())
        visible = np.arange(L)[None, :] < limits[:, None]
        inputs = np.where(masked, self.vocab_.mask_id, seqs)
        return (
            torch.from_numpy(inputs),
            torch.from_numpy(seqs),
            torch.from_numpy(masked & visible),
            torch.from_numpy(~visible),
        )

    def fit(self, corpus, steps=None):
        """Train on ``corpus``. ``steps`` overrides ``epochs`` when given."""
        self._build(corpus.task, corpus.digest())
        rng = np.random.default_rng(self.seed)
        n = len(corpus)
        per_epoch = math.ceil(n / self.batch_size)
        total = per_epoch * self.epochs if steps is None else int(steps)
        opt = torch.optim.AdamW(self.model_.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / 50) * max(0.05, 1 - s / max(total, 1)))
        self.model_.train()
        order = rng.permutation(n)
        for step in range(total):
            start = (step % per_epoch) * self.batch_size
            if start == 0 and step:
                order = rng.permutation(n)
            idx = order[start : start + self.batch_size]
            inputs, seqs, target_mask, pad = self._batch(corpus, idx, rng)
            logits, _ = self.model_(inputs, pad)
            loss = F.cross_entropy(logits[target_mask], seqs[target_mask])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"backbone loss became {loss.item()} at step {step}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(self.model_.parameters(), 1.0)
            opt.step()
            sched.step()
            if step % 100 == 0 or step == total - 1:
                self.history_.append((step, float(loss.item())))
                log.debug("backbone step %d loss %.4f", step, loss.item())
        self._freeze()
        return self

    def _freeze(self):
        self.model_.eval()
        for p in self.model_.parameters():
            p.requires_grad_(False)
        self.frozen_digest_ = checkpoint.weights_digest(self.model_)

    def check_frozen(self):
        """Raise if the weights changed since training finished."""
        if checkpoint.weights_digest(self.model_) != self.frozen_digest_:
            raise RuntimeError("frozen backbone weights were modified")

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("MaskedLMBackbone is not fitted")

    @property
    def tag(self):
        self._check_fitted()
        return f"mlm-{self.task_.name}-{self.frozen_digest_[:12]}"

    @property
    def vocab(self):
        return self.vocab_

    @property
    def d(self):
        return self.d_model

    # -- inference ------------------------------------------------------------

    @torch.inference_mode()
    def forward(self, state, visible_limit=None):
        self._check_fitted()
        limit = _check_limit(state, visible_limit)
        if state.length > self.max_len_:
            raise ValidationError(f"sequence length {state.length} exceeds max_len {self.max_len_}")
        tokens = torch.from_numpy(np.array(state.tokens[:limit], dtype=np.int64))[None]
        logits, outs = self.model_(tokens)
        L = state.length
        full_logits = np.zeros((L, self.vocab_.size))
        full_logits[:limit] = logits[0].double().numpy()
        hiddens = np.zeros((len(outs), L, self.d_model), dtype=np.float32)
        for k, h in enumerate(outs):
            hiddens[k, :limit] = h[0].numpy()
        return GeneratorOutput(logits=full_logits, hiddens=hiddens[-N_SNAPSHOTS:], visible_limit=limit)

    @torch.inference_mode()
    def masked_accuracy(self, corpus, seed=0):
        """Argmax accuracy on masked generation positions under training-style masks."""
        self._check_fitted()
        rng = np.random.default_rng(seed)
        crop, self.crop_prob = self.crop_prob, 0.0
        try:
            correct = total = 0
            for start in range(0, len(corpus), 256):
                idx = np.arange(start, min(start + 256, len(corpus)))
                inputs, seqs, target_mask, pad = self._batch(corpus, idx, rng)
                logits, _ = self.model_(inputs, pad)
                pred = logits.argmax(-1)
                correct += int((pred[target_mask] == seqs[target_mask]).sum())
                total += int(target_mask.sum())
        finally:
            self.crop_prob = crop
        return correct / total

    def score(self, corpus):
        return self.masked_accuracy(corpus)

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        self._check_fitted()
        meta = {
            "kind": "masked-lm-backbone",
            "params": _jsonable(self.get_params()),
            "task": _task_meta(self.task_),
            "max_len": self.max_len_,
            "corpus_digest": self.corpus_digest_,
            "history": self.history_,
        }
        return checkpoint.save(path, checkpoint.state_dict_to_numpy(self.model_), meta)

    @classmethod
    def load(cls, path):
        tensors, meta, _ = checkpoint.load(path)
        if meta.get("kind") != "masked-lm-backbone":
            raise CheckpointError(f"{path} is not a backbone checkpoint")
        params = dict(meta["params"])
        params["mask_ratio"] = tuple(params["mask_ratio"])
        est = cls(**params)
        est.max_len = meta["max_len"]
        est._build(task_from_meta(meta["task"]), meta["corpus_digest"])
        est.max_len = params["max_len"]
        checkpoint.load_numpy_state(est.model_, tensors)
        est.history_ = [tuple(h) for h in meta["history"]]
        est._freeze()
        return est


def _jsonable(params):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}


def _task_meta(task):
    return {
        "kind": task.kind.value,
        "gen_len": task.gen_len,
        "payload_len": task.payload_len,
        "modulus": task.modulus,
        "multipliers": list(task.multipliers),
        "chain_len": list(task.chain_len),
        "prefix_len": task.prefix_len,
        "name": task.name,
    }


def task_from_meta(meta):
    meta = dict(meta)
    meta["multipliers"] = tuple(meta["multipliers"])
    meta["chain_len"] = tuple(meta["chain_len"])
    return SyntheticTask(**meta)
