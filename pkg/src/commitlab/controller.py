"""Contextual stability scorer with a learned threshold token.

A Transformer encoder runs over ``[threshold token; per-position features]``.
The score head gives a raw stability logit ``a_i`` per position, the threshold
head reads the threshold token and gives a scalar ``tau``; decisions use the
margin ``m_i = a_i - tau``. Training minimises the mispenalty-weighted BCE of the
margin against future-stability labels plus ``lambda_tau * tau**2``.
"""

import copy
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.metrics import average_precision_score, fbeta_score, roc_auc_score
from torch import nn

from . import checkpoint
from ._validation import CheckpointError, TrainingDivergedError, ValidationError
from .features import Compressor, aux_channels, sample_crop
from .nn import Encoder
from .trace import PositionState

log = logging.getLogger(__name__)

PRESETS = {
    "toy": dict(n_layers=2, n_heads=4, d_model=64, ff_dim=128, dropout=0.1),
    "paper": dict(n_layers=3, n_heads=8, d_model=384, ff_dim=768, dropout=0.1),
}


@dataclass(frozen=True, eq=False)
class ScoreOutput:
    positions: np.ndarray  # GEN positions that were scored
    a: np.ndarray
    tau: float
    m: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    k: float = 4.0
    lambda_tau: float = 1e-3
    lr: float = 1e-4
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 42
    batch_size: int = 32
    steps: int = 2000
    val_every: int = 250
    val_fraction: float = 0.1
    crop: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if self.lambda_tau < 0:
            raise ValidationError("lambda_tau must be >= 0")


class ControllerNet(nn.Module):
    def __init__(self, d_hidden, d_z, d_r, d_model, n_layers, n_heads, ff_dim, dropout, pos_dim, feature_set):
        super().__init__()
        self.compressor = Compressor(d_hidden, d_z, d_r, d_model, pos_dim, feature_set)
        self.threshold_token = nn.Parameter(0.02 * torch.randn(d_model))
        self.encoder = Encoder(d_model, n_layers, n_heads, ff_dim, dropout)
        self.norm = nn.LayerNorm(d_model)
        self.score_head = nn.Linear(d_model, 1)
        self.threshold_head = nn.Linear(d_model, 1)

    def forward_q(self, q, aux, pad_mask):
        x = self.compressor.project(q, aux)
        tok = self.threshold_token.to(x.dtype).expand(x.shape[0], 1, -1)
        x = torch.cat([tok, x], dim=1)
        pad = torch.cat([torch.zeros_like(pad_mask[:, :1]), pad_mask], dim=1)
        h = self.norm(self.encoder(x, pad)[-1])
        tau = self.threshold_head(h[:, 0]).squeeze(-1)
        a = self.score_head(h[:, 1:]).squeeze(-1)
        return a, tau

    def forward(self, hiddens, aux, pad_mask):
        return self.forward_q(self.compressor.compress(hiddens), aux, pad_mask)


def mispenalty_weights(m, y, k):
    """1 where the sign rule ``(m > 0) == y`` holds, ``k`` otherwise."""
    pred = m > 0
    return torch.where(pred == y.bool(), torch.ones_like(m), torch.full_like(m, float(k)))


def dyn_loss(m, y, tau, k=4.0, lambda_tau=1e-3):
    """Mean weighted BCE over the active positions plus ``lambda_tau * mean(tau**2)``.

    ``m`` and ``y`` are flat over Omega; ``tau`` holds one threshold per step.
    """
    m = torch.as_tensor(m)
    y = torch.as_tensor(y, dtype=m.dtype)
    tau = torch.as_tensor(tau, dtype=m.dtype)
    if m.numel() == 0:
        raise ValidationError("loss over an empty set of active positions")
    w = mispenalty_weights(m.detach(), y, k)
    bce = F.binary_cross_entropy_with_logits(m, y, reduction="none")
    return (w * bce).mean() + lambda_tau * (tau**2).mean()


# --- training examples ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StepExample:
    hidden: np.ndarray  # (3, Lv, d)
    states: np.ndarray  # (Lv,)
    label_pos: np.ndarray  # GEN positions with labels
    labels: np.ndarray
    prompt_len: int
    gen_len: int
    trace_index: int


def step_examples(labeled_traces):
    out = []
    for ti, lt in enumerate(labeled_traces):
        for (record, state), labels in zip(lt.trace.iter_states(), lt.labels):
            if record.hidden is None or record.positions.size == 0:
                continue
            lv = record.visible_limit
            out.append(
                StepExample(
                    hidden=record.hidden[-3:],
                    states=state.states[:lv],
                    label_pos=record.positions,
                    labels=labels,
                    prompt_len=lt.trace.prompt_len,
                    gen_len=lt.trace.gen_len,
                    trace_index=ti,
                )
            )
    return out


def collate(examples, pos_dim, rng=None):
    """Pad a batch; with ``rng`` each example gets a random prefix crop.

    A crop never hides the first active position, so every example keeps at
    least one labelled position.
    """
    limits = []
    for ex in examples:
        lv = ex.hidden.shape[1]
        if rng is not None:
            _, lim = sample_crop(ex.gen_len, rng, ex.prompt_len)
            lim = max(lim, int(ex.label_pos.min()) + 1)
            lv = min(lv, lim)
        limits.append(lv)
    B, L = len(examples), max(limits)
    d = examples[0].hidden.shape[2]
    hid = np.zeros((B, 3, L, d), dtype=np.float32)
    aux = np.zeros((B, L, len(PositionState) + pos_dim), dtype=np.float32)
    pad = np.ones((B, L), dtype=bool)
    y = np.full((B, L), -1, dtype=np.int64)
    for b, (ex, lv) in enumerate(zip(examples, limits)):
        hid[b, :, :lv] = ex.hidden[:, :lv]
        aux[b, :lv] = aux_channels(ex.states[:lv], np.arange(lv), pos_dim)
        pad[b, :lv] = False
        keep = ex.label_pos < lv
        y[b, ex.label_pos[keep]] = ex.labels[keep]
    return torch.from_numpy(hid), torch.from_numpy(aux), torch.from_numpy(pad), torch.from_numpy(y)


def stability_metrics(m, y):
    m, y = np.asarray(m, dtype=np.float64), np.asarray(y, dtype=np.int64)
    pred = (m > 0).astype(np.int64)
    both = len(np.unique(y)) == 2
    return {
        "auroc": float(roc_auc_score(y, m)) if both else float("nan"),
        "ap": float(average_precision_score(y, m)) if both else float("nan"),
        "acc": float(np.mean(pred == y)),
        "f05": float(fbeta_score(y, pred, beta=0.5, zero_division=0.0)),
        "n": int(len(y)),
        "positive_rate": float(np.mean(y)),
    }


# --- estimator ---------------------------------------------------------------


class TraceLockController(BaseEstimator):
    """Learned commitment scorer; ``fit`` takes labelled traces with hidden snapshots."""

    def __init__(
        self,
        d_z=16,
        d_r=8,
        d_model=64,
        n_layers=2,
        n_heads=4,
        ff_dim=128,
        dropout=0.1,
        pos_dim=16,
        feature_set="full",
        k=4.0,
        lambda_tau=1e-3,
        lr=1e-4,
        weight_decay=0.01,
        grad_clip=1.0,
        seed=42,
        batch_size=32,
        steps=2000,
        val_every=250,
        val_fraction=0.1,
        crop=True,
    ):
        self.d_z = d_z
        self.d_r = d_r
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.ff_dim = ff_dim
        self.dropout = dropout
        self.pos_dim = pos_dim
        self.feature_set = feature_set
        self.k = k
        self.lambda_tau = lambda_tau
        self.lr = lr
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.seed = seed
        self.batch_size = batch_size
        self.steps = steps
        self.val_every = val_every
        self.val_fraction = val_fraction
        self.crop = crop

    def train_config(self):
        names = TrainConfig.__dataclass_fields__
        return TrainConfig(**{n: getattr(self, n) for n in names})

    def _build(self, d_hidden):
        torch.manual_seed(self.seed)
        self.d_hidden_ = d_hidden
        self.net_ = ControllerNet(
            d_hidden, self.d_z, self.d_r, self.d_model, self.n_layers, self.n_heads,
            self.ff_dim, self.dropout, self.pos_dim, self.feature_set,
        )
        self.net_.eval()
        self.report_ = {}
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("TraceLockController is not fitted")

    @property
    def compressor(self):
        self._check_fitted()
        return self.net_.compressor

    # -- training ---------------------------------------------------------------

    def fit(self, labeled_traces, warm_start=False, sampler=None):
        """Train on labelled traces.

        A held-out trace split is scored every ``val_every`` steps and the
        weights with the best validation F0.5 (decision rule ``m > 0``) are kept.
        ``sampler(rng, batch_size)`` may supply batches of StepExamples instead
        of uniform draws (used for mixed self-training pools).
        """
        cfg = self.train_config()
        rng = np.random.default_rng(cfg.seed)
        n_traces = len(labeled_traces)
        if n_traces < 2:
            raise ValidationError("need at least two labelled traces (train + validation)")
        order = rng.permutation(n_traces)
        n_val = max(1, int(round(cfg.val_fraction * n_traces)))
        val_idx = set(order[:n_val].tolist())
        train_traces = [lt for i, lt in enumerate(labeled_traces) if i not in val_idx]
        val_traces = [lt for i, lt in enumerate(labeled_traces) if i in val_idx]
        train = step_examples(train_traces)
        val = step_examples(val_traces)
        if not train or not val:
            raise ValidationError("no labelled steps with hidden snapshots in the pool")
        if not (warm_start and hasattr(self, "net_")):
            self._build(train[0].hidden.shape[2])
        torch.manual_seed(cfg.seed)
        opt = torch.optim.AdamW(self.net_.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        best = (-1.0, None, None)
        curve = []
        for step in range(cfg.steps):
            self.net_.train()
            if sampler is not None:
                batch = sampler(rng, cfg.batch_size)
            else:
                batch = [train[i] for i in rng.integers(0, len(train), size=cfg.batch_size)]
            hid, aux, pad, y = collate(batch, self.pos_dim, rng if cfg.crop else None)
            a, tau = self.net_(hid, aux, pad)
            m = a - tau[:, None]
            omega = y >= 0
            loss = dyn_loss(m[omega], y[omega], tau, cfg.k, cfg.lambda_tau)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"controller loss became {loss.item()} at step {step}")
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(self.net_.parameters(), cfg.grad_clip)
            opt.step()
            if step % 50 == 0:
                curve.append([step, round(float(loss.item()), 6)])
            if (step + 1) % cfg.val_every == 0 or step == cfg.steps - 1:
                metrics = self._evaluate_examples(val)
                log.debug("controller step %d val %s", step, metrics)
                if metrics["f05"] > best[0]:
                    best = (metrics["f05"], copy.deepcopy(self.net_.state_dict()), dict(metrics, step=step + 1))
        self.net_.load_state_dict(best[1])
        self.net_.eval()
        self.report_ = {"loss_curve": curve, "selected": best[2], "n_train_steps": len(train), "n_val_steps": len(val)}
        return self

    # -- inference ---------------------------------------------------------------

    @torch.no_grad()
    def _margins(self, examples, batch_size=256):
        self.net_.eval()
        ms, ys = [], []
        for start in range(0, len(examples), batch_size):
            hid, aux, pad, y = collate(examples[start : start + batch_size], self.pos_dim)
            a, tau = self.net_(hid, aux, pad)
            m = a - tau[:, None]
            omega = y >= 0
            ms.append(m[omega].numpy())
            ys.append(y[omega].numpy())
        return np.concatenate(ms), np.concatenate(ys)

    def _evaluate_examples(self, examples):
        return stability_metrics(*self._margins(examples))

    def decision_function(self, labeled_traces):
        """Margins and labels over every labelled (step, position) in the pool."""
        self._check_fitted()
        return self._margins(step_examples(labeled_traces))

    def evaluate(self, labeled_traces):
        self._check_fitted()
        return stability_metrics(*self.decision_function(labeled_traces))

    def score(self, frame):
        """Score one FeatureFrame: margins for its GEN positions."""
        self._check_fitted()
        if frame.q.shape[1] != self.net_.compressor.q_dim:
            raise ValidationError(
                f"frame feature width {frame.q.shape[1]} != controller {self.net_.compressor.q_dim}"
            )
        q = torch.from_numpy(np.ascontiguousarray(frame.q, dtype=np.float32))[None]
        aux = torch.from_numpy(np.ascontiguousarray(frame.aux, dtype=np.float32))[None]
        pad = torch.zeros((1, len(frame)), dtype=torch.bool)
        self.net_.eval()
        with torch.no_grad():
            a, tau = self.net_.forward_q(q, aux, pad)
        gen = frame.states == PositionState.GEN
        a = a[0].numpy().astype(np.float64)[gen]
        tau = float(tau[0])
        return ScoreOutput(positions=frame.positions[gen], a=a, tau=tau, m=a - tau)

    # -- persistence --------------------------------------------------------------

    def weights_digest(self):
        self._check_fitted()
        return checkpoint.weights_digest(self.net_)

    def save(self, path):
        self._check_fitted()
        meta = {
            "kind": "tracelock-controller",
            "params": self.get_params(),
            "d_hidden": self.d_hidden_,
            "report": self.report_,
        }
        return checkpoint.save(path, checkpoint.state_dict_to_numpy(self.net_), meta)

    @classmethod
    def load(cls, path):
        tensors, meta, _ = checkpoint.load(path)
        if meta.get("kind") != "tracelock-controller":
            raise CheckpointError(f"{path} is not a controller checkpoint")
        est = cls(**meta["params"])._build(meta["d_hidden"])
        checkpoint.load_numpy_state(est.net_, tensors)
        est.report_ = meta["report"]
        return est


# --- gradient check ---------------------------------------------------------------


def gradcheck(net, hid, aux, pad, y, k=4.0, lambda_tau=1e-3, eps=1e-4, labels_weight=1.0):
    """Max relative error between autograd and central finite differences of L_dyn.

    Runs in float64 on a copy of ``net`` with dropout off. The mispenalty
    weights are frozen at the base point. ``labels_weight=0`` keeps only the
    threshold regulariser.
    """
    net = copy.deepcopy(net).double().eval()
    hid, aux = hid.double(), aux.double()
    omega = y >= 0

    a0, tau0 = net(hid, aux, pad)
    m0 = (a0 - tau0[:, None])[omega].detach()
    w = mispenalty_weights(m0, y[omega], k)

    def loss_fn():
        a, tau = net(hid, aux, pad)
        m = (a - tau[:, None])[omega]
        bce = F.binary_cross_entropy_with_logits(m, y[omega].double(), reduction="none")
        return labels_weight * (w * bce).mean() + lambda_tau * (tau**2).mean()

    params = [p for p in net.parameters() if p.requires_grad]
    net.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in params]
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat, gflat = p.view(-1), g.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                up = loss_fn().item()
                flat[j] = orig - eps
                down = loss_fn().item()
                flat[j] = orig
                fd = (up - down) / (2 * eps)
                denom = max(abs(fd), abs(gflat[j].item()), 1e-6)
                worst = max(worst, abs(fd - gflat[j].item()) / denom)
    return worst
