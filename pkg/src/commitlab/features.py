"""Per-position trace-state features and training-time prefix cropping.

Three late hidden snapshots ``h1, h2, h3`` and the two deltas ``h2 - h1`` and
``h3 - h2`` are linearly compressed (``E_h`` for snapshots, ``E_delta`` for
deltas), concatenated, and joined with state one-hots and a sinusoidal position
encoding before the controller's input projection.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ._validation import ValidationError, check_positive_int
from .nn import sinusoidal_encoding
from .trace import PositionState

FEATURE_SETS = {
    "full": ("h1", "h2", "h3", "d1", "d2"),
    "hiddens": ("h1", "h2", "h3"),
    "deltas": ("d1", "d2"),
    "last": ("h3",),
}
N_STATES = len(PositionState)
CROP_RANGE = (0.25, 1.0)


@dataclass(frozen=True, eq=False)
class FeatureFrame:
    """Features for the visible prefix of one decoding step.

    ``q`` is the concatenation of the selected compressed channels, shape
    (n_visible, q_dim); ``aux`` holds state one-hots and the position encoding.
    """

    q: np.ndarray
    aux: np.ndarray
    states: np.ndarray
    positions: np.ndarray
    step: int

    def __post_init__(self):
        if not (len(self.q) == len(self.aux) == len(self.states) == len(self.positions)):
            raise ValidationError("feature frame channels disagree on length")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.aux))):
            raise ValidationError("feature frame contains non-finite values")

    def __len__(self):
        return len(self.states)

    def gen_positions(self):
        return self.positions[self.states == PositionState.GEN]


class Compressor(nn.Module):
    """Linear snapshot/delta compressors and the projection into controller width."""

    def __init__(self, d_hidden, d_z=16, d_r=8, d_model=64, pos_dim=16, feature_set="full", bias=False):
        super().__init__()
        if feature_set not in FEATURE_SETS:
            raise ValidationError(f"unknown feature set {feature_set!r}; choose from {sorted(FEATURE_SETS)}")
        self.feature_set = feature_set
        self.channels = FEATURE_SETS[feature_set]
        self.pos_dim = pos_dim
        self.E_h = nn.Linear(d_hidden, d_z, bias=bias)
        self.E_delta = nn.Linear(d_hidden, d_r, bias=bias)
        self.q_dim = sum(d_z if c.startswith("h") else d_r for c in self.channels)
        self.aux_dim = N_STATES + pos_dim
        self.proj = nn.Linear(self.q_dim + self.aux_dim, d_model)

    def compress(self, hiddens):
        """``hiddens``: (..., 3, L, d) -> q: (..., L, q_dim)."""
        h1, h2, h3 = hiddens.unbind(dim=-3)
        parts = {"h1": h1, "h2": h2, "h3": h3, "d1": h2 - h1, "d2": h3 - h2}
        out = [self.E_h(parts[c]) if c.startswith("h") else self.E_delta(parts[c]) for c in self.channels]
        return torch.cat(out, dim=-1)

    def project(self, q, aux):
        return self.proj(torch.cat([q, aux], dim=-1))


def aux_channels(states, positions, pos_dim):
    """State one-hot and sinusoidal absolute-position encoding, (L, 4 + pos_dim)."""
    states = np.asarray(states, dtype=np.int64)
    onehot = np.zeros((len(states), N_STATES), dtype=np.float32)
    onehot[np.arange(len(states)), states] = 1.0
    pos = sinusoidal_encoding(np.asarray(positions), pos_dim).numpy().astype(np.float32)
    return np.concatenate([onehot, pos], axis=1)


def build_features(output, state, compressor, snapshot_mode="layers"):
    """FeatureFrame for the positions below ``output.visible_limit``."""
    if snapshot_mode != "layers":
        # TODO(step-snapshots): recent-step snapshots need a per-position history buffer in decode()
        raise NotImplementedError("only layer snapshots are implemented")
    if output.hiddens.shape[0] < 3:
        raise ValidationError("need at least three hidden snapshots")
    limit = output.visible_limit
    hiddens = torch.from_numpy(np.ascontiguousarray(output.hiddens[-3:, :limit]))
    return frame_from_hiddens(hiddens, state.states[:limit], state.step, compressor)


def frame_from_hiddens(hiddens, states, step, compressor):
    p = next(compressor.parameters())
    with torch.no_grad():
        q = compressor.compress(torch.as_tensor(hiddens, dtype=p.dtype)).numpy()
    positions = np.arange(len(states))
    return FeatureFrame(
        q=q,
        aux=aux_channels(states, positions, compressor.pos_dim),
        states=np.asarray(states, dtype=np.int8),
        positions=positions,
        step=int(step),
    )


def round_half_away(x):
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def prefix_crop(N, r, prompt_len=0):
    """Visible generation prefix ``K = round(r*N)`` (at least 1) and limit ``prompt_len + K``."""
    N = check_positive_int(N, "N")
    lo, hi = CROP_RANGE
    if not lo <= r <= hi:
        raise ValidationError(f"crop ratio {r} outside [{lo}, {hi}]")
    K = min(N, max(1, round_half_away(r * N)))
    return K, prompt_len + K


def sample_crop(N, rng, prompt_len=0):
    r = rng.uniform(*CROP_RANGE)
    return prefix_crop(N, r, prompt_len)
