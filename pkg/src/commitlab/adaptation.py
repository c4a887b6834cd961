"""Controller adaptation: on-policy self-training and group-relative policy gradient."""

import copy
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from ._validation import ValidationError, check_probability
from .backbone import propose
from .controller import step_examples
from .features import aux_channels
from .policies import DecodeConfig, TraceLockPolicy, active_window, decode_many
from .trace import CompletedTrace, StepRecord, apply_commits, filter_trace, label_future_stability, new_sequence_state

log = logging.getLogger(__name__)


# --- self-training ------------------------------------------------------------------


def collect_self_traces(backbone, controller, prompts, task, window=8, op_threshold=0.98, seed=0, rules=None):
    """Decode with the controller itself, filter, and label against each trace's own final sequence.

    Returns ``(labeled_traces, all_traces)``.
    """
    policy = TraceLockPolicy(controller, window=window, op_threshold=op_threshold)
    config = DecodeConfig(gen_len=task.gen_len, seed=seed, record_hidden=True, task=task.name)
    traces = decode_many(backbone, policy, prompts, config)
    rules = rules if rules is not None else task.filter_config()
    kept = [label_future_stability(t) for t in traces if filter_trace(t, rules).accepted]
    return kept, traces


class MixedPool:
    """Draws each item from the self pool with probability ``alpha``, else from the pretraining pool."""

    def __init__(self, self_items, pre_items, alpha):
        self.alpha = check_probability(alpha, "alpha")
        self.self_items = list(self_items)
        self.pre_items = list(pre_items)
        if self.alpha > 0 and not self.self_items:
            raise ValidationError("alpha > 0 needs a non-empty self pool")
        if self.alpha < 1 and not self.pre_items:
            raise ValidationError("alpha < 1 needs a non-empty pretraining pool")

    def draw(self, rng):
        """One ``(source, item)`` pair; ``source`` is ``"self"`` or ``"pre"``."""
        if rng.random() < self.alpha:
            return "self", self.self_items[rng.integers(len(self.self_items))]
        return "pre", self.pre_items[rng.integers(len(self.pre_items))]

    def sample(self, rng, n):
        return [self.draw(rng)[1] for _ in range(n)]


def mix_pools(d_self, d_pre, alpha):
    return MixedPool(d_self, d_pre, alpha)


def self_train(controller, backbone, prompts, pre_pool, task, window=8, op_threshold=0.98,
               alpha=0.5, steps=500, seed=0):
    """Warm-started fine-tune of a copy of ``controller`` on a mixed on-policy/pretraining pool."""
    d_self, _ = collect_self_traces(backbone, controller, prompts, task, window, op_threshold, seed)
    if not d_self:
        raise ValidationError("self-training collected no usable traces")
    pool = mix_pools(step_examples(d_self), step_examples(pre_pool), alpha)
    tuned = copy.deepcopy(controller)
    tuned.set_params(steps=steps)
    tuned.fit(list(d_self) + list(pre_pool), warm_start=True, sampler=pool.sample)
    return tuned, d_self


# --- reinforcement learning ---------------------------------------------------------


def rl_rescale(p, eta_sample=0.9, eps=1e-3):
    """``clip((p - eta) / (1 - eta), eps, 1 - eps)``; works on floats, arrays and tensors."""
    if isinstance(p, torch.Tensor):
        return torch.clamp((p - eta_sample) / (1 - eta_sample), eps, 1 - eps)
    return np.clip((np.asarray(p, dtype=np.float64) - eta_sample) / (1 - eta_sample), eps, 1 - eps)


def adjust_code_reward(reward, group_mean, verdict):
    """Subtract ``|mean|`` for syntax errors and ``|mean|/2`` for runtime errors or timeouts."""
    if verdict == "syntax_error":
        return reward - abs(group_mean)
    if verdict in ("runtime_error", "timeout"):
        return reward - 0.5 * abs(group_mean)
    if verdict == "ok":
        return reward
    raise ValidationError(f"unknown verdict {verdict!r}")


@dataclass(frozen=True, eq=False)
class GroupAdvantage:
    rewards: np.ndarray
    mean: float
    std: float
    advantages: np.ndarray


def group_advantages(rewards, eps=1e-8):
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValidationError("a group needs at least two rollouts")
    mu = float(r.mean())
    sigma = float(r.std())  # population std
    return GroupAdvantage(rewards=r, mean=mu, std=sigma, advantages=(r - mu) / (sigma + eps))


@dataclass(frozen=True)
class RLConfig:
    group_size: int = 4
    eta_sample: float = 0.9
    eps_clip: float = 1e-3
    beta: float = 0.01
    lr: float = 1e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    updates: int = 200
    window: int = 8
    max_resample: int = 3
    seed: int = 0


@dataclass(frozen=True, eq=False)
class Observation:
    hidden: np.ndarray  # (3, Lv, d)
    states: np.ndarray  # (Lv,)
    eligible: np.ndarray


@dataclass(eq=False)
class RlRollout:
    steps: list = field(default_factory=list)  # dicts: obs, actions, logp, fallback
    reward: float = 0.0
    verdict: str = "ok"
    group: int = 0
    final: np.ndarray = None
    trace: object = None  # CompletedTrace with an ``rl`` block, when the env records one

    @property
    def total_logp(self):
        return float(sum(s["logp"] for s in self.steps))

    def to_record(self):
        return {
            "group": self.group,
            "reward": self.reward,
            "verdict": self.verdict,
            "actions": [[int(p) for p, u in zip(s["obs"].eligible, s["actions"]) if u] for s in self.steps],
            "logp": [s["logp"] for s in self.steps],
        }


class DecodeEpisode:
    """One TraceLock-window decode driven by externally sampled commits."""

    def __init__(self, backbone, task, prompt, window):
        self.backbone, self.task, self.prompt, self.window = backbone, task, prompt, window
        self.state = new_sequence_state(prompt, task.gen_len, backbone.vocab)
        self.records = []
        self._last = None

    def observe(self):
        if self.state.done:
            return None
        win = active_window(self.state, self.window)
        limit = win.end + 1
        out = self.backbone.forward(self.state, limit)
        gen = self.state.gen_positions()
        pos, tok, conf = propose(out, gen[gen < limit])
        self._last = (pos, tok, conf, limit)
        return Observation(hidden=out.hiddens[-3:, :limit], states=self.state.states[:limit], eligible=pos)

    def commit(self, positions):
        pos, tok, conf, limit = self._last
        self.records.append(
            StepRecord(
                step=self.state.step, positions=pos, candidates=tok, confidences=conf,
                committed=np.asarray(positions, dtype=np.int64), visible_limit=limit,
            )
        )
        self.state = apply_commits(self.state, positions, dict(zip(pos.tolist(), tok.tolist())))

    def to_trace(self, rl_block):
        return CompletedTrace(
            prompt=self.prompt, final=self.state.tokens[self.state.prompt_len :], steps=self.records,
            vocab=self.backbone.vocab, policy="tracelock-rl", backbone=self.backbone.tag,
            task=self.task.name, seed=0, truncated=not self.state.done, rl=rl_block,
        )

    def outcome(self):
        final = self.state.tokens[self.state.prompt_len :]
        ans = final[: np.flatnonzero(final == self.task.vocab.eot_id)[0]] if np.any(final == self.task.vocab.eot_id) else final
        return self.task.reward(self.prompt, final), self.task.verdict(self.prompt, ans), final


class DecodeEnv:
    def __init__(self, backbone, task, window=8):
        self.backbone, self.task, self.window = backbone, task, window

    def episode(self, prompt):
        return DecodeEpisode(self.backbone, self.task, prompt, self.window)


def _step_probs(net, obs, pos_dim, cfg):
    """Rescaled Bernoulli parameters at the eligible positions (differentiable)."""
    hid = torch.from_numpy(np.ascontiguousarray(obs.hidden, dtype=np.float32))[None]
    aux = torch.from_numpy(aux_channels(obs.states, np.arange(len(obs.states)), pos_dim))[None]
    pad = torch.zeros((1, len(obs.states)), dtype=torch.bool)
    a, tau = net(hid, aux, pad)
    m = a[0, torch.as_tensor(obs.eligible)] - tau[0]
    return rl_rescale(torch.sigmoid(m), cfg.eta_sample, cfg.eps_clip)


def _bernoulli_logp(p, u):
    return (u * torch.log(p) + (1 - u) * torch.log1p(-p)).sum()


def _entropy(p, cfg):
    inside = (p > cfg.eps_clip) & (p < 1 - cfg.eps_clip)
    h = -(p * torch.log(p) + (1 - p) * torch.log1p(-p))
    return (h * inside).sum()


def rl_rollout(env, controller, prompt, cfg, rng, max_steps=None):
    net = controller.net_
    net.eval()
    episode = env.episode(prompt)
    rollout = RlRollout()
    n = 0
    while (obs := episode.observe()) is not None:
        if max_steps is not None and n >= max_steps:
            break
        with torch.no_grad():
            p = _step_probs(net, obs, controller.pos_dim, cfg)
        pn = p.numpy().astype(np.float64)
        u = (rng.random(pn.size) < pn).astype(np.float64)
        with torch.no_grad():
            logp = float(_bernoulli_logp(p, torch.from_numpy(u).to(p.dtype)))
        chosen = obs.eligible[u > 0]
        fallback = chosen.size == 0
        if fallback:
            chosen = obs.eligible[[int(np.argmax(pn))]]
        episode.commit(chosen.tolist())
        rollout.steps.append({"obs": obs, "actions": u, "logp": logp, "fallback": fallback})
        n += 1
    rollout.reward, rollout.verdict, rollout.final = episode.outcome()
    if hasattr(episode, "to_trace"):
        rollout.trace = episode.to_trace(rollout.to_record())
    return rollout


def reevaluate_logp(controller, rollout, cfg):
    """Recompute the summed log-probability of the stored actions."""
    net = controller.net_
    net.eval()
    with torch.no_grad():
        total = 0.0
        for s in rollout.steps:
            p = _step_probs(net, s["obs"], controller.pos_dim, cfg)
            total += float(_bernoulli_logp(p, torch.from_numpy(s["actions"]).to(p.dtype)))
    return total


def policy_loss(controller, group, advantages, cfg):
    """Mean over the group of ``-A_j * sum_t log pi - beta * sum_t H_t``."""
    net = controller.net_
    losses = []
    for rollout, adv in zip(group, advantages):
        logp = 0.0
        ent = 0.0
        for s in rollout.steps:
            p = _step_probs(net, s["obs"], controller.pos_dim, cfg)
            logp = logp + _bernoulli_logp(p, torch.from_numpy(s["actions"]).to(p.dtype))
            ent = ent + _entropy(p, cfg)
        losses.append(-float(adv) * logp - cfg.beta * ent)
    return torch.stack([torch.as_tensor(x) for x in losses]).mean()


def rl_train(controller, env, prompts, cfg=RLConfig(), code_rewards=None, max_steps=None, writer=None):
    """Refine a copy of a supervised controller with group-relative REINFORCE.

    Each update draws ``group_size`` rollouts for one prompt. When
    ``code_rewards`` is true (default: the env task has verdicts) rewards are
    penalised by verdict against the pre-adjustment group mean. Rollout traces
    go to ``writer`` (a TraceWriter) when given.
    Returns ``(controller, history)``.
    """
    if not prompts:
        raise ValidationError("rl_train needs at least one prompt")
    tuned = copy.deepcopy(controller)
    net = tuned.net_
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    if code_rewards is None:
        code_rewards = getattr(getattr(env, "task", None), "kind", None) is not None and env.task.kind.value == "brackets"
    history = []
    for update in range(cfg.updates):
        prompt = prompts[update % len(prompts)]
        group = []
        attempts = 0
        while len(group) < cfg.group_size:
            try:
                rollout = rl_rollout(env, tuned, prompt, cfg, rng, max_steps)
            except Exception as exc:  # reward or environment failure: discard and resample
                attempts += 1
                log.warning("rollout discarded: %s", exc)
                if attempts > cfg.max_resample * cfg.group_size:
                    raise
                continue
            rollout.group = update
            group.append(rollout)
        rewards = np.array([r.reward for r in group])
        if code_rewards:
            mean = float(rewards.mean())
            rewards = np.array([adjust_code_reward(r.reward, mean, r.verdict) for r in group])
        adv = group_advantages(rewards).advantages
        if writer is not None:
            for r, a in zip(group, adv):
                if r.trace is not None:
                    writer.append(dataclasses.replace(r.trace, rl=dict(r.to_record(), advantage=float(a))))
        # eval mode: the gradient is taken through the same (dropout-free) policy that sampled
        loss = policy_loss(tuned, group, adv, cfg)
        opt.zero_grad()
        if loss.requires_grad:
            loss.backward()
            nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
            opt.step()
        history.append({"update": update, "mean_reward": float(np.mean([r.reward for r in group])), "loss": float(loss.detach())})
    return tuned, history
