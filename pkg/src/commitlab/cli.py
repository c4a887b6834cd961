"""Command-line entry point: ``commitlab <subcommand> --out DIR [options]``.

Every subcommand writes its artifacts plus ``manifest.json`` (effective config,
input digests, output digests, library versions) under ``--out``. Options can
also come from an INI-style ``--config`` file (section ``[commitlab]``) or from
a previous run's ``--manifest``; flags given on the command line win.
Failures exit nonzero and print a one-line JSON error record to stderr.
"""

import argparse
import configparser
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from ._validation import CheckpointError, TraceFormatError, ValidationError
from .adaptation import DecodeEnv, RLConfig, rl_train, self_train
from .backbone import MaskedLMBackbone, ProgrammaticBackbone
from .bench import (
    DIVERGENCE_COLUMNS,
    METRIC_COLUMNS,
    eval_suite,
    fubini,
    mean_divergence,
    oracle_enumerate,
    plot_frontier,
    write_csv,
)
from .controller import TraceLockController
from .policies import (
    BlockFilter,
    BlockPolicy,
    DecodeConfig,
    PolicyKind,
    TraceLockPolicy,
    decode_many,
    parse_policy,
)
from .tasks import load_corpus, make_task, parse_task_args, save_corpus, synth_corpus
from .trace import LabeledTrace, TraceWriter, filter_trace, label_future_stability, read_traces, write_traces

log = logging.getLogger("commitlab")

EXIT_USAGE, EXIT_INPUT, EXIT_FORMAT, EXIT_RUNTIME = 2, 3, 4, 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# name -> (type, default, help); ``None`` default means "required by the subcommand when used"
OPTIONS = {
    "task": (str, "modchain", "task preset (copysort, modchain, brackets)"),
    "task_args": (str, "", "task preset overrides, e.g. payload_len=3 or chain_len=3-4"),
    "gen_len": (int, None, "generation length N (defaults to the task preset)"),
    "n": (int, None, "alias of --gen-len"),
    "n_samples": (int, 20000, "corpus size"),
    "corpus": (str, None, "corpus file (line records)"),
    "steps": (int, 1500, "optimizer steps"),
    "backbone": (str, None, "backbone checkpoint, or programmatic:<task>"),
    "controller": (str, None, "controller checkpoint"),
    "filter": (str, None, "learned block-filter checkpoint (l2p policy)"),
    "policy": (str, "confidence", "random, confidence, threshold, l2p or tracelock"),
    "window": (int, 8, "TraceLock soft-crop window"),
    "block": (int, 8, "block size for the block policies"),
    "threshold": (float, None, "policy threshold (operating threshold for tracelock)"),
    "n_prompts": (int, 200, "number of prompts"),
    "prompt_seed": (int, None, "seed for prompt sampling (defaults to --seed)"),
    "record_hidden": (int, 0, "store hidden snapshots in the trace sidecar (0/1)"),
    "traces": (str, None, "trace file"),
    "traces_b": (str, None, "second trace file (diverge)"),
    "labels": (str, None, "labels file written by 'label'"),
    "kind": (str, "tracelock", "what train-controller fits: tracelock or l2p"),
    "feature_set": (str, "full", "controller feature set"),
    "lr": (float, None, "learning rate"),
    "alpha": (float, 0.5, "self-training mixing weight"),
    "updates": (int, 200, "RL updates"),
    "group_size": (int, 4, "RL group size"),
    "stride": (int, 16, "divergence probe stride"),
    "plot": (int, 1, "write the frontier SVG (0/1)"),
    "seed": (int, 0, "random seed"),
}

SUBCOMMANDS = {
    "gen-data": ("task", "task_args", "gen_len", "n", "n_samples", "seed"),
    "train-backbone": ("corpus", "task", "task_args", "gen_len", "n", "steps", "lr", "seed"),
    "collect-traces": ("backbone", "task_args", "controller", "filter", "policy", "window", "block", "threshold",
                       "gen_len", "n", "n_prompts", "prompt_seed", "record_hidden", "seed"),
    "label": ("traces", "seed"),
    "train-controller": ("traces", "labels", "kind", "block", "feature_set", "steps", "lr", "seed"),
    "self-train": ("backbone", "task_args", "controller", "traces", "labels", "window", "threshold", "alpha",
                   "steps", "n_prompts", "prompt_seed", "seed"),
    "rl-train": ("backbone", "task_args", "controller", "window", "updates", "group_size", "lr", "n_prompts",
                 "prompt_seed", "seed"),
    "decode": ("backbone", "task_args", "controller", "filter", "policy", "window", "block", "threshold", "gen_len",
               "n", "n_prompts", "prompt_seed", "record_hidden", "seed"),
    "bench": ("backbone", "task_args", "controller", "filter", "policy", "window", "block", "threshold", "gen_len",
              "n", "n_prompts", "prompt_seed", "traces", "plot", "seed"),
    "oracle": ("backbone", "task_args", "policy", "controller", "filter", "window", "block", "threshold", "gen_len",
               "n", "n_prompts", "prompt_seed", "seed"),
    "diverge": ("traces", "traces_b", "stride", "seed"),
}


def build_parser():
    parser = _Parser(prog="commitlab", description="Learned token-commitment lab for masked-diffusion decoding.")
    parser.add_argument("--version", action="version", version=f"commitlab {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    for name, opts in SUBCOMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="INI file with a [commitlab] section")
        p.add_argument("--manifest", help="reuse the config snapshot of a previous run")
        p.add_argument("-v", "--verbose", action="count", default=0)
        for opt in opts:
            typ, default, help_ = OPTIONS[opt]
            p.add_argument("--" + opt.replace("_", "-"), dest=opt, type=typ, default=argparse.SUPPRESS,
                           help=f"{help_} (default: {default})")
    return parser


def resolve_config(args):
    """Defaults < manifest < config file < flags."""
    opts = SUBCOMMANDS[args.subcommand]
    cfg = {o: OPTIONS[o][1] for o in opts}
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        if manifest.get("subcommand") != args.subcommand:
            raise ValidationError(f"manifest is for {manifest.get('subcommand')!r}, not {args.subcommand!r}")
        cfg.update({k: v for k, v in manifest["config"].items() if k in cfg})
    if args.config:
        parser = configparser.ConfigParser()
        if not parser.read(args.config, encoding="utf-8"):
            raise FileNotFoundError(args.config)
        section = parser["commitlab"] if parser.has_section("commitlab") else {}
        for key, raw in section.items():
            key = key.replace("-", "_")
            if key not in OPTIONS:
                raise UsageError(f"unknown config key {key!r}")
            if key in cfg:
                cfg[key] = OPTIONS[key][0](raw)
    for o in opts:
        if hasattr(args, o):
            cfg[o] = getattr(args, o)
    if cfg.get("n") is not None:
        cfg["gen_len"] = cfg["n"]
    for key in ("backbone", "controller", "filter", "corpus", "traces", "traces_b", "labels"):
        if cfg.get(key) and not cfg[key].startswith("programmatic:"):
            cfg[key] = str(Path(cfg[key]).resolve())
    return cfg


# --- helpers ----------------------------------------------------------------------


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import sklearn

    return {
        "commitlab": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "scikit-learn": sklearn.__version__,
    }


def _require(cfg, key):
    if not cfg.get(key):
        raise UsageError(f"--{key.replace('_', '-')} is required")
    path = cfg[key]
    if not path.startswith("programmatic:") and not Path(path).exists():
        raise FileNotFoundError(f"missing {key} file: {path}")
    return path


def _load_backbone(cfg):
    spec = _require(cfg, "backbone")
    if spec.startswith("programmatic:"):
        return ProgrammaticBackbone(make_task(spec.split(":", 1)[1], **parse_task_args(cfg.get("task_args"))))
    return MaskedLMBackbone.load(spec)


def _task(cfg, backbone):
    task = backbone.task if isinstance(backbone, ProgrammaticBackbone) else backbone.task_
    if cfg.get("gen_len"):
        task = task.with_gen_len(cfg["gen_len"])
    return task


def _prompts(cfg, task):
    seed = cfg["prompt_seed"] if cfg.get("prompt_seed") is not None else cfg["seed"]
    rng = np.random.default_rng(seed)
    return [task.sample_prompt(rng) for _ in range(cfg["n_prompts"])]


def _policy(cfg):
    kind = parse_policy(cfg["policy"])
    if kind is PolicyKind.TRACELOCK:
        ctrl = TraceLockController.load(_require(cfg, "controller"))
        op = cfg["threshold"] if cfg.get("threshold") is not None else 0.95
        return TraceLockPolicy(ctrl, window=cfg["window"], op_threshold=op), cfg["window"]
    block_filter = BlockFilter.load(_require(cfg, "filter")) if kind is PolicyKind.L2P else None
    return BlockPolicy(kind, cfg["block"], cfg.get("threshold"), block_filter), cfg["block"]


def _read_labeled(traces_path, labels_path):
    traces = {t.trace_id: t for t in read_traces(traces_path)}
    out = []
    for lineno, line in enumerate(Path(labels_path).read_text(encoding="utf-8").splitlines(), 1):
        rec = json.loads(line)
        if rec.get("v") != 1:
            raise TraceFormatError(f"unsupported labels schema {rec.get('v')!r}", lineno, 0)
        tr = traces.get(rec["trace_id"])
        if tr is None:
            raise TraceFormatError(f"labels refer to unknown trace {rec['trace_id']}", lineno, 0)
        out.append(LabeledTrace(tr, tuple(np.array(l, dtype=bool) for l in rec["labels"])))
    return out


def _decode(cfg):
    backbone = _load_backbone(cfg)
    task = _task(cfg, backbone)
    policy, size = _policy(cfg)
    config = DecodeConfig(gen_len=task.gen_len, seed=cfg["seed"], record_hidden=bool(cfg.get("record_hidden")),
                          task=task.name)
    return backbone, task, policy, size, decode_many(backbone, policy, _prompts(cfg, task), config)


# --- subcommands ----------------------------------------------------------------------


def cmd_gen_data(cfg, out):
    task = make_task(cfg["task"], cfg.get("gen_len"), **parse_task_args(cfg.get("task_args")))
    corpus = synth_corpus(task, cfg["n_samples"], cfg["seed"])
    save_corpus(out / "corpus.jsonl", corpus)
    return {"corpus_digest": corpus.digest()}


def cmd_train_backbone(cfg, out):
    task = make_task(cfg["task"], cfg.get("gen_len"), **parse_task_args(cfg.get("task_args")))
    corpus = load_corpus(_require(cfg, "corpus"), task)
    params = {"seed": cfg["seed"]}
    if cfg.get("lr") is not None:
        params["lr"] = cfg["lr"]
    bb = MaskedLMBackbone(**params).fit(corpus, steps=cfg["steps"])
    bb.save(out / "backbone.ckpt")
    return {"tag": bb.tag, "final_loss": bb.history_[-1][1] if bb.history_ else None}


def cmd_collect_traces(cfg, out):
    cfg = dict(cfg, record_hidden=1)
    _, _, _, _, traces = _decode(cfg)
    write_traces(out / "traces.jsonl", traces)
    return {"n_traces": len(traces)}


def cmd_decode(cfg, out):
    _, _, _, _, traces = _decode(cfg)
    write_traces(out / "traces.jsonl", traces)
    return {"n_traces": len(traces)}


def cmd_label(cfg, out):
    traces = read_traces(_require(cfg, "traces"))
    reasons = {}
    with open(out / "labels.jsonl", "w", encoding="utf-8", newline="\n") as f:
        for tr in traces:
            verdict = filter_trace(tr, make_task(tr.task).filter_config())
            reasons[verdict.reason] = reasons.get(verdict.reason, 0) + 1
            if not verdict.accepted:
                continue
            lt = label_future_stability(tr)
            rec = {"v": 1, "trace_id": tr.trace_id, "labels": [l.astype(int).tolist() for l in lt.labels]}
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")
    return {"filter": dict(sorted(reasons.items()))}


def cmd_train_controller(cfg, out):
    labeled = _read_labeled(_require(cfg, "traces"), _require(cfg, "labels"))
    if cfg["kind"] == "l2p":
        params = {"block_size": cfg["block"], "seed": cfg["seed"], "steps": cfg["steps"]}
        if cfg.get("lr") is not None:
            params["lr"] = cfg["lr"]
        BlockFilter(**params).fit(labeled).save(out / "filter.ckpt")
        return {"kind": "l2p"}
    if cfg["kind"] != "tracelock":
        raise UsageError(f"--kind must be tracelock or l2p, got {cfg['kind']!r}")
    params = {"seed": cfg["seed"], "steps": cfg["steps"], "feature_set": cfg["feature_set"]}
    if cfg.get("lr") is not None:
        params["lr"] = cfg["lr"]
    ctrl = TraceLockController(**params).fit(labeled)
    ctrl.save(out / "controller.ckpt")
    (out / "report.json").write_text(json.dumps(ctrl.report_, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return {"selected": ctrl.report_["selected"]}


def cmd_self_train(cfg, out):
    backbone = _load_backbone(cfg)
    task = _task(cfg, backbone)
    ctrl = TraceLockController.load(_require(cfg, "controller"))
    pre = _read_labeled(_require(cfg, "traces"), _require(cfg, "labels"))
    op = cfg["threshold"] if cfg.get("threshold") is not None else 0.98
    tuned, d_self = self_train(ctrl, backbone, _prompts(cfg, task), pre, task, window=cfg["window"],
                               op_threshold=op, alpha=cfg["alpha"], steps=cfg["steps"], seed=cfg["seed"])
    write_traces(out / "self_traces.jsonl", [lt.trace for lt in d_self])
    tuned.save(out / "controller.ckpt")
    return {"n_self_traces": len(d_self)}


def cmd_rl_train(cfg, out):
    backbone = _load_backbone(cfg)
    task = _task(cfg, backbone)
    ctrl = TraceLockController.load(_require(cfg, "controller"))
    params = {"updates": cfg["updates"], "group_size": cfg["group_size"], "window": cfg["window"], "seed": cfg["seed"]}
    if cfg.get("lr") is not None:
        params["lr"] = cfg["lr"]
    rl_cfg = RLConfig(**params)
    with TraceWriter(out / "rollouts.jsonl") as writer:
        tuned, history = rl_train(ctrl, DecodeEnv(backbone, task, cfg["window"]), _prompts(cfg, task), rl_cfg,
                                  writer=writer)
    tuned.save(out / "controller.ckpt")
    return {"final_mean_reward": history[-1]["mean_reward"] if history else None}


def cmd_bench(cfg, out):
    if cfg.get("traces"):
        traces = read_traces(_require(cfg, "traces"))
        task = make_task(traces[0].task, traces[0].gen_len, **parse_task_args(cfg.get("task_args")))
        size = cfg["window"] if traces[0].policy == "tracelock" else cfg["block"]
    else:
        _, task, _, size, traces = _decode(cfg)
    rows = eval_suite(traces, task, size)
    write_csv(out / "metrics.csv", rows, METRIC_COLUMNS)
    if cfg.get("plot"):
        plot_frontier(out / "frontier.svg", rows, title=task.name)
    return {"rows": len(rows)}


def cmd_oracle(cfg, out):
    backbone = _load_backbone(cfg)
    task = _task(cfg, backbone)
    if task.gen_len > 6:
        raise UsageError("oracle enumeration needs --n <= 6")
    policy, _ = _policy(cfg)
    config = DecodeConfig(gen_len=task.gen_len, seed=cfg["seed"], task=task.name)
    traces = decode_many(backbone, policy, _prompts(cfg, task), config)
    lines = ["prompt,policy_steps,oracle_min_steps,schedules,matching,complete"]
    for i, tr in enumerate(traces):
        fr = oracle_enumerate(backbone, tr.prompt, task.gen_len, tr.final)
        lines.append(f"{i},{tr.executed_steps},{fr.min_steps},{fr.enumerated},{fr.matching},{int(fr.complete)}")
    (out / "oracle.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"fubini": fubini(task.gen_len)}


def cmd_diverge(cfg, out):
    a = read_traces(_require(cfg, "traces"))
    b = {tuple(t.prompt.tolist()): t for t in read_traces(_require(cfg, "traces_b"))}
    pairs = []
    for tr in a:
        other = b.get(tuple(tr.prompt.tolist()))
        if other is None:
            raise ValidationError(f"no trace for the prompt of {tr.trace_id} in the second file")
        pairs.append((tr, other))
    rows = mean_divergence(pairs, cfg["stride"])
    write_csv(out / "divergence.csv", rows, DIVERGENCE_COLUMNS)
    return {"pairs": len(pairs)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-backbone": cmd_train_backbone,
    "collect-traces": cmd_collect_traces,
    "label": cmd_label,
    "train-controller": cmd_train_controller,
    "self-train": cmd_self_train,
    "rl-train": cmd_rl_train,
    "decode": cmd_decode,
    "bench": cmd_bench,
    "oracle": cmd_oracle,
    "diverge": cmd_diverge,
}


def _write_manifest(out, subcommand, cfg, summary):
    inputs = {}
    for key in ("backbone", "controller", "filter", "corpus", "traces", "traces_b", "labels"):
        path = cfg.get(key)
        if path and not path.startswith("programmatic:"):
            inputs[key] = {"path": path, "sha256": file_digest(path)}
    outputs = {p.name: file_digest(p) for p in sorted(out.iterdir()) if p.is_file() and p.name != "manifest.json"}
    manifest = {
        "schema": 1,
        "subcommand": subcommand,
        "config": cfg,
        "inputs": inputs,
        "outputs": outputs,
        "summary": summary,
        "versions": _versions(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _error(kind, message, code, subcommand=None):
    rec = {"error": kind, "message": message, "exit_code": code}
    if subcommand:
        rec["subcommand"] = subcommand
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _error("usage", str(exc), EXIT_USAGE)
    verbosity = args.verbose or int(os.environ.get("COMMITLAB_VERBOSE", "0") or 0)
    logging.basicConfig(level=logging.DEBUG if verbosity > 1 else logging.INFO if verbosity else logging.WARNING)
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(cfg["seed"])
        summary = COMMANDS[args.subcommand](cfg, out)
        _write_manifest(out, args.subcommand, cfg, summary)
    except UsageError as exc:
        return _error("usage", str(exc), EXIT_USAGE, args.subcommand)
    except ValidationError as exc:
        return _error("validation", str(exc), EXIT_USAGE, args.subcommand)
    except (FileNotFoundError, CheckpointError) as exc:
        return _error("input", str(exc), EXIT_INPUT, args.subcommand)
    except TraceFormatError as exc:
        return _error("format", str(exc), EXIT_FORMAT, args.subcommand)
    except Exception as exc:  # noqa: BLE001 - surface everything as a record
        log.debug("unhandled error", exc_info=True)
        return _error(type(exc).__name__, str(exc), EXIT_RUNTIME, args.subcommand)
    return 0


if __name__ == "__main__":
    sys.exit(main())
