"""Command-line surface.

Subcommands: gen-synth, train, eval, infer, dump-interactions, grad-check.
Everything is driven by a JSON config file plus flag overrides; flags win.
Exit codes: 0 success, 1 usage error, 2 validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data, training
from .decoders import TaskError
from .graphs import GraphError
from .layers import DegenerateDegreeError, RegistryError
from .model import ABLATIONS, Model, ModelConfig
from .tensor import TensorError
from .training import NumericError, TrainConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3

_VALIDATION_ERRORS = (data.ManifestError, data.CheckpointError, data.TensorFileError,
                      GraphError, TaskError, RegistryError, ValueError, KeyError,
                      FileNotFoundError)
_NUMERIC_ERRORS = (NumericError, DegenerateDegreeError, TensorError)

# Flag spelling -> internal ablation name.
_ABLATE_ALIASES = {name.replace("no_", "no-"): name for name in ABLATIONS}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="bridgeqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--lambda", dest="lam", type=float,
                       help="softmax scaling factor override")
        p.add_argument("--epochs", type=int)
        p.add_argument("--ablate", action="append", default=[],
                       choices=sorted(_ABLATE_ALIASES), help="repeatable ablation flag")
        p.add_argument("--precision", choices=["f32", "f64"])

    gen = sub.add_parser("gen-synth", help="generate a planted synthetic dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--task", required=True, choices=["open_ended", "count", "multi_choice"])
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--samples", type=int, default=16)
    gen.add_argument("--clips", type=int, default=4)
    gen.add_argument("--frames-per-clip", type=int, default=4)
    gen.add_argument("--tokens", type=int, default=6)
    gen.add_argument("--feature-dim", type=int, default=32)
    gen.add_argument("--embed-dim", type=int, default=300)
    gen.add_argument("--labels", type=int, default=4)
    gen.add_argument("--candidates", type=int, default=4)
    gen.add_argument("--count-max", type=int, default=4)
    gen.add_argument("--difficulty", type=float, default=0.1)

    tr = sub.add_parser("train", help="train on a manifest and write a checkpoint")
    common(tr)
    tr.add_argument("--out", required=True, help="output directory")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    common(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest")

    inf = sub.add_parser("infer", help="predict the answer for one sample")
    common(inf)
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--manifest")
    inf.add_argument("--sample-id", required=True)

    dmp = sub.add_parser("dump-interactions", help="dump interaction matrices for one sample")
    common(dmp)
    dmp.add_argument("--checkpoint", required=True)
    dmp.add_argument("--manifest")
    dmp.add_argument("--sample-id", required=True)
    dmp.add_argument("--out", required=True)

    gc = sub.add_parser("grad-check", help="finite-difference check of every head")
    gc.add_argument("--seed", type=int, default=0)

    return parser


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _resolve_ablations(cfg: dict, args) -> tuple:
    flags = list(cfg.get("train", {}).get("ablations", ()))
    flags += [_ABLATE_ALIASES[a] for a in args.ablate]
    return tuple(dict.fromkeys(flags))  # dedupe, keep order


def _build_configs(cfg: dict, args, dataset: data.Dataset) -> tuple[ModelConfig, TrainConfig]:
    model_section = dict(cfg.get("model", {}))
    train_section = dict(cfg.get("train", {}))

    train_section["ablations"] = _resolve_ablations(cfg, args)
    if args.seed is not None:
        train_section["seed"] = args.seed
    if args.epochs is not None:
        train_section["epochs"] = args.epochs
    if args.lam is not None:
        train_section["lam"] = args.lam
    if args.precision is not None:
        train_section["precision"] = args.precision
    train_cfg = TrainConfig.from_dict(train_section)

    space = dataset.answer_space
    model_section.update(
        task=dataset.task,
        feature_dim=dataset.feature_dim,
        embed_dim=dataset.embed_dim,
        num_labels=space.num_labels,
        num_candidates=space.num_candidates,
        count_min=space.count_min,
        count_max=space.count_max,
        lam=train_cfg.lam,
        precision=train_cfg.precision,
        seed=train_cfg.seed,
    )
    return ModelConfig.from_dict(model_section), train_cfg


def _manifest_path(cfg: dict, args):
    path = getattr(args, "manifest", None) or cfg.get("manifest")
    if not path:
        raise UsageError("no manifest given (use --manifest or the config file)")
    return path


def _load_model_from_checkpoint(path) -> tuple[Model, TrainConfig]:
    model_cfg, train_cfg, params, _ = data.load_checkpoint(path)
    model = Model(ModelConfig.from_dict(model_cfg))
    try:
        model.load_param_arrays(params)
    except ValueError as exc:
        raise data.CheckpointError(f"checkpoint does not match architecture: {exc}") from exc
    tc = TrainConfig.from_dict(train_cfg) if train_cfg else TrainConfig()
    return model, tc


def _apply_eval_overrides(model: Model, train_cfg: TrainConfig, args) -> TrainConfig:
    if args.lam is not None:
        model.config.lam = args.lam
        train_cfg.lam = args.lam
    if args.ablate:
        train_cfg.ablations = tuple(dict.fromkeys(
            list(train_cfg.ablations) + [_ABLATE_ALIASES[a] for a in args.ablate]))
    return train_cfg


def cmd_gen_synth(args) -> int:
    path = data.generate_synthetic_dataset(
        args.out, args.task, seed=args.seed, num_samples=args.samples,
        num_clips=args.clips, frames_per_clip=args.frames_per_clip,
        num_tokens=args.tokens, feature_dim=args.feature_dim,
        embed_dim=args.embed_dim, num_labels=args.labels,
        num_candidates=args.candidates, count_max=args.count_max,
        difficulty=args.difficulty)
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config_file(args.config)
    dataset = data.load_manifest(_manifest_path(cfg, args))
    model_cfg, train_cfg = _build_configs(cfg, args, dataset)
    model = Model(model_cfg)

    report, best_params = training.fit(model, dataset.samples, train_cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = training.AdamState(model)  # buffers replaced below if training ran
    data.save_checkpoint(out / "checkpoint.btck", best_params,
                         model_cfg.to_dict(), train_cfg.to_dict())
    del state
    report_doc = report.to_dict()
    report_doc.pop("wall_time_s")  # volatile; keeps rerun reports byte-identical
    (out / "report.json").write_text(json.dumps(report_doc, indent=2, sort_keys=True))
    print(f"{report.metric_name} {report.epoch_metrics[-1]:.4f}", flush=True)
    print(f"wall_time_s {report.wall_time_s:.2f}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config_file(args.config)
    model, train_cfg = _load_model_from_checkpoint(args.checkpoint)
    train_cfg = _apply_eval_overrides(model, train_cfg, args)
    dataset = data.load_manifest(_manifest_path(cfg, args))
    if dataset.task != model.config.task:
        raise data.CheckpointError(
            f"checkpoint task {model.config.task!r} != dataset task {dataset.task!r}")
    metric = training.evaluate(model, dataset.samples, train_cfg)
    name = "mse" if model.config.task == "count" else "accuracy"
    print(f"{name} {metric:.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _load_config_file(args.config)
    model, train_cfg = _load_model_from_checkpoint(args.checkpoint)
    train_cfg = _apply_eval_overrides(model, train_cfg, args)
    dataset = data.load_manifest(_manifest_path(cfg, args))
    sample = dataset.by_id(args.sample_id)
    out = model.predict(sample, ablations=train_cfg.ablations)
    if isinstance(out, tuple):
        idx, scores = out
        formatted = " ".join(f"{s:.6f}" for s in scores)
        print(f"{sample.sample_id} {idx} scores=[{formatted}]")
    else:
        print(f"{sample.sample_id} {out}")
    return EXIT_OK


def cmd_dump_interactions(args) -> int:
    cfg = _load_config_file(args.config)
    model, train_cfg = _load_model_from_checkpoint(args.checkpoint)
    train_cfg = _apply_eval_overrides(model, train_cfg, args)
    dataset = data.load_manifest(_manifest_path(cfg, args))
    sample = dataset.by_id(args.sample_id)
    fp = model.forward(sample, ablations=train_cfg.ablations)
    data.dump_interaction_trace(fp.trace, sample, dataset.num_clips, args.out)
    print(args.out)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = training.gradient_check_model(seed=args.seed)
    ok = True
    for res in results:
        for name in sorted(res.errors):
            err = res.errors[name]
            status = "ok" if err <= training.GRAD_TOL else "FAIL"
            print(f"{res.task:12s} {name:12s} {err:.3e} {status}")
            ok = ok and err <= training.GRAD_TOL
        print(f"{res.task:12s} worst {res.worst_param} {res.worst:.3e}")
    if not ok:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


_COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "dump-interactions": cmd_dump_interactions,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _VALIDATION_ERRORS as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
