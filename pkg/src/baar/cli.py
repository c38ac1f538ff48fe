"""Command-line entry point: ``baar <command> [flags]``.

Commands: gen, pretrain, finetune, eval, analyze, bench. Every command
accepts ``--config FILE.json`` whose keys are flag names (dashes or
underscores); flags given on the command line win. Runs write a
``config.json`` snapshot, metrics and artifacts into a run directory under
``$BAAR_RUN_ROOT`` (default ``./runs``) unless ``--run-dir`` is given.

Failures print one line ``error: <Kind>: <message>`` to stderr and exit
with status 2 (usage) or 1 (everything else).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, data, training
from .model import BaarModel, ModelConfig, load_checkpoint, save_checkpoint

RUN_ROOT_ENV = "BAAR_RUN_ROOT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON file of flag values (default: none)")
    p.add_argument("--run-dir", default=None, help=f"output directory (default: ${RUN_ROOT_ENV}/<command>-<config hash>)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--quiet", action="store_true", help="do not echo metrics to stdout (default: off)")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", default=None, help="dataset directory written by 'gen' (required)")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", type=int, default=4, help="number of alternating layers, even (default: 4)")
    p.add_argument("--d-model", type=int, default=64, help="hidden width (default: 64)")
    p.add_argument("--heads", type=int, default=4, help="retention heads per layer (default: 4)")
    p.add_argument("--ffn-dim", type=int, default=None, help="feed-forward width (default: 2*d-model)")
    p.add_argument("--chunk-size", type=int, default=None, help="chunkwise training form chunk length (default: parallel form)")
    p.add_argument("--rotary-base", type=float, default=10000.0, help="rotary angle base (default: 10000)")
    p.add_argument("--no-rotary", action="store_true", help="disable rotary phase (default: off)")
    p.add_argument("--rotary-order", action="store_true", help="rotary phase from token order instead of timestamps (default: off)")
    p.add_argument("--no-tokenizer", action="store_true", help="skip the convolution tokenizer (default: off)")
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32", help="parameter precision (default: float32)")


def _add_train(p: argparse.ArgumentParser, epochs: int, lr: float) -> None:
    p.add_argument("--epochs", type=int, default=epochs, help=f"training epochs (default: {epochs})")
    p.add_argument("--lr", type=float, default=lr, help=f"Adam learning rate (default: {lr:g})")
    p.add_argument("--batch-size", type=int, default=32, help="minibatch size (default: 32)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="baar", description="Alternating forward/backward retention models for time series.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--kind", choices=["shapelet", "events"], default="shapelet", help="dataset family (default: shapelet)")
    p.add_argument("--out", default=None, help="output directory (default: the run directory)")
    p.add_argument("--n", type=int, default=1000, help="number of sequences or patients (default: 1000)")
    p.add_argument("--length", type=int, default=512, help="shapelet: timesteps per sequence (default: 512)")
    p.add_argument("--channels", type=int, default=1, help="shapelet: channels V (default: 1)")
    p.add_argument("--classes", type=int, default=2, help="shapelet: number of classes (default: 2)")
    p.add_argument("--snr", type=float, default=5.0, help="shapelet: waveform amplitude over unit noise (default: 5)")
    p.add_argument("--vocab", type=int, default=47, help="events: code vocabulary size (default: 47)")
    p.add_argument("--mean-events", type=float, default=30.0, help="events: mean events per patient (default: 30)")
    p.add_argument("--mean-gap", type=float, default=2.0, help="events: mean gap in months (default: 2)")

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    _add_common(p)
    _add_data(p)
    _add_model(p)
    _add_train(p, 20, 1e-3)
    p.add_argument(
        "--strategy",
        choices=list(training.STRATEGIES),
        default="next_previous",
        help="pre-training objective (default: next_previous)",
    )
    p.add_argument("--mask-ratio", type=float, default=0.4, help="masking strategy: fraction of timesteps zeroed (default: 0.4)")

    p = sub.add_parser("finetune", help="attach a head and train end to end")
    _add_common(p)
    _add_data(p)
    _add_model(p)
    _add_train(p, 5, 1e-4)
    p.add_argument("--checkpoint", default=None, help="pre-trained checkpoint (required unless --no-pretrain)")
    p.add_argument("--no-pretrain", action="store_true", help="start from a fresh initialization (default: off)")
    p.add_argument("--repr", choices=["sos", "eos", "sos_eos", "mean"], default="sos", help="sequence representation (default: sos)")
    p.add_argument("--repr-layers", choices=["last", "last_two"], default="last", help="layers pooled for the representation (default: last)")
    p.add_argument("--task", choices=["classification", "regression", "multilabel"], default=None, help="head task (default: classification, multilabel for events)")
    p.add_argument("--fraction", type=float, default=0.2, help="share of the training split used for fine-tuning (default: 0.2)")

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint", default=None, help="fine-tuned checkpoint (required)")
    p.add_argument("--split", choices=["train", "valid", "test", "all"], default="test", help="evaluation split (default: test)")

    p = sub.add_parser("analyze", help="spectra, saliency and heatmaps for one checkpoint")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint to analyze (required)")
    p.add_argument("--index", type=int, default=0, help="test-split sequence used for matrix dumps (default: 0)")
    p.add_argument("--n-saliency", type=int, default=32, help="test sequences scored for saliency (default: 32)")
    p.add_argument("--tol", type=float, default=1e-8, help="relative singular-value rank tolerance (default: 1e-8)")

    p = sub.add_parser("bench", help="wall time of a retention form against sequence length")
    _add_common(p)
    p.add_argument("--mode", choices=["recurrent", "parallel", "chunkwise"], default="recurrent", help="retention form (default: recurrent)")
    p.add_argument("--lengths", default="1000,2000,4000,8000", help="comma-separated lengths (default: 1000,2000,4000,8000)")
    p.add_argument("--repeats", type=int, default=3, help="timed runs per length, fastest kept (default: 3)")
    p.add_argument("--d-model", type=int, default=16, help="layer width (default: 16)")
    p.add_argument("--heads", type=int, default=1, help="retention heads (default: 1)")
    p.add_argument("--chunk-size", type=int, default=64, help="chunkwise form chunk length (default: 64)")
    return parser


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise UsageError(f"unknown command {command!r}")


def parse_args(argv=None) -> argparse.Namespace:
    """Parse flags, layering a JSON config file under explicit flags."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            values = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(values, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        sub = _subparser(parser, args.command)
        known = {a.dest for a in sub._actions}
        fixed = {}
        for key, value in values.items():
            dest = key.replace("-", "_")
            if dest not in known or dest in ("config", "help"):
                raise UsageError(f"config file {path}: unknown key {key!r}")
            fixed[dest] = value
        sub.set_defaults(**fixed)
        args = parser.parse_args(argv)
    return args


def _resolved(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("config", "run_dir", "quiet")}


def _run_dir(args: argparse.Namespace) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        blob = json.dumps(_resolved(args), sort_keys=True).encode()
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        path = root / f"{args.command}-{hashlib.sha1(blob).hexdigest()[:10]}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _snapshot(run_dir: Path, args: argparse.Namespace) -> None:
    (run_dir / "config.json").write_text(json.dumps(_resolved(args), indent=2, sort_keys=True) + "\n")


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def _log(run_dir: Path, args: argparse.Namespace) -> training.MetricsLog:
    path = run_dir / "metrics.jsonl"
    if path.exists():
        path.unlink()
    return training.MetricsLog(path, echo=not args.quiet)


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------


class Dataset:
    """A directory written by ``gen``: series or events, plus labels."""

    def __init__(self, path):
        self.path = Path(_require(path, "--data"))
        if not self.path.is_dir():
            raise FileNotFoundError(f"dataset directory not found: {self.path}")
        meta_path = self.path / "meta.json"
        self.meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        labels_path = self.path / "labels.csv"
        label_map = data.load_labels_csv(labels_path) if labels_path.exists() else {}
        if (self.path / "series.csv").exists():
            self.kind = "series"
            self.inputs, self.ids = data.load_series_csv(self.path / "series.csv")
            self.spans = self._spans()
        elif (self.path / "events.csv").exists():
            self.kind = "events"
            self.inputs = data.load_events_csv(self.path / "events.csv", self.meta.get("vocab"), label_map or None)
            self.ids = [s.patient_id for s in self.inputs]
            self.spans = None
        else:
            raise FileNotFoundError(f"{self.path} holds neither series.csv nor events.csv")
        self.labels = None
        if label_map:
            missing = [i for i in self.ids if i not in label_map]
            if missing:
                raise data.ValidationError(f"labels.csv has no row for {missing[0]!r}")
            rows = np.asarray([label_map[i] for i in self.ids])
            self.labels = rows[:, 0] if rows.shape[1] == 1 and self.kind == "series" else rows

    def _spans(self):
        path = self.path / "spans.csv"
        if not path.exists():
            return None
        table = data.load_labels_csv(path)
        return np.asarray([table[i] for i in self.ids])

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def vocab(self) -> int | None:
        if self.kind != "events":
            return None
        return int(self.meta.get("vocab") or 1 + max(int(np.max(s.codes)) for s in self.inputs))

    @property
    def channels(self) -> int:
        return int(self.inputs.shape[-1]) if self.kind == "series" else 1

    def split(self, seed: int) -> dict[str, np.ndarray]:
        tr, va, te = training.split_indices(len(self), seed)
        return {"train": tr, "valid": va, "test": te, "all": np.arange(len(self))}

    def take(self, idx: np.ndarray):
        return training.subset(self.inputs, idx)

    def labels_for(self, idx: np.ndarray):
        if self.labels is None:
            raise data.DataError(f"{self.path} has no labels.csv")
        return self.labels[idx]


def _model_config(args: argparse.Namespace, ds: Dataset) -> ModelConfig:
    return ModelConfig(
        n_layers=args.layers,
        d_model=args.d_model,
        n_heads=args.heads,
        feature_dim=ds.channels,
        vocab_size=ds.vocab,
        ffn_dim=args.ffn_dim,
        chunk_size=args.chunk_size,
        rotary_base=args.rotary_base,
        use_rotary=not args.no_rotary,
        rotary_timestamps=not args.rotary_order,
        tokenizer=not args.no_tokenizer and ds.kind == "series",
        dtype=args.dtype,
        seed=args.seed,
    )


def _load(path) -> BaarModel:
    path = Path(_require(path, "--checkpoint"))
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args: argparse.Namespace) -> dict:
    run_dir = _run_dir(args)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(run_dir, args)
    if args.kind == "shapelet":
        ds = data.gen_shapelet_dataset(args.n, args.length, args.channels, args.classes, args.snr, args.seed)
        ids = [f"s{i:06d}" for i in range(args.n)]
        data.write_series_csv(out / "series.csv", ds.sequences, ids)
        data.write_labels_csv(out / "labels.csv", ids, ds.labels)
        data.write_labels_csv(out / "spans.csv", ids, ds.shapelet_spans, names=["start", "end"])
        meta = {"kind": "shapelet", "n": args.n, "length": args.length, "channels": args.channels, "classes": args.classes}
    else:
        streams = data.gen_event_streams(args.n, args.vocab, args.mean_events, seed=args.seed, mean_gap=args.mean_gap)
        ids = [s.patient_id for s in streams]
        data.write_events_csv(out / "events.csv", streams)
        names = [r.name for r in data.DEFAULT_RULES]
        data.write_labels_csv(out / "labels.csv", ids, np.stack([s.labels for s in streams]), names=names)
        meta = {"kind": "events", "n": len(streams), "vocab": args.vocab, "phenotypes": names}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return {"out": str(out), **meta}


def cmd_pretrain(args: argparse.Namespace) -> dict:
    ds = Dataset(args.data)
    run_dir = _run_dir(args)
    _snapshot(run_dir, args)
    model = BaarModel(_model_config(args, ds))
    cfg = training.TrainConfig(lr=args.lr, batch_size=args.batch_size, pretrain_epochs=args.epochs, seed=args.seed)
    strategy = training.PretrainStrategy(args.strategy, args.mask_ratio)
    train_idx = ds.split(args.seed)["train"]
    result = training.train_pretrain(model, ds.take(train_idx), cfg, strategy, log=_log(run_dir, args))
    ckpt = save_checkpoint(run_dir / "model.ckpt", model, extra={"stage": "pretrain", "strategy": args.strategy, "losses": result.losses})
    return {"checkpoint": str(ckpt), "losses": result.losses}


def cmd_finetune(args: argparse.Namespace) -> dict:
    ds = Dataset(args.data)
    run_dir = _run_dir(args)
    _snapshot(run_dir, args)
    if args.no_pretrain:
        model = BaarModel(_model_config(args, ds))
    else:
        model = _load(args.checkpoint)
    task = args.task or ("multilabel" if ds.kind == "events" else "classification")
    splits = ds.split(args.seed)
    ft_idx = training.finetune_subset(splits["train"], args.fraction, args.seed)
    cfg = training.TrainConfig(lr=args.lr, batch_size=args.batch_size, finetune_epochs=args.epochs, seed=args.seed)
    training.finetune(
        model,
        ds.take(ft_idx),
        ds.labels_for(ft_idx),
        cfg,
        task=task,
        repr_mode=args.repr,
        repr_layers=args.repr_layers,
        eval_data=ds.take(splits["valid"]),
        eval_labels=ds.labels_for(splits["valid"]),
        log=_log(run_dir, args),
    )
    test = training.evaluate(model, ds.take(splits["test"]), ds.labels_for(splits["test"]), task)
    ckpt = save_checkpoint(run_dir / "model.ckpt", model, extra={"stage": "finetune", "test": test})
    (run_dir / "test_metrics.json").write_text(json.dumps(test, indent=2, sort_keys=True) + "\n")
    return {"checkpoint": str(ckpt), "test": test}


def cmd_eval(args: argparse.Namespace) -> dict:
    ds = Dataset(args.data)
    model = _load(args.checkpoint)
    if model.head_config is None:
        raise UsageError("checkpoint has no prediction head; run finetune first")
    idx = ds.split(args.seed)[args.split]
    metrics = training.evaluate(model, ds.take(idx), ds.labels_for(idx))
    return {"split": args.split, **metrics}


def cmd_analyze(args: argparse.Namespace) -> dict:
    ds = Dataset(args.data)
    model = _load(args.checkpoint)
    run_dir = _run_dir(args)
    _snapshot(run_dir, args)
    test_idx = ds.split(args.seed)["test"]
    if not 0 <= args.index < len(test_idx):
        raise UsageError(f"--index must lie in [0, {len(test_idx)})")
    one = test_idx[args.index : args.index + 1]
    inputs = ds.take(one)
    if ds.kind == "events":
        out, _ = model.encode(np.asarray([inputs[0].codes]), np.asarray([inputs[0].timestamps]), capture=True)
    else:
        out, _ = model.encode(inputs, capture=True)
    report: dict = {"checkpoint": str(args.checkpoint), "sequence": ds.ids[one[0]], "layers": []}
    names = analysis.slot_names(out.hidden_per_layer[0].shape[1] - 2)
    for li, mats in enumerate(out.retention_matrices_per_layer):
        mean_r = mats[0].mean(axis=0)
        spec = analysis.svd_spectrum(mean_r, args.tol)
        analysis.write_matrix_csv(run_dir / f"retention_layer{li + 1}.csv", mean_r, names)
        report["layers"].append(
            {
                "layer": li + 1,
                "direction": model.layers[li].direction,
                "numerical_rank": spec.numerical_rank,
                "size": mean_r.shape[0],
                "cumulative_at_quarter": spec.cumulative_at(max(1, mean_r.shape[0] // 4)),
            }
        )
    heat = analysis.combined_bidirectional_heatmap(out)
    analysis.write_matrix_csv(run_dir / "combined_heatmap.csv", heat, names)
    if ds.spans is not None:
        stats = analysis.region_score_stats(heat, ds.spans[one[0]])
        report["region_scores"] = {"shapelet_mean": stats.shapelet_mean, "background_mean": stats.background_mean}
    if ds.kind == "series":
        idx = test_idx[: args.n_saliency]
        maps = analysis.saliency(model, ds.take(idx), spans=None if ds.spans is None else ds.spans[idx])
        np.savetxt(run_dir / "saliency.csv", maps[0].values, delimiter=",")
        if ds.spans is not None:
            report["saliency"] = {
                "n": len(maps),
                "localization_rate": analysis.saliency_localization_rate(maps),
                "shapelet_mean": float(np.mean([m.shapelet_mean for m in maps])),
                "background_mean": float(np.mean([m.background_mean for m in maps])),
            }
    analysis.write_report(run_dir / "report.json", report)
    return {"run_dir": str(run_dir), **report}


def cmd_bench(args: argparse.Namespace) -> dict:
    try:
        lengths = [int(s) for s in str(args.lengths).split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--lengths must be comma-separated integers, got {args.lengths!r}") from None
    run_dir = _run_dir(args)
    _snapshot(run_dir, args)
    res = analysis.benchmark_forms(lengths, args.mode, args.repeats, args.d_model, args.heads, args.seed, args.chunk_size)
    with open(run_dir / "bench.csv", "w") as fh:
        fh.write("n,seconds\n")
        for row in res.rows:
            fh.write(f"{row.n},{row.seconds!r}\n")
    return res.to_dict()


COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        result = COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: UsageError: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - one-line error contract
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    print(json.dumps(analysis._jsonable(result), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
