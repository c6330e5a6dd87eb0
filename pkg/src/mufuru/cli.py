"""Command-line entry point: ``mufuru <command> ...``.

Exit codes: 0 success, 1 a check failed, 2 bad arguments, 3 configuration
error, 4 data error, 5 I/O error, 6 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import cells, checks, tasks, training
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, TrainingDiverged

log = logging.getLogger("mufuru")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_IO = 5
EXIT_DIVERGED = 6


# ---------------------------------------------------------------------------
# gen-logic


def cmd_gen_logic(seed: int, out_dir, gates: str = "basic", train_size: int = 1000,
                  test_size: int = 1000) -> dict[str, tasks.LogicDatasets]:
    data = tasks.generate_logic_datasets(np.random.default_rng(seed), train_size, test_size,
                                         gates=tasks.GATE_SETS[gates])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "dev", "test"):
        formulae = getattr(data, split)
        tasks.write_formulae(out / f"{split}.txt", formulae)
        positive = sum(f.label for f in formulae) / len(formulae)
        print(f"{split}: {len(formulae)} formulae, {positive:.3f} true")
    return data


# ---------------------------------------------------------------------------
# train


def _load_logic(cfg: RunConfig) -> tasks.LogicDatasets:
    gates = tasks.GATE_SETS[cfg.gates]
    paths = dict(cfg.data)
    if "dir" in paths:
        base = Path(paths.pop("dir"))
        for split in ("train", "dev", "test"):
            paths.setdefault(split, str(base / f"{split}.txt"))
    if not paths:
        return tasks.generate_logic_datasets(np.random.default_rng(cfg.data_seed),
                                             cfg.train_size, cfg.test_size, gates=gates)
    missing = [s for s in ("train", "dev", "test") if s not in paths]
    if missing:
        raise ConfigError(f"data.{missing[0]}", "logic runs need train, dev and test files")
    return tasks.LogicDatasets(*(tasks.read_formulae(paths[s]) for s in ("train", "dev", "test")),
                               gates=gates)


def parameter_counts(params) -> dict[str, int]:
    """Raw cell parameter count, plus the count with one controller block removed.

    Softmax weights are invariant to shifting all ``l`` logits together, so a
    MuFuRU has one redundant ``M x (N+M+1)`` controller block.
    """
    count = params.num_parameters()
    effective = count
    if isinstance(params, cells.MuFuRUParams):
        shape = params.shape
        effective -= shape.state_size * (shape.input_size + shape.state_size + 1)
    return {"param_count": count, "effective_param_count": effective}


def _train_one(cfg: RunConfig, seed: int, out: Path, plot: bool) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train_config(seed)
    init_rng, _ = tcfg.rngs()
    metrics = training.MetricsLog()
    started = time.perf_counter()
    summary: dict = {"task": cfg.task, "cell": cfg.cell, "seed": seed}
    meta: dict = {"task": cfg.task}

    if cfg.task == "logic":
        data = _load_logic(cfg)
        shape = cells.CellShape(len(data.vocab), cfg.hidden_size)
        params = cells.init_params(cfg.cell, shape, cfg.ops, init_rng)
        head = training.ClassifierHead.init(2, cfg.hidden_size, init_rng)
        result = training.train_logic(params, head, data, tcfg, log=metrics)
        extra = dict((n, t.data) for n, t in head.named_tensors())
        meta["gates"] = cfg.gates
        summary.update(test_accuracy=result.test_accuracy, train_accuracy=result.train_accuracy,
                       dev_accuracy=result.dev_accuracy, test_metric=result.test_accuracy)
        metric_name = "accuracy"
        if result.profile is not None:
            summary["op_weight_profile"] = {
                tok.symbol: dict(zip(params.ops, map(float, row)))
                for tok, row in zip(data.vocab, result.profile)}
    elif cfg.task == "classify":
        train = tasks.load_labeled_sequences(cfg.data["train"], max_vocab=cfg.max_vocab)
        dev = tasks.load_labeled_sequences(cfg.data["dev"], train.vocab, train.labels)
        test = None
        if "test" in cfg.data:
            test = tasks.load_labeled_sequences(cfg.data["test"], train.vocab, train.labels)
        encoder = training.InputEncoder.embedding(len(train.vocab), cfg.embed_size, init_rng)
        shape = cells.CellShape(encoder.size, cfg.hidden_size)
        params = cells.init_params(cfg.cell, shape, cfg.ops, init_rng)
        head = training.ClassifierHead.init(max(train.num_classes, 2), cfg.hidden_size, init_rng)
        result = training.train_classifier(params, head, train.sequences, dev.sequences, tcfg,
                                           encoder, log=metrics)
        extra = dict((n, t.data) for n, t in head.named_tensors() + encoder.named_tensors())
        meta.update(vocab=train.vocab, labels=train.labels)
        summary.update(dev_accuracy=result.best_dev_accuracy, best_step=result.best_step,
                       steps=result.steps)
        if test is not None:
            _, acc = training.evaluate_classifier(params, head, encoder, test.sequences)
            summary["test_accuracy"] = acc
        summary["test_metric"] = summary.get("test_accuracy", result.best_dev_accuracy)
        metric_name = "accuracy"
    else:
        corpus = tasks.load_text_corpus(cfg.data["train"], cfg.data["valid"], cfg.data["test"],
                                        cfg.max_vocab, cfg.level)
        encoder = training.InputEncoder.embedding(corpus.vocab_size, cfg.embed_size, init_rng)
        shape = cells.CellShape(encoder.size, cfg.hidden_size)
        params = cells.init_params(cfg.cell, shape, cfg.ops, init_rng)
        result, head = training.train_lm(params, corpus, tcfg, encoder, log=metrics)
        extra = dict((n, t.data) for n, t in head.named_tensors() + encoder.named_tensors())
        meta.update(vocab=corpus.vocab, level=cfg.level)
        summary.update(test_perplexity=result.test_perplexity,
                       valid_perplexity=result.valid_perplexity, steps=result.steps,
                       test_metric=result.test_perplexity)
        metric_name = "perplexity"

    log.info("seed %d: %s/%s trained in %.1fs", seed, cfg.task, cfg.cell,
             time.perf_counter() - started)
    summary.update(parameter_counts(params))
    summary["model_param_count"] = summary["param_count"] + sum(np.size(a) for a in extra.values())
    summary["wall_clock_seconds"] = time.perf_counter() - started
    summary["config"] = cfg.to_dict() | {"seed": seed}

    metrics.write(out / "metrics.csv")
    cells.save_checkpoint(out / "checkpoint.json", params, extra, meta)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    log.info("wrote metrics, checkpoint and summary to %s", out)
    if plot:
        from .plotting import plot_metrics, plot_op_weights
        plot_metrics(metrics.rows, out / "metrics.png", metric_name)
        if cfg.task == "logic" and "op_weight_profile" in summary:
            profile = np.array([list(r.values()) for r in summary["op_weight_profile"].values()])
            plot_op_weights(profile, list(summary["op_weight_profile"]), params.ops,
                            out / "op_weights.png")
    return summary


def cmd_train(config_path, seeds: int = 1, out_dir=None, seed: int | None = None,
              plot: bool = False) -> dict:
    """Run one job (or ``seeds`` jobs with consecutive seeds) and write its artifacts."""
    cfg = load_config(config_path)
    if seed is not None:
        cfg.seed = seed
    out = Path(out_dir or cfg.out_dir or f"runs/{cfg.task}-{cfg.cell}")
    if seeds < 1:
        raise ValueError("--seeds must be at least 1")
    if seeds == 1:
        summary = _train_one(cfg, cfg.seed, out, plot)
        _print_summary(summary)
        return summary
    runs = []
    for s in range(cfg.seed, cfg.seed + seeds):
        summary = _train_one(cfg, s, out / f"seed-{s}", plot)
        _print_summary(summary)
        runs.append(summary)
    lower_is_better = cfg.task == "lm"
    best = (min if lower_is_better else max)(runs, key=lambda r: r["test_metric"])
    combined = {"task": cfg.task, "cell": cfg.cell, "seeds": [r["seed"] for r in runs],
                "per_seed": [{k: r[k] for k in ("seed", "test_metric")} for r in runs],
                "best_seed": best["seed"], "best": best}
    for key in ("test_accuracy", "test_perplexity"):
        if key in best:
            combined[key] = best[key]
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(combined, indent=2) + "\n", encoding="utf-8")
    if plot:
        from .plotting import plot_seed_results
        plot_seed_results(runs, out / "seeds.png",
                          "test perplexity" if lower_is_better else "test accuracy")
    print(f"best seed {best['seed']}: test metric {best['test_metric']:.4f}")
    return combined


def _print_summary(summary):
    print(f"seed {summary['seed']}: {summary['task']}/{summary['cell']} "
          f"test metric {summary['test_metric']:.4f} "
          f"({summary['param_count']} cell parameters, {summary['wall_clock_seconds']:.1f}s)")


# ---------------------------------------------------------------------------
# checks


def cmd_gradcheck(cell: str, hidden_size: int = 4, input_size: int = 4, seed: int = 0,
                  ops=None, threshold: float = checks.GRADCHECK_THRESHOLD) -> tuple[bool, dict]:
    report = checks.gradcheck_report(cell, hidden_size, input_size, seed, ops)
    ok = True
    for name, err in report.items():
        flag = "ok" if err <= threshold else "FAIL"
        ok &= err <= threshold
        print(f"{cell} seed={seed} {name:<14} {err:.3e} {flag}")
    return ok, report


def cmd_equivalence(seed: int = 0, trials: int = 100, zero_params: bool = False,
                    threshold: float = checks.EQUIVALENCE_THRESHOLD) -> tuple[bool, dict]:
    report = checks.equivalence_report(seed, trials, zero_params=zero_params)
    print(f"GRU -> MuFuRU[keep, replace]: max deviation {report['gru']:.3e} over {trials} trials")
    print(f"Vanilla -> MuFuRU[replace] (reset=1): max deviation {report['vanilla']:.3e} "
          f"over {trials} trials")
    ok = all(v <= threshold for v in report.values())
    return ok, report


def _dataset_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = [path / f"{s}.txt" for s in ("train", "dev", "test") if (path / f"{s}.txt").exists()]
        if not files:
            raise DataError(f"{path}: no train/dev/test.txt files")
        return files
    return [path]


def op_weight_csv(profile: np.ndarray, tokens, ops) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["token", *ops])
    for tok, row in zip(tokens, profile):
        writer.writerow([tok, *(repr(float(v)) for v in row)])
    return buf.getvalue()


def cmd_op_weights(checkpoint, dataset, out_dir=None, plot: bool = False) -> np.ndarray:
    """Average MuFuRU operation weights per logic input token, as CSV."""
    params, _, meta = cells.load_checkpoint(checkpoint)
    if not isinstance(params, cells.MuFuRUParams):
        raise ValueError(f"{checkpoint} holds a {params.kind} cell; op-weights needs a MuFuRU")
    vocab = tasks.logic_vocab(tasks.GATE_SETS[meta.get("gates", "basic")])
    if params.shape.input_size != len(vocab):
        raise DataError(f"{checkpoint}: input size {params.shape.input_size} does not match "
                        f"the {len(vocab)}-token logic vocabulary")
    formulae = [f for p in _dataset_files(Path(dataset)) for f in tasks.read_formulae(p)]
    if not formulae:
        raise DataError(f"{dataset}: no formulae")
    profile = training.op_weight_profile(params, formulae, vocab)
    tokens = [t.symbol for t in vocab]
    text = op_weight_csv(profile, tokens, params.ops)
    if out_dir is None:
        sys.stdout.write(text)
    else:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "op_weights.csv").write_text(text, encoding="utf-8")
        if plot:
            from .plotting import plot_op_weights
            plot_op_weights(profile, tokens, params.ops, out / "op_weights.png")
        print(f"wrote {out / 'op_weights.csv'}")
    return profile


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mufuru", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-logic", help="write train/dev/test propositional-logic formulae")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--gates", choices=sorted(tasks.GATE_SETS), default="basic")
    p.add_argument("--train-size", type=int, default=1000)
    p.add_argument("--test-size", type=int, default=1000)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--seeds", type=int, default=1, help="run N consecutive seeds, report the best")
    p.add_argument("--out", default=None, help="output directory (overrides config out_dir)")
    p.add_argument("--plot", action="store_true", help="also render PNG figures")

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    p.add_argument("--cell", choices=["vanilla", "gru", "mufuru", "all"], default="all")
    p.add_argument("--hidden", "-M", type=int, default=4)
    p.add_argument("--input", "-N", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--ops", default=",".join(cells.ALL_OPS), help="comma-separated MuFuRU ops")

    p = sub.add_parser("equivalence", help="check the GRU and Vanilla reductions of MuFuRU")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--zero-params", action="store_true")

    p = sub.add_parser("op-weights", help="average MuFuRU operation weights per logic token")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="logic formula file or directory")
    p.add_argument("--out", default=None, help="directory for op_weights.csv (default: stdout)")
    p.add_argument("--plot", action="store_true")
    return parser


def _dispatch(args) -> int:
    if args.command == "gen-logic":
        cmd_gen_logic(args.seed, args.out, args.gates, args.train_size, args.test_size)
    elif args.command == "train":
        cmd_train(args.config, args.seeds, args.out, args.seed, args.plot)
    elif args.command == "gradcheck":
        kinds = ["vanilla", "gru", "mufuru"] if args.cell == "all" else [args.cell]
        ops = [o for o in args.ops.split(",") if o]
        ok = True
        for seed in range(args.seed, args.seed + args.seeds):
            for kind in kinds:
                ok &= cmd_gradcheck(kind, args.hidden, args.input, seed,
                                    ops if kind == "mufuru" else None)[0]
        if not ok:
            print("gradient check FAILED", file=sys.stderr)
            return EXIT_CHECK_FAILED
    elif args.command == "equivalence":
        ok, _ = cmd_equivalence(args.seed, args.trials, args.zero_params)
        if not ok:
            print("equivalence check FAILED", file=sys.stderr)
            return EXIT_CHECK_FAILED
    elif args.command == "op-weights":
        cmd_op_weights(args.checkpoint, args.dataset, args.out, args.plot)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
