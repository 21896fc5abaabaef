"""Command-line entry point.

Exit codes: 0 on success, 1 when a check or validation fails, 2 for usage
and configuration errors.
"""
import argparse
import logging
import sys
from pathlib import Path

from .config import format_config, parse_config
from .errors import CheckpointError, ConfigError, ContractError, DuoError, ParseError, TrainingDiverged
from .gradcheck import TOLERANCE, run_grad_check
from .harness import (ablation_ladder, build_classifier, build_translator, convergence, couple_grid,
                      load_classification, load_translation, load_translator, param_report,
                      train_config, translate_lines, write_run)
from .training import evaluate, fmt6, train_loop

logger = logging.getLogger("duo")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _load_config(args):
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if getattr(args, "runs", None) is not None:
        cfg.train.runs = args.runs
    sys.stderr.write("# effective config\n" + format_config(cfg))
    return cfg


def _seeds(cfg):
    return [cfg.train.seed + r for r in range(cfg.train.runs)]


def _summary(result, metric):
    h = result.history
    best = h.records[h.best_epoch - 1]
    stop = "early stop" if h.stopped_early else "epoch budget"
    return (f"best epoch {best.epoch}/{len(h.records)} ({stop}): "
            f"val_loss {fmt6(best.val_loss)}  {metric} {fmt6(best.val_metric)}")


def _write(out, name, text):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text, encoding="utf-8", newline="\n")
    return path


def cmd_train_classifier(args):
    cfg = _load_config(args)
    task = load_classification(cfg)
    model = build_classifier(cfg, task, cfg.train.seed)
    result = train_loop(model, task.train, task.val, train_config(cfg, "classification"))
    out = write_run(args.out, cfg, result, model, task.vocab, task.label_names)
    print(_summary(result, "accuracy"))
    print(f"artifacts written to {out}")
    return EXIT_OK


def cmd_train_translator(args):
    cfg = _load_config(args)
    task = load_translation(cfg)
    model = build_translator(cfg, task.vocab, cfg.train.seed)
    result = train_loop(model, task.train, task.val, train_config(cfg, "translation"))
    out = write_run(args.out, cfg, result, model, task.vocab)
    final = evaluate(model, task.val)
    print(_summary(result, "bleu" if cfg.train.eval_bleu else "metric"))
    print(f"best model: bleu {fmt6(final['bleu'])}  token_accuracy {fmt6(final['token_accuracy'])}  "
          f"perplexity {fmt6(final['perplexity'])}")
    print(f"artifacts written to {out}")
    return EXIT_OK


def cmd_translate(args):
    model, vocab = load_translator(args.checkpoint)
    try:
        with open(args.input, encoding="utf-8") as fh:
            lines = [line.rstrip("\r\n") for line in fh]
    except OSError as exc:
        raise ConfigError(f"cannot read input {args.input}: {exc}") from None
    text = "".join(line + "\n" for line in translate_lines(model, vocab, lines))
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_grad_check(args):
    if args.config:
        _load_config(args)
    report = run_grad_check()
    failures = [name for name, _, ok in report if not ok]
    for name, err, ok in report:
        print(f"{name:32s} {err:.3e}  {'ok' if ok else 'FAIL'}")
    print(f"{len(report)} items checked, tolerance {TOLERANCE:g}, {len(failures)} failed")
    if failures:
        print("failed: " + ", ".join(failures))
        return EXIT_FAIL
    return EXIT_OK


def cmd_param_report(args):
    cfg = _load_config(args)
    lines, ok = param_report(cfg)
    print("\n".join(lines))
    if not ok:
        print("MISMATCH between closed-form counts and live tallies")
        return EXIT_FAIL
    return EXIT_OK


def cmd_couple_grid(args):
    cfg = _load_config(args)
    if len(args.sources) < 2:
        raise ConfigError(f"couple-grid needs at least 2 sources, got {len(args.sources)}")

    def progress(i, j, acc):
        logger.info("cell (%s, %s): %.4f", args.sources[i], args.sources[j], acc)

    _, text = couple_grid(cfg, args.sources, _seeds(cfg), on_cell=progress)
    path = _write(args.out, "couple_grid.csv", text)
    sys.stdout.write(text)
    print(f"written to {path}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_config(args)
    results, text = ablation_ladder(cfg, _seeds(cfg))
    path = _write(args.out, "ablation.csv", text)
    sys.stdout.write(text)
    print(f"written to {path}")
    by = {r.name: r.params for r in results}
    if not by["vanilla"] < by["+kv_sharing"] < by["+meta_embeddings"]:
        print("parameter ordering vanilla < shared < unshared does not hold")
        return EXIT_FAIL
    return EXIT_OK


def cmd_converge(args):
    cfg = _load_config(args)
    res = convergence(cfg, _seeds(cfg))
    path = _write(args.out, "convergence.csv", res.csv_text)
    sys.stdout.write(res.csv_text)
    print(f"params: duo {res.duo_params}, vanilla {res.vanilla_params} (gap {res.param_gap:.1%})")
    print(f"final perplexity: duo {fmt6(res.final_duo_ppl)}, vanilla {fmt6(res.final_vanilla_ppl)}")
    if not res.duo_wins:
        print("WARN: duo final perplexity is above the single-stream baseline")
    print(f"written to {path}")
    return EXIT_OK


COMMANDS = {
    "train-classifier": (cmd_train_classifier, "train the dual-embedding classifier"),
    "train-translator": (cmd_train_translator, "train the dual-stream translator"),
    "translate": (cmd_translate, "greedy-decode a file line by line"),
    "grad-check": (cmd_grad_check, "finite-difference gradient verification"),
    "param-report": (cmd_param_report, "closed-form vs live parameter counts"),
    "couple-grid": (cmd_couple_grid, "classifier accuracy for every pair of embedding sources"),
    "ablate": (cmd_ablate, "cumulative feature ladder for the translator"),
    "converge": (cmd_converge, "duo vs parameter-matched single-stream learning curves"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run configuration file")
    common.add_argument("--seed", type=int, help="override [train] seed")
    common.add_argument("--out", metavar="DIR", default="duo-out", help="artifact directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="duo", description="Dual-embedding classifier and translator")
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {}
    for name, (_, help_text) in COMMANDS.items():
        parsers[name] = sub.add_parser(name, parents=[common], help=help_text)
    parsers["translate"].add_argument("--checkpoint", required=True, metavar="PATH")
    parsers["translate"].add_argument("--input", required=True, metavar="PATH")
    parsers["translate"].add_argument("--output", metavar="PATH", help="default: stdout")
    parsers["couple-grid"].add_argument("--sources", nargs="+", required=True, metavar="SRC",
                                        help='embedding files or "learned:<dim>"')
    for name in ("couple-grid", "ablate", "converge"):
        parsers[name].add_argument("--runs", type=int, help="override [train] runs")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except (ConfigError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, ContractError, TrainingDiverged, DuoError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
