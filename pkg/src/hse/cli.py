"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric error (non-finite values or a failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError
from .config import ConfigFileError, load_config, model_params, parse_value, KNOWN_KEYS
from .data import DataError, SyntheticSpec, generate_synthetic, load_dataset_dir, write_ppm
from .estimator import VARIANTS, HSEClassifier
from .experiment import DESK_PARAMS
from .metrics import evaluate, relative_reduction, write_heatmap
from .model import ConfigError
from .taxonomy import TaxonomyError, load_fixture, load_taxonomy, validate_taxonomy, FIXTURES
from .tensor import GraphError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
EVAL_MODES = ("full", "baseline", "backtrack", "no-serl", "no-sglr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _settings(args) -> dict:
    """Config file settings with ``--set key=value`` overrides applied."""
    settings = load_config(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        key = key.replace("-", "_")
        if key not in KNOWN_KEYS:
            raise UsageError(f"unknown setting {key!r}")
        settings[key] = parse_value(value)
    return settings


def _pick(args, settings: dict, name: str, default=None):
    value = getattr(args, name, None)
    if value is not None:
        return value
    return settings.get(name, default)


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"missing {flag} (or set it in the config file)")
    return value


def _model_dir(root: Path, variant: str) -> Path:
    """A trained model directory, or the ``<variant>`` subdirectory of a run directory."""
    if (root / "model.ntc").exists():
        return root
    sub = root / variant
    if (sub / "model.ntc").exists():
        return sub
    raise DataError(f"no trained model in {root} (looked for model.ntc and {variant}/model.ntc)")


# -- subcommands ---------------------------------------------------------------------------

def cmd_gen_data(args, settings) -> int:
    out = _require(_pick(args, settings, "out_dir"), "--out")
    kw = {k: settings[k] for k in ("branching", "image_size", "counts", "noise") if k in settings}
    for k in ("branching", "counts"):
        if k in kw and not isinstance(kw[k], tuple):
            kw[k] = (kw[k],)
    spec = SyntheticSpec(seed=_pick(args, settings, "seed", 0), **kw)
    generate_synthetic(spec, out)
    print(f"wrote synthetic dataset with level sizes {' '.join(map(str, spec.level_sizes))} to {out}")
    return EXIT_OK


def cmd_train(args, settings) -> int:
    data_dir = Path(_require(_pick(args, settings, "data_dir"), "--data"))
    out = Path(_require(_pick(args, settings, "out_dir"), "--out"))
    variant = _pick(args, settings, "variant", "full")
    variants = list(VARIANTS) if variant == "all" else [variant]
    for v in variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)} or all")
    tax, splits = load_dataset_dir(data_dir, ("train", "val"))
    X, Y = splits["train"].arrays()
    Xv, Yv = splits["val"].arrays() if len(splits["val"]) else (None, None)
    params = {**DESK_PARAMS, **model_params(settings)}
    seed = _pick(args, settings, "seed", 0)
    for v in variants:
        est = HSEClassifier(tax, **{**params, **VARIANTS[v]}, random_state=seed).fit(X, Y, Xv, Yv)
        target = out / v if len(variants) > 1 else out
        est.save(target)
        last = est.metrics_log_[-1] if est.metrics_log_ else {}
        print(f"{v}: saved to {target}; final validation accuracy {last.get('val_accuracy')}")
    return EXIT_OK


def _evaluate(est: HSEClassifier, data_dir: Path, split: str, mode: str):
    tax, splits = load_dataset_dir(data_dir, (split,))
    if tax != est.taxonomy_:
        raise DataError(f"{data_dir}/taxonomy.tsv differs from the model's taxonomy")
    X, Y = splits[split].arrays()
    P = est.predict_levels(X, mode="backtrack" if mode == "backtrack" else "hierarchical")
    return evaluate(tax, P, Y, mode=mode, split=split), P, Y


def cmd_eval(args, settings) -> int:
    mode = _pick(args, settings, "mode", "full")
    if mode not in EVAL_MODES:
        raise UsageError(f"unknown mode {mode!r}; choose from {', '.join(EVAL_MODES)}")
    root = Path(_require(_pick(args, settings, "model_dir"), "--model"))
    data_dir = Path(_require(_pick(args, settings, "data_dir"), "--data"))
    variant = "baseline" if mode == "backtrack" else mode
    est = HSEClassifier.load(_model_dir(root, variant))
    trained = next((k for k, v in VARIANTS.items()
                    if v == dict(enable_serl=est.enable_serl, enable_sglr=est.enable_sglr)), None)
    if mode != "backtrack" and trained != mode:
        raise UsageError(f"mode {mode!r} needs a {mode} model, but {root} holds a {trained} model")
    report, _, _ = _evaluate(est, data_dir, _pick(args, settings, "split", "test"), mode)
    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_analyze_errors(args, settings) -> int:
    root = Path(_require(_pick(args, settings, "model_dir"), "--model"))
    data_dir = Path(_require(_pick(args, settings, "data_dir"), "--data"))
    split = _pick(args, settings, "split", "test")
    out = {}
    found = [v for v in VARIANTS if (root / v / "model.ntc").exists()]
    if (root / "model.ntc").exists():
        found = [None]
    if not found:
        raise DataError(f"no trained model in {root}")
    for v in found:
        est = HSEClassifier.load(root if v is None else root / v)
        report, _, _ = _evaluate(est, data_dir, split, v or "model")
        d = report.to_dict()
        out[v or "model"] = {k: d[k] for k in ("inter_superclass_errors", "intra_superclass_errors",
                                               "accuracy", "n_samples")}
    if "full" in out and "no-sglr" in out:
        out["inter_reduction_percent_with_sglr"] = [
            None if a is None else relative_reduction(a, b)
            for a, b in zip(out["no-sglr"]["inter_superclass_errors"], out["full"]["inter_superclass_errors"])]
    print(json.dumps(out, sort_keys=True, indent=2))
    return EXIT_OK


def cmd_export_attention(args, settings) -> int:
    root = Path(_require(_pick(args, settings, "model_dir"), "--model"))
    data_dir = Path(_require(_pick(args, settings, "data_dir"), "--data"))
    out = Path(_require(_pick(args, settings, "out_dir"), "--out"))
    level = int(_pick(args, settings, "level", 2))
    index = int(_pick(args, settings, "index", 0))
    split = _pick(args, settings, "split", "test")
    est = HSEClassifier.load(_model_dir(root, "full"))
    if not est.enable_serl:
        raise UsageError("attention export needs a model trained with SERL enabled")
    _, splits = load_dataset_dir(data_dir, (split,))
    ds = splits[split]
    if not 0 <= index < len(ds):
        raise DataError(f"sample index {index} outside the {split} split of {len(ds)} samples")
    X, _ = ds.arrays()
    weights = est.attention_maps(X[index:index + 1], level)[0]
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{split}_{index:05d}_level{level}"
    heat_file, raw_file = write_heatmap(weights, out / f"{stem}.pgm")
    write_ppm(out / f"{stem}_input.ppm", ds.images[index])
    print(f"wrote {heat_file} and {raw_file}")
    return EXIT_OK


def cmd_gradcheck(args, settings) -> int:
    from .gradcheck import gradient_suite

    tol = float(settings.get("gradcheck_tol", 1e-4))
    failed = 0
    for name, report in gradient_suite(seed=_pick(args, settings, "seed", 0), tol=tol):
        status = "ok" if report.passed else "FAIL"
        failed += not report.passed
        print(f"{status:4s} {name:26s} max_rel_err={report.max_rel_err:.3e} probes={report.n_probes}")
    print(f"{failed} failure(s)")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_inspect_taxonomy(args, settings) -> int:
    tax = load_fixture(args.taxonomy) if args.taxonomy in FIXTURES and not Path(args.taxonomy).exists() \
        else load_taxonomy(args.taxonomy)
    print(" ".join(str(n) for n in tax.level_sizes))
    problems = validate_taxonomy(tax)
    for v in problems:
        print(f"level {v.level} index {v.index}: {v.message}", file=sys.stderr)
    return EXIT_DATA if problems else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze-errors": cmd_analyze_errors,
    "export-attention": cmd_export_attention,
    "gradcheck": cmd_gradcheck,
    "inspect-taxonomy": cmd_inspect_taxonomy,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hse", description="Hierarchical fine-grained classification toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config setting")
        return p

    p = add("gen-data", "write a synthetic hierarchical dataset")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--seed", type=int)

    p = add("train", "train a model (or every variant with --variant all)")
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--variant", choices=[*VARIANTS, "all"])
    p.add_argument("--seed", type=int)

    p = add("eval", "evaluate a trained model on a dataset split")
    p.add_argument("--model", dest="model_dir")
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--mode", choices=EVAL_MODES)
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--report", help="also write the JSON report here")

    p = add("analyze-errors", "count inter- and intra-superclass errors per level")
    p.add_argument("--model", dest="model_dir")
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--split", choices=("train", "val", "test"))

    p = add("export-attention", "write an attention heatmap for one sample")
    p.add_argument("--model", dest="model_dir")
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--level", type=int)
    p.add_argument("--index", type=int)
    p.add_argument("--split", choices=("train", "val", "test"))

    p = add("gradcheck", "run the gradient check suite")
    p.add_argument("--seed", type=int)

    p = add("inspect-taxonomy", "print level sizes of a taxonomy file")
    p.add_argument("taxonomy", help=f"taxonomy TSV, or one of: {', '.join(sorted(FIXTURES))}")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        return COMMANDS[args.command](args, _settings(args))
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (UsageError, ConfigFileError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, GraphError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, TaxonomyError, CheckpointError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
