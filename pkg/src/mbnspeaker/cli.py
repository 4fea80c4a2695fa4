"""Command line interface.

Every subcommand reads an optional JSON config (``--config``) and accepts one
flag per config key; flags win over file values. Section keys become
``--<section>-<field>`` flags, e.g. ``--ubm-num-mixtures 16`` sets
``{"ubm": {"num_mixtures": 16}}``.

Exit status is 0 on success, 1 for invalid configuration or input data, and
2 for failures while running.
"""

import argparse
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path

from mbnspeaker import pipeline as pl
from mbnspeaker.cluster import (
    ClusterError,
    evaluation_report,
    read_assignments,
    write_assignments,
    write_report,
    ClusterAssignment,
)
from mbnspeaker.dataio import (
    DatasetError,
    SyntheticCorpusSpec,
    encode_labels,
    generate_synthetic_corpus,
    load_dataset,
    load_matrix,
    read_manifest,
    save_matrix,
    write_dataset,
)
from mbnspeaker.mbn import MbnConfig, MbnError, pca_fit, pca_transform, train_mbn
from mbnspeaker.ubm import GmmModel, UbmConfig, UbmError, extract_supervectors, train_ubm

logger = logging.getLogger("mbnspeaker")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2

SECTIONS = {
    "corpus": SyntheticCorpusSpec,
    "ubm": UbmConfig,
    "mbn": MbnConfig,
    "cluster": pl.ClusterSettings,
}
TOP_LEVEL = {
    "manifest": str,
    "output_dir": str,
    "corpus_seed": int,
    "methods": "list",
    "pca_output_dim": int,
    "seed": int,
    "workers": int,
}
SWEEP_KEYS = ("mixture_counts", "em_iteration_options", "output_dims", "seeds", "layer_truncations")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_list(text):
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _str_list(text):
    return [tok.strip() for tok in text.split(",") if tok.strip()]


def _converter(tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        return _converter(inner[0])
    if origin in (tuple, list):
        return _int_list
    if tp is bool:
        return _bool
    if tp in (int, float, str):
        return tp
    return str


def _add_section_flags(parser, names, skip=()):
    for section in names:
        cls = SECTIONS[section]
        hints = typing.get_type_hints(cls)
        group = parser.add_argument_group(f"{section} options")
        for f in dataclasses.fields(cls):
            if (section, f.name) in skip:
                continue
            flag = f"--{section}-{f.name.replace('_', '-')}"
            group.add_argument(flag, dest=f"{section}.{f.name}", type=_converter(hints[f.name]),
                               default=None, metavar=f.name.upper())


def _add_top_flags(parser, names):
    for name in names:
        kind = TOP_LEVEL[name]
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None,
                            type=_str_list if kind == "list" else kind)


def _read_json(path):
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc


def _overrides(args):
    """Flag values that were actually given, as ``{key: value}`` with dotted section keys."""
    skip = {"command", "config", "func", "verbose"}
    return {k: v for k, v in vars(args).items() if v is not None and k not in skip}


def _merged(args):
    """Config dictionary from ``--config`` with flag overrides applied."""
    obj = _read_json(getattr(args, "config", None))
    pipeline_part = dict(obj)
    for key, value in _overrides(args).items():
        if "." in key:
            section, name = key.split(".", 1)
            if section == "corpus":
                pipeline_part.pop("manifest", None)
            sub = dict(pipeline_part.get(section) or {})
            sub[name] = value
            pipeline_part[section] = sub
        elif key in TOP_LEVEL:
            if key == "manifest":
                pipeline_part.pop("corpus", None)
            pipeline_part[key] = value
    return obj, pipeline_part


def _section(cfg, name):
    cls = SECTIONS[name]
    data = dict(cfg.get(name) or {})
    if name == "mbn":
        return MbnConfig.from_json(data)
    if name == "corpus" and "frames_per_utterance_range" in data:
        data["frames_per_utterance_range"] = tuple(data["frames_per_utterance_range"])
    try:
        return cls(**data)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    _, cfg = _merged(args)
    spec = _section(cfg, "corpus")
    utterances, labels, _ = generate_synthetic_corpus(spec)
    path = write_dataset(args.out, utterances, [f"spk{t:03d}" for t in labels], fmt=args.format)
    print(path)


def cmd_ubm_train(args):
    _, cfg = _merged(args)
    utterances, _ = load_dataset(args.manifest)
    model = train_ubm(utterances, _section(cfg, "ubm"), workers=args.workers)
    model.save(args.out)
    print(args.out)


def cmd_svec(args):
    _, cfg = _merged(args)
    utterances, _ = load_dataset(args.manifest)
    model = GmmModel.load(args.ubm)
    ubm_cfg = _section(cfg, "ubm")
    X = extract_supervectors(model, utterances, normalize=ubm_cfg.normalize_stats, workers=args.workers)
    save_matrix(args.out, X)
    print(args.out)


def cmd_mbn_fit(args):
    _, cfg = _merged(args)
    X = load_matrix(args.input)
    model, Y = train_mbn(X, _section(cfg, "mbn"), workers=args.workers)
    model.save(args.model)
    save_matrix(args.out, Y)
    print(args.out)


def cmd_pca_fit(args):
    X = load_matrix(args.input)
    mean, proj, _ = pca_fit(X, args.dim)
    save_matrix(args.out, pca_transform(X, mean, proj))
    if args.model:
        Path(args.model).mkdir(parents=True, exist_ok=True)
        save_matrix(Path(args.model) / "mean.bin", mean[None, :])
        save_matrix(Path(args.model) / "projection.bin", proj)
    print(args.out)


def _ids_and_truth(manifest):
    if manifest is None:
        return None, None
    m = read_manifest(manifest)
    ids = [e.utterance_id for e in m.entries]
    truth = encode_labels([e.label for e in m.entries])[0] if m.has_labels else None
    return ids, truth


def cmd_cluster(args):
    _, cfg = _merged(args)
    Y = load_matrix(args.input)
    ids, truth = _ids_and_truth(args.manifest)
    if ids is None:
        ids = [str(i) for i in range(Y.shape[0])]
    if len(ids) != Y.shape[0]:
        raise UsageError(f"manifest has {len(ids)} entries but the embedding has {Y.shape[0]} rows")
    settings = _section(cfg, "cluster")
    seed = cfg.get("seed", 0) or 0
    assignment = pl.cluster_embedding(Y, settings, truth, seed, workers=args.workers)
    write_assignments(args.out, ids, assignment.labels)
    if args.report:
        write_report(args.report, evaluation_report(assignment, truth))
    print(args.out)


def cmd_evaluate(args):
    ids, labels = read_assignments(args.assignments)
    m_ids, truth = _ids_and_truth(args.manifest)
    if truth is None:
        raise UsageError("the manifest carries no ground-truth labels")
    index = {uid: i for i, uid in enumerate(m_ids)}
    missing = [uid for uid in ids if uid not in index]
    if missing:
        raise UsageError(f"assignments mention unknown utterances, e.g. {missing[0]!r}")
    aligned = truth[[index[uid] for uid in ids]]
    report = evaluation_report(ClusterAssignment(labels), aligned)
    if args.out:
        write_report(args.out, report)
    print(json.dumps(report, sort_keys=True))


def _pipeline_config(args):
    obj, cfg = _merged(args)
    # the sweep grid shares the file with the pipeline settings
    cfg.pop("sweep", None)
    if cfg.get("manifest") is None and cfg.get("corpus") is None:
        cfg["corpus"] = {}
    return obj, pl.PipelineConfig.from_json(cfg)


def cmd_pipeline(args):
    _, config = _pipeline_config(args)
    report = pl.run_pipeline(config)
    print(json.dumps({m: r["nmi"] for m, r in report["methods"].items()}, sort_keys=True))


def cmd_sweep(args):
    obj, config = _pipeline_config(args)
    sweep_obj = dict(obj.get("sweep") or {})
    for key in SWEEP_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            sweep_obj[key] = value
    sweep = pl.SweepSpec.from_json(sweep_obj)
    rows, errors = pl.run_sweep(sweep, config, output_dir=config.output_dir, workers=config.workers)
    for row in pl.summarize_best_over_dims(rows):
        print(f"{row['method']:>10}  C={row['mixtures']:<3} em={row['em_iters']:<3} nmi={row['nmi']:.4f}")
    if errors:
        logger.error("%d sweep cells failed; see errors.json", len(errors))
        return EXIT_FAILED
    return EXIT_OK


def cmd_plot(args):
    from mbnspeaker import plots

    if args.kind == "scatter":
        if args.embedding is None or args.manifest is None:
            raise UsageError("scatter needs --embedding and --manifest")
        Y = load_matrix(args.embedding)
        m = read_manifest(args.manifest)
        labels = [e.label if e.label is not None else "" for e in m.entries]
        paths = plots.emit_scatter(args.out, [e.utterance_id for e in m.entries], Y, labels)
    else:
        if args.results is None:
            raise UsageError(f"{args.kind} needs --results")
        rows = pl.read_results(args.results)
        paths = plots.emit_plot_data(args.out, args.kind, rows=rows)
    for p in paths:
        print(p)


# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="mbnspeaker", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_, sections=(), top=()):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file")
        # a run replaces corpus.seed with its effective corpus seed, so there
        # --corpus-seed sets the top-level corpus_seed key instead
        skip = {("corpus", "seed")} if "corpus_seed" in top else set()
        _add_section_flags(p, sections, skip)
        _add_top_flags(p, top)
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "generate a synthetic speaker corpus", ["corpus"])
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=["bin", "csv"], default="bin")

    p = command("ubm-train", cmd_ubm_train, "train a UBM", ["ubm"], ["workers"])
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="UBM JSON path")

    p = command("svec", cmd_svec, "extract supervectors", ["ubm"], ["workers"])
    p.add_argument("--manifest", required=True)
    p.add_argument("--ubm", required=True)
    p.add_argument("--out", required=True, help="supervector matrix path")

    p = command("mbn-fit", cmd_mbn_fit, "train an MBN and embed its input", ["mbn"], ["workers"])
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--out", required=True, help="embedding path")

    p = command("pca-fit", cmd_pca_fit, "PCA baseline embedding")
    p.add_argument("--input", required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", help="directory for mean/projection")

    p = command("cluster", cmd_cluster, "cluster an embedding", ["cluster"], ["seed", "workers"])
    p.add_argument("--input", required=True)
    p.add_argument("--manifest", help="manifest for utterance ids and labels")
    p.add_argument("--out", required=True, help="assignments CSV")
    p.add_argument("--report", help="evaluation report JSON")

    p = command("evaluate", cmd_evaluate, "score assignments against manifest labels")
    p.add_argument("--assignments", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="report JSON")

    all_top = list(TOP_LEVEL)
    command("pipeline", cmd_pipeline, "run the full pipeline", list(SECTIONS), all_top)

    p = command("sweep", cmd_sweep, "run a parameter sweep", list(SECTIONS), all_top)
    for key in SWEEP_KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=_int_list, default=None)

    p = command("plot", cmd_plot, "emit plot data and SVG")
    p.add_argument("--kind", choices=["scatter", "sensitivity", "depth"], required=True)
    p.add_argument("--results", help="sweep results.csv")
    p.add_argument("--embedding")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        status = args.func(args)
    except (UsageError, pl.ConfigError, DatasetError, UbmError, MbnError, ClusterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except pl.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except Exception as exc:  # numeric or I/O failure
        logger.debug("unhandled failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK if status is None else status


if __name__ == "__main__":
    sys.exit(main())
