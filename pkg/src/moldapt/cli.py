"""Pipeline orchestration: one subcommand per stage.

Every command reads prior-stage artifacts by path and writes its own
artifact next to a ``run_manifest.json`` recording the resolved arguments,
seeds, and content hashes of all inputs, so any stage can be replayed
bitwise with ``moldapt replay``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys

import click
import numpy as np

from . import encoder as enc
from . import objectives, stats, toydata
from .chemspace import butina_cluster, leader_cluster, proportional_subset
from .downstream import (DatasetConfig, ForestHyperparams, LabeledDataset,
                         build_split_plan, embed_dataset, load_labeled_csv,
                         load_records, records_to_csv, records_to_json,
                         run_repeated_cv)
from .errors import (EmptyCorpus, EmptyDomainCorpus, MoldaptError, SmilesError,
                     TokenizationFailure)
from .features import (DESCRIPTOR_NAMES, descriptor_matrix, fit_scaler,
                       apply_scaler, morgan_fingerprint)
from .molgraph import parse_smiles
from .tokenizer import Vocabulary, train_wordpiece

MANIFEST_NAME = "run_manifest.json"

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(path) -> str:
    """Hash of a file, or of every file under a directory (sorted)."""
    if os.path.isfile(path):
        return _sha256(path)
    h = hashlib.sha256()
    for root, _dirs, files in sorted(os.walk(path)):
        for name in sorted(files):
            p = os.path.join(root, name)
            h.update(os.path.relpath(p, path).encode())
            h.update(_sha256(p).encode())
    return h.hexdigest()


def write_manifest(outdir, command: str, args: dict, inputs: list) -> None:
    manifest = {
        "command": command,
        "args": args,
        "inputs": {str(p): _hash_tree(p) for p in inputs},
        "outputs": {},
    }
    for name in sorted(os.listdir(outdir)):
        if name == MANIFEST_NAME:
            continue
        manifest["outputs"][name] = _hash_tree(os.path.join(outdir, name))
    with open(os.path.join(outdir, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def _read_corpus(path) -> list[str]:
    with open(path) as f:
        lines = [line.strip() for line in f]
    lines = [x for x in lines if x]
    if not lines:
        raise EmptyCorpus(f"no SMILES in {path}")
    return lines


def _load_dataset(path, config_path) -> LabeledDataset:
    if config_path:
        with open(config_path) as f:
            cfg = DatasetConfig.from_dict(json.load(f))
    else:
        cfg = DatasetConfig(name=os.path.splitext(os.path.basename(path))[0])
    return load_labeled_csv(path, cfg)


def _preset_config(preset: str, **overrides) -> enc.EncoderConfig:
    base = dict(enc.DESK_PRESET if preset == "desk" else enc.PAPER_PRESET)
    base.update({k: v for k, v in overrides.items() if v is not None})
    return enc.EncoderConfig(**base)


# ---------------------------------------------------------------------------
# stage implementations (shared by CLI and replay)
# ---------------------------------------------------------------------------

def run_toy_data(args: dict, outdir: str) -> list:
    os.makedirs(outdir, exist_ok=True)
    smiles = toydata.generate_corpus(args["corpus_size"], args["seed"])
    toydata.write_corpus(os.path.join(outdir, "corpus.smi"), smiles)
    lsmiles, target = toydata.generate_labeled(
        args["dataset_size"], args["seed"] + 1000, noise=args["noise"])
    toydata.write_labeled_csv(os.path.join(outdir, "dataset.csv"),
                              lsmiles, target)
    return []


def run_tokenizer_train(args: dict, outdir: str) -> list:
    corpus = _read_corpus(args["corpus"])
    vocab = train_wordpiece(corpus, args["vocab_size"], args["min_frequency"])
    os.makedirs(outdir, exist_ok=True)
    vocab.save(os.path.join(outdir, "vocab.txt"))
    return [args["corpus"]]


def run_subset(args: dict, outdir: str) -> list:
    corpus = _read_corpus(args["corpus"])
    fps = [morgan_fingerprint(parse_smiles(s), args["fp_radius"],
                              args["fp_bits"]) for s in corpus]
    cluster_fn = butina_cluster if args["method"] == "butina" else leader_cluster
    clustering = cluster_fn(fps, args["threshold"])
    sel = proportional_subset(clustering, args["fraction"], args["seed"])
    os.makedirs(outdir, exist_ok=True)
    toydata.write_corpus(os.path.join(outdir, "selected.smi"),
                         [corpus[i] for i in sel.indices])
    with open(os.path.join(outdir, "selection.json"), "w") as f:
        json.dump({
            "fraction": sel.fraction,
            "seed": sel.seed,
            "method": clustering.method,
            "threshold": clustering.threshold,
            "n_selected": len(sel.indices),
            "n_total": len(corpus),
            "per_cluster_quota": {str(k): v
                                  for k, v in sel.per_cluster_quota.items()},
            "cluster_sizes": [len(c) for c in clustering.clusters],
        }, f, indent=1, sort_keys=True)
    return [args["corpus"]]


def run_pretrain(args: dict, outdir: str) -> list:
    corpus = _read_corpus(args["corpus"])
    vocab = Vocabulary.load(args["vocab"])
    cfg = _preset_config(args["preset"], vocab_size=len(vocab),
                         max_len=args.get("max_len"), seed=args["seed"])
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "train_log.jsonl"), "w") as log:
        result = objectives.pretrain(
            corpus, vocab, cfg, args["objective"], epochs=args["epochs"],
            batch_size=args["batch_size"], lr=args["lr"], seed=args["seed"],
            log_file=log)
    enc.save_checkpoint(os.path.join(outdir, "checkpoint"), result.params,
                        cfg, vocab.tokens, step=result.steps,
                        scaler=result.scaler,
                        extra={"objective": args["objective"]})
    return [args["corpus"], args["vocab"]]


def run_adapt(args: dict, outdir: str) -> list:
    params, cfg, vocab_tokens, _ = enc.load_checkpoint(args["checkpoint"])
    vocab = Vocabulary(tokens=vocab_tokens)
    corpus = _read_corpus(args["corpus"])
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "train_log.jsonl"), "w") as log:
        result = objectives.domain_adapt(
            params, cfg, vocab, corpus, args["objective"],
            epochs=args["epochs"], batch_size=args["batch_size"],
            lr=args["lr"], seed=args["seed"], log_file=log)
    enc.save_checkpoint(os.path.join(outdir, "checkpoint"), result.params,
                        cfg, vocab.tokens, step=result.steps,
                        scaler=result.scaler,
                        extra={"objective": "da_" + args["objective"]})
    return [args["checkpoint"], args["corpus"]]


def run_embed(args: dict, outdir: str) -> list:
    params, cfg, vocab_tokens, _ = enc.load_checkpoint(args["checkpoint"])
    vocab = Vocabulary(tokens=vocab_tokens)
    smiles = _read_corpus(args["input"])
    emb = embed_dataset(params, cfg, vocab, smiles, pooling=args["pooling"])
    os.makedirs(outdir, exist_ok=True)
    np.save(os.path.join(outdir, "embeddings.npy"),
            emb.astype(np.float32))
    return [args["checkpoint"], args["input"]]


def run_evaluate(args: dict, outdir: str) -> list:
    dataset = _load_dataset(args["dataset"], args.get("dataset_config"))
    inputs = [args["dataset"]]
    if args.get("dataset_config"):
        inputs.append(args["dataset_config"])
    ds_eval = dataset.evaluation_view()

    rep = args["representation"]
    if rep == "embedding":
        params, cfg, vocab_tokens, _ = enc.load_checkpoint(args["checkpoint"])
        vocab = Vocabulary(tokens=vocab_tokens)
        X = embed_dataset(params, cfg, vocab, ds_eval.smiles,
                          pooling=args["pooling"]).astype(np.float64)
        inputs.append(args["checkpoint"])
    elif rep == "descriptors":
        mols = [parse_smiles(s) for s in ds_eval.smiles]
        desc = descriptor_matrix(mols)
        X = apply_scaler(desc, fit_scaler(desc, DESCRIPTOR_NAMES))
    elif rep == "fingerprint":
        X = np.stack([
            morgan_fingerprint(parse_smiles(s), args["fp_radius"],
                               args["fp_bits"]).to_array().astype(np.float64)
            for s in ds_eval.smiles])
    else:
        raise ValueError(f"unknown representation {rep}")

    plan = build_split_plan(dataset, args["splits"], args["folds"],
                            args["repeats"], args["seed"],
                            butina_threshold=args["threshold"])
    hp = ForestHyperparams(n_trees=args["n_trees"],
                           max_depth=args["max_depth"])
    records = run_repeated_cv(dataset, X, args["model_id"], plan,
                              seed=args["seed"], hp=hp)
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "split_plan.json"), "w") as f:
        f.write(plan.to_json())
    records_to_csv(records, os.path.join(outdir, "records.csv"))
    records_to_json(records, os.path.join(outdir, "records.json"))
    toydata.write_corpus(os.path.join(outdir, "da_corpus.smi"),
                         dataset.da_corpus())
    return inputs


def run_compare(args: dict, outdir: str) -> list:
    records = []
    for path in args["records"]:
        records.extend(load_records(path))
    report = stats.significance_report(records, args["models"],
                                       args["metric"])
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "report.json"), "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    return list(args["records"])


def run_report(args: dict, outdir: str) -> list:
    with open(args["report"]) as f:
        report = json.load(f)
    os.makedirs(outdir, exist_ok=True)
    stats.report_to_csv(report, os.path.join(outdir, "report.csv"))
    lines = [f"metric: {report['metric']}  (n_cells={report['n_cells']})"]
    for model, mean, ci in zip(report["models"], report["means"],
                               report["ci"]):
        lines.append(f"  {model}: {mean:.4f} +/- {ci:.4f} (95% CI)")
    for row in report.get("pairwise", []):
        lines.append(
            f"  {row['a']} vs {row['b']}: diff={row['diff']:.4f} "
            f"q={row['q']:.3f} p={row['p']:.4g} {row['stars']} "
            f"{row['direction']}")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(outdir, "report.txt"), "w") as f:
        f.write(text)
    click.echo(text, nl=False)
    return [args["report"]]


RUNNERS = {
    "toy-data": run_toy_data,
    "tokenizer-train": run_tokenizer_train,
    "subset": run_subset,
    "pretrain": run_pretrain,
    "adapt": run_adapt,
    "embed": run_embed,
    "evaluate": run_evaluate,
    "compare": run_compare,
    "report": run_report,
}


def execute(command: str, args: dict, outdir: str) -> None:
    inputs = RUNNERS[command](args, outdir)
    write_manifest(outdir, command, args, inputs)


def replay(manifest_path: str, outdir: str) -> None:
    with open(manifest_path) as f:
        manifest = json.load(f)
    execute(manifest["command"], manifest["args"], outdir)


# ---------------------------------------------------------------------------
# click surface
# ---------------------------------------------------------------------------

def _merged(ctx, config_path, **flags) -> dict:
    """Config-file values fill in for flags left at their defaults."""
    merged = dict(flags)
    if config_path:
        with open(config_path) as f:
            file_cfg = json.load(f)
        for key, value in file_cfg.items():
            key = key.replace("-", "_")
            if key not in merged:
                continue
            src = ctx.get_parameter_source(key)
            if src is not None and src.name == "DEFAULT":
                merged[key] = value
    return merged


def _run(command: str, args: dict, outdir: str) -> None:
    try:
        execute(command, args, outdir)
    except (FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except (SmilesError, EmptyCorpus, EmptyDomainCorpus,
            TokenizationFailure) as e:
        click.echo(f"data error: {e}", err=True)
        sys.exit(EXIT_DATA)
    except (MoldaptError, FloatingPointError, np.linalg.LinAlgError) as e:
        click.echo(f"numeric failure: {e}", err=True)
        sys.exit(EXIT_NUMERIC)


_config_opt = click.option("--config", "config_path", default=None,
                           type=click.Path(exists=True),
                           help="JSON config file; flags override its values")
_out_opt = click.option("--out", required=True, help="output directory")
_seed_opt = click.option("--seed", default=0, show_default=True)


@click.group()
def main():
    """Molecular-transformer pipeline."""


@main.command("toy-data")
@_config_opt
@_out_opt
@_seed_opt
@click.option("--corpus-size", default=500, show_default=True)
@click.option("--dataset-size", default=500, show_default=True)
@click.option("--noise", default=0.1, show_default=True)
@click.pass_context
def toy_data_cmd(ctx, config_path, out, **flags):
    """Generate the bundled synthetic corpus and labeled dataset."""
    _run("toy-data", _merged(ctx, config_path, **flags), out)


@main.command("tokenizer-train")
@_config_opt
@_out_opt
@click.option("--corpus", required=True)
@click.option("--vocab-size", default=512, show_default=True)
@click.option("--min-frequency", default=2, show_default=True)
@click.pass_context
def tokenizer_train_cmd(ctx, config_path, out, **flags):
    """Train a WordPiece vocabulary on a SMILES corpus."""
    _run("tokenizer-train", _merged(ctx, config_path, **flags), out)


@main.command("subset")
@_config_opt
@_out_opt
@_seed_opt
@click.option("--corpus", required=True)
@click.option("--fraction", type=float, required=True)
@click.option("--threshold", default=0.6, show_default=True)
@click.option("--method", default="bitbirch_like", show_default=True,
              type=click.Choice(["bitbirch_like", "butina"]))
@click.option("--fp-radius", default=2, show_default=True)
@click.option("--fp-bits", default=2048, show_default=True)
@click.pass_context
def subset_cmd(ctx, config_path, out, **flags):
    """Select a cluster-proportional pre-training subset."""
    _run("subset", _merged(ctx, config_path, **flags), out)


@main.command("pretrain")
@_config_opt
@_out_opt
@_seed_opt
@click.option("--corpus", required=True)
@click.option("--vocab", required=True)
@click.option("--objective", default="mlm", show_default=True,
              type=click.Choice(["mlm", "mtr"]))
@click.option("--epochs", default=20, show_default=True)
@click.option("--batch-size", default=16, show_default=True)
@click.option("--lr", default=3e-5, show_default=True)
@click.option("--preset", default="desk", show_default=True,
              type=click.Choice(["desk", "paper"]))
@click.option("--max-len", default=None, type=int)
@click.pass_context
def pretrain_cmd(ctx, config_path, out, **flags):
    """Pre-train an encoder on an unlabeled corpus."""
    _run("pretrain", _merged(ctx, config_path, **flags), out)


@main.command("adapt")
@_config_opt
@_out_opt
@_seed_opt
@click.option("--checkpoint", required=True)
@click.option("--corpus", required=True)
@click.option("--objective", default="mtr", show_default=True,
              type=click.Choice(["mlm", "mtr", "cl"]))
@click.option("--epochs", default=20, show_default=True)
@click.option("--batch-size", default=16, show_default=True)
@click.option("--lr", default=3e-5, show_default=True)
@click.pass_context
def adapt_cmd(ctx, config_path, out, **flags):
    """Domain-adapt a pre-trained checkpoint on domain SMILES."""
    _run("adapt", _merged(ctx, config_path, **flags), out)


@main.command("embed")
@_config_opt
@_out_opt
@click.option("--checkpoint", required=True)
@click.option("--input", "input", required=True,
              help="SMILES file, one per line")
@click.option("--pooling", default="cls", show_default=True,
              type=click.Choice(["cls", "mean"]))
@click.pass_context
def embed_cmd(ctx, config_path, out, **flags):
    """Extract frozen embeddings for a SMILES list."""
    _run("embed", _merged(ctx, config_path, **flags), out)


@main.command("evaluate")
@_config_opt
@_out_opt
@_seed_opt
@click.option("--dataset", required=True, help="labeled CSV (smiles,target)")
@click.option("--dataset-config", default=None)
@click.option("--representation", default="embedding", show_default=True,
              type=click.Choice(["embedding", "descriptors", "fingerprint"]))
@click.option("--checkpoint", default=None)
@click.option("--model-id", default="model", show_default=True)
@click.option("--pooling", default="cls", show_default=True,
              type=click.Choice(["cls", "mean"]))
@click.option("--splits", default="butina", show_default=True,
              type=click.Choice(["random", "butina"]))
@click.option("--repeats", default=5, show_default=True)
@click.option("--folds", default=5, show_default=True)
@click.option("--threshold", default=0.6, show_default=True)
@click.option("--n-trees", default=100, show_default=True)
@click.option("--max-depth", default=None, type=int)
@click.option("--fp-radius", default=2, show_default=True)
@click.option("--fp-bits", default=2048, show_default=True)
@click.pass_context
def evaluate_cmd(ctx, config_path, out, **flags):
    """Repeated-CV evaluation of a representation with an RF regressor."""
    args = _merged(ctx, config_path, **flags)
    if args["representation"] == "embedding" and not args.get("checkpoint"):
        click.echo("config error: --checkpoint required for embedding "
                   "representation", err=True)
        sys.exit(EXIT_CONFIG)
    _run("evaluate", args, out)


@main.command("compare")
@_config_opt
@_out_opt
@click.option("--records", multiple=True, required=True,
              help="records.csv/json files (repeatable)")
@click.option("--models", required=True, help="comma-separated model ids")
@click.option("--metric", default="MAE", show_default=True)
@click.pass_context
def compare_cmd(ctx, config_path, out, records, models, **flags):
    """ANOVA-RM + Tukey comparison of models on one metric."""
    args = _merged(ctx, config_path, records=list(records),
                   models=[m.strip() for m in models.split(",")], **flags)
    _run("compare", args, out)


@main.command("report")
@_config_opt
@_out_opt
@click.option("--report", "report", required=True, help="report.json path")
@click.pass_context
def report_cmd(ctx, config_path, out, **flags):
    """Flatten a comparison report to CSV and a text summary."""
    _run("report", _merged(ctx, config_path, **flags), out)


@main.command("replay")
@_out_opt
@click.option("--manifest", required=True)
def replay_cmd(out, manifest):
    """Re-run a stage from its manifest into a fresh directory."""
    try:
        replay(manifest, out)
    except (FileNotFoundError, ValueError, KeyError) as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)


if __name__ == "__main__":
    main()
