import json

import numpy as np
import pytest
from click.testing import CliRunner

from moldapt.cli import main

runner = CliRunner()


def run(*args):
    result = runner.invoke(main, list(args), catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One small end-to-end run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("pipeline")
    toy = root / "toy"
    run("toy-data", "--out", str(toy), "--seed", "0",
        "--corpus-size", "40", "--dataset-size", "36")
    tok = root / "tok"
    run("tokenizer-train", "--out", str(tok), "--corpus",
        str(toy / "corpus.smi"), "--vocab-size", "140")
    pre = root / "pre"
    run("pretrain", "--out", str(pre), "--corpus", str(toy / "corpus.smi"),
        "--vocab", str(tok / "vocab.txt"), "--objective", "mlm",
        "--epochs", "1", "--max-len", "40", "--seed", "0")
    return root


def test_toy_data_outputs(pipeline):
    toy = pipeline / "toy"
    assert (toy / "corpus.smi").exists()
    assert (toy / "dataset.csv").exists()
    manifest = json.loads((toy / "run_manifest.json").read_text())
    assert manifest["command"] == "toy-data"
    assert "corpus.smi" in manifest["outputs"]


def test_tokenizer_and_manifest_hashes(pipeline):
    tok = pipeline / "tok"
    vocab = (tok / "vocab.txt").read_text().splitlines()
    assert vocab[:5] == ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    manifest = json.loads((tok / "run_manifest.json").read_text())
    assert str(pipeline / "toy" / "corpus.smi") in manifest["inputs"]


def test_subset_command(pipeline):
    sub = pipeline / "sub"
    run("subset", "--out", str(sub), "--corpus",
        str(pipeline / "toy" / "corpus.smi"), "--fraction", "0.5",
        "--threshold", "0.25", "--seed", "1")
    sel = json.loads((sub / "selection.json").read_text())
    assert sel["fraction"] == 0.5
    n = len((sub / "selected.smi").read_text().splitlines())
    assert n == sel["n_selected"]


def test_adapt_embed_evaluate_compare_report(pipeline, tmp_path):
    pre_ckpt = str(pipeline / "pre" / "checkpoint")
    da = tmp_path / "da"
    run("adapt", "--out", str(da), "--checkpoint", pre_ckpt, "--corpus",
        str(pipeline / "toy" / "corpus.smi"), "--objective", "mtr",
        "--epochs", "1", "--seed", "0")
    emb = tmp_path / "emb"
    run("embed", "--out", str(emb), "--checkpoint", str(da / "checkpoint"),
        "--input", str(pipeline / "toy" / "corpus.smi"))
    E = np.load(emb / "embeddings.npy")
    assert E.shape[0] == 40

    evs = []
    for model_id in ("m1", "m2"):
        out = tmp_path / f"ev_{model_id}"
        run("evaluate", "--out", str(out),
            "--dataset", str(pipeline / "toy" / "dataset.csv"),
            "--representation", "descriptors", "--model-id", model_id,
            "--splits", "random", "--repeats", "2", "--folds", "3",
            "--n-trees", "5", "--seed", "0" if model_id == "m1" else "1")
        evs.append(out)
    cmp_dir = tmp_path / "cmp"
    run("compare", "--out", str(cmp_dir),
        "--records", str(evs[0] / "records.csv"),
        "--records", str(evs[1] / "records.csv"),
        "--models", "m1,m2", "--metric", "MAE")
    report = json.loads((cmp_dir / "report.json").read_text())
    assert report["n_cells"] == 6
    rep = tmp_path / "rep"
    result = run("report", "--out", str(rep), "--report",
                 str(cmp_dir / "report.json"))
    assert "MAE" in result.output
    assert (rep / "report.csv").exists()


def test_replay_bitwise(pipeline, tmp_path):
    src = pipeline / "tok"
    dst = tmp_path / "tok_replay"
    run("replay", "--manifest", str(src / "run_manifest.json"),
        "--out", str(dst))
    for name in ("vocab.txt", "run_manifest.json"):
        assert (dst / name).read_bytes() == (src / name).read_bytes()


def test_config_file_merging(pipeline, tmp_path):
    cfgfile = tmp_path / "cfg.json"
    cfgfile.write_text(json.dumps({"vocab-size": 120}))
    out = tmp_path / "tok2"
    run("tokenizer-train", "--out", str(out), "--config", str(cfgfile),
        "--corpus", str(pipeline / "toy" / "corpus.smi"))
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["args"]["vocab_size"] == 120
    # explicit flag beats config value
    out2 = tmp_path / "tok3"
    run("tokenizer-train", "--out", str(out2), "--config", str(cfgfile),
        "--corpus", str(pipeline / "toy" / "corpus.smi"),
        "--vocab-size", "130")
    manifest = json.loads((out2 / "run_manifest.json").read_text())
    assert manifest["args"]["vocab_size"] == 130


def test_exit_codes(pipeline, tmp_path):
    # missing corpus file -> config error (2)
    r = runner.invoke(main, ["tokenizer-train", "--out", str(tmp_path / "x"),
                             "--corpus", str(tmp_path / "nope.smi")])
    assert r.exit_code == 2
    # corpus with invalid SMILES -> data error (3)
    bad = tmp_path / "bad.smi"
    bad.write_text("C(C\n")
    r = runner.invoke(main, ["subset", "--out", str(tmp_path / "y"),
                             "--corpus", str(bad), "--fraction", "0.5"])
    assert r.exit_code == 3
    # embedding evaluation without checkpoint -> config error (2)
    r = runner.invoke(main, ["evaluate", "--out", str(tmp_path / "z"),
                             "--dataset",
                             str(pipeline / "toy" / "dataset.csv"),
                             "--representation", "embedding"])
    assert r.exit_code == 2
