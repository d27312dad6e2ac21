"""Acceptance gate: nine property/oracle/trend criteria, one test each.

Each test finishes with a single ``[criterion-N] PASS: ...`` line so the
suite doubles as a checklist when run with ``pytest -s tests/test_acceptance.py``.
"""

import random
import time

import numpy as np
import pytest
from click.testing import CliRunner
from scipy.stats import studentized_range

from moldapt import encoder as enc
from moldapt import objectives as obj
from moldapt import stats, toydata
from moldapt.chemspace import butina_cluster, leader_cluster, proportional_subset
from moldapt.cli import main as cli_main
from moldapt.downstream import (CensorRule, DatasetConfig, LabeledDataset,
                                build_split_plan, compute_metrics,
                                embed_dataset, run_repeated_cv)
from moldapt.features import (DESCRIPTOR_NAMES, ScalerStats, apply_scaler,
                              descriptor_matrix, morgan_fingerprint)
from moldapt.forest import ForestHyperparams
from moldapt.molgraph import canonical_smiles, parse_smiles
from moldapt.tokenizer import encode_batch, train_wordpiece
from tests.test_chemspace import oracle_butina, random_fp


def _desk_cfg(vocab_size, max_len, seed=0):
    base = dict(enc.DESK_PRESET)
    base.update(vocab_size=vocab_size, max_len=max_len, seed=seed)
    return enc.EncoderConfig(**base)


@pytest.fixture(scope="module")
def small_world():
    corpus = toydata.generate_corpus(32, seed=123)
    vocab = train_wordpiece(corpus, 160)
    cfg = _desk_cfg(len(vocab), max_len=40)
    return corpus, vocab, cfg


def test_criterion_1_gradient_gate(small_world):
    """Desk-scale encoder + all three heads vs central differences."""
    t0 = time.time()
    corpus, vocab, cfg = small_world
    params = enc.init_params(cfg, dtype=np.float64)
    batch = encode_batch(corpus[:3], vocab, cfg.max_len)
    rng = np.random.default_rng(0)
    eps, tol = 1e-6, 1e-4
    checked = 0

    def fd(pdict, grads, loss_fn, n_per_tensor=2):
        nonlocal checked
        for name, g in grads.items():
            flat = pdict[name].reshape(-1)
            gf = np.asarray(g).reshape(-1)
            for i in rng.choice(flat.size,
                                size=min(n_per_tensor, flat.size),
                                replace=False):
                orig = flat[i]
                flat[i] = orig + eps
                lp = loss_fn()
                flat[i] = orig - eps
                lm = loss_fn()
                flat[i] = orig
                est = (lp - lm) / (2 * eps)
                rel = abs(est - gf[i]) / max(1.0, abs(est), abs(gf[i]))
                assert rel < tol, f"{name}[{i}]: rel err {rel:.2e}"
                checked += 1

    # MLM (covers every encoder tensor plus the MLM head)
    mb = obj.apply_masking(batch, len(vocab), seed=1)
    p_mlm = dict(params)
    p_mlm.update(obj.init_mlm_head(cfg, np.random.default_rng(1),
                                   dtype=np.float64))
    _, grads, _ = obj.mlm_loss(p_mlm, cfg, mb, train=False)
    fd(p_mlm, grads, lambda: obj.mlm_loss(p_mlm, cfg, mb, train=False)[0])

    # MTR
    desc = descriptor_matrix([parse_smiles(s) for s in corpus])
    from moldapt.features import fit_scaler
    scaler = fit_scaler(desc, DESCRIPTOR_NAMES)
    targets = apply_scaler(desc[:3], scaler)
    tb = obj.MtrBatch(ids=batch.ids, attention_mask=batch.attention_mask,
                      targets=targets)
    p_mtr = dict(params)
    p_mtr.update(obj.init_mtr_head(cfg, targets.shape[1],
                                   np.random.default_rng(2),
                                   dtype=np.float64))
    _, grads, _ = obj.mtr_loss(p_mtr, cfg, tb, train=False)
    fd(p_mtr, grads, lambda: obj.mtr_loss(p_mtr, cfg, tb, train=False)[0])

    # CL
    mols = [parse_smiles(s) for s in corpus[:3]]
    trip = obj.build_triples(corpus[:3], mols, vocab, cfg.max_len, seed=5)
    _, grads, _ = obj.cl_loss(params, cfg, trip, train=False)
    fd(params, grads, lambda: obj.cl_loss(params, cfg, trip, train=False)[0])

    elapsed = time.time() - t0
    assert elapsed < 300
    print(f"\n[criterion-1] PASS: {checked} sampled coordinates across all "
          f"desk-scale tensors, rel err < 1e-4, {elapsed:.0f}s")


def test_criterion_2_memorization(small_world):
    corpus, vocab, cfg = small_world
    batch = encode_batch(corpus, vocab, cfg.max_len)

    t0 = time.time()
    mlm = obj.pretrain(corpus, vocab, cfg, "mlm", epochs=200, batch_size=16,
                       lr=1e-3, seed=0)
    accs = []
    for s in range(5):
        mb = obj.apply_masking(batch, len(vocab), seed=1000 + s)
        _, _, info = obj.mlm_loss(mlm.params, cfg, mb, train=False)
        accs.append(info["accuracy"])
    mlm_acc = float(np.mean(accs))
    t_mlm = time.time() - t0
    assert mlm_acc >= 0.95
    assert t_mlm < 600

    t0 = time.time()
    mtr = obj.pretrain(corpus, vocab, cfg, "mtr", epochs=200, batch_size=16,
                       lr=3e-3, seed=0)
    scaler = ScalerStats.from_dict(mtr.scaler)
    desc = descriptor_matrix([parse_smiles(s) for s in corpus])
    tb = obj.MtrBatch(ids=batch.ids, attention_mask=batch.attention_mask,
                      targets=apply_scaler(desc, scaler))
    mtr_loss, _, _ = obj.mtr_loss(mtr.params, cfg, tb, train=False)
    t_mtr = time.time() - t0
    assert mtr_loss < 1e-2
    assert t_mtr < 600

    t0 = time.time()
    base = enc.init_params(cfg)
    cl = obj.domain_adapt(base, cfg, vocab, corpus, "cl", epochs=120,
                          batch_size=16, lr=1e-3, seed=0)
    mols = [parse_smiles(s) for s in corpus]
    canon = [canonical_smiles(m) for m in mols]
    oks = []
    for s in (999_999, 777_777, 555_555):  # enumeration seeds never trained on
        trip = obj.build_triples(canon, mols, vocab, cfg.max_len, seed=s)
        _, _, diag = obj.cl_loss(cl.params, cfg, trip, train=False)
        oks.append(diag["sim_pos"] > np.diag(diag["sim_neg"]))
    cl_frac = float(np.concatenate(oks).mean())
    t_cl = time.time() - t0
    assert cl_frac >= 0.90
    assert t_cl < 600

    print(f"\n[criterion-2] PASS: MLM acc {mlm_acc:.3f} ({t_mlm:.0f}s), "
          f"MTR loss {mtr_loss:.4f} ({t_mtr:.0f}s), "
          f"CL margin {cl_frac:.3f} ({t_cl:.0f}s)")


def test_criterion_3_butina_oracle():
    rng = random.Random(2024)
    for trial in range(100):
        n = rng.randint(2, 25)
        fps = [random_fp(rng) for _ in range(n)]
        threshold = rng.choice([0.2, 0.3, 0.45, 0.6, 0.75])
        got = butina_cluster(fps, threshold).clusters
        want = oracle_butina(fps, threshold)
        assert got == want, f"trial {trial}: {got} != {want}"
    print("\n[criterion-3] PASS: 100/100 instances match the brute-force "
          "Butina oracle exactly")


def test_criterion_4_proportional_subset():
    smiles = toydata.generate_corpus(1000, seed=404)
    fps = [morgan_fingerprint(parse_smiles(s)) for s in smiles]
    clustering = leader_cluster(fps, 0.3)
    worst = 0.0
    for fraction in (0.3, 0.6):
        sel = proportional_subset(clustering, fraction, seed=1)
        selected = set(sel.indices)
        for members in clustering.clusters:
            ratio = len(selected & set(members)) / len(members)
            err = abs(ratio - fraction)
            assert err <= 1.0 / len(members) + 1e-12
            worst = max(worst, err * len(members))
    print(f"\n[criterion-4] PASS: fractions 0.3/0.6 on a 1000-molecule "
          f"corpus ({len(clustering.clusters)} clusters), per-cluster "
          f"deviation <= 1/|cluster| (worst {worst:.2f} members)")


def test_criterion_5_cv_integrity():
    smiles, target = toydata.generate_labeled(80, seed=55)
    censored = np.zeros(80, dtype=bool)
    censored[::9] = True
    ds = LabeledDataset(name="toy", smiles=smiles, target=target,
                        censored=censored)
    ev = ds.evaluation_view()
    n_eval = len(ev.smiles)
    for policy in ("random", "butina"):
        plan = build_split_plan(ds, policy, 5, 5, seed=0,
                                butina_threshold=0.35)
        cells = list(plan.cells())
        assert len(cells) == 25
        for repeat in plan.folds:
            flat = sorted(i for fold in repeat for i in fold)
            assert flat == list(range(n_eval))  # disjoint and complete
        if policy == "butina":
            fps = [morgan_fingerprint(parse_smiles(s)) for s in ev.smiles]
            clustering = butina_cluster(fps, 0.35)
            for repeat in plan.folds:
                for members in clustering.clusters:
                    hits = [f for f, fold in enumerate(repeat)
                            if set(members) & set(fold)]
                    assert len(hits) == 1  # whole cluster in one fold
    # censored rows: out of evaluation, in the DA corpus
    censored_smiles = {s for s, c in zip(smiles, censored) if c}
    assert not censored_smiles & set(ev.smiles)
    assert censored_smiles <= set(ds.da_corpus())
    print(f"\n[criterion-5] PASS: 25 disjoint cells per policy over "
          f"{n_eval} eval rows; clusters never straddle folds; "
          f"{int(censored.sum())} censored rows excluded from evaluation "
          f"and present in the DA corpus")


def test_criterion_6_statistics_oracles():
    s = stats.PairedSample(a=np.array([2.0, 3.0, 4.0]),
                           b=np.array([1.0, 1.0, 1.0]))  # d = [1, 2, 3]
    _, _, p = stats.paired_t(s)
    assert p == pytest.approx(0.0742, abs=1e-4)

    # ANOVA-RM against the independent statsmodels implementation
    pd = pytest.importorskip("pandas")
    from statsmodels.stats.anova import AnovaRM
    vals = np.array([
        [45.0, 42.0, 36.0, 39.0, 51.0],
        [50.0, 42.0, 41.0, 35.0, 55.0],
        [55.0, 45.0, 43.0, 40.0, 53.0],
    ])
    res = stats.anova_rm(vals)
    long = pd.DataFrame({
        "subject": np.tile(np.arange(5), 3),
        "cond": np.repeat(np.arange(3), 5),
        "value": vals.reshape(-1),
    })
    table = AnovaRM(long, "value", "subject",
                    within=["cond"]).fit().anova_table
    f_ref = float(table["F Value"].iloc[0])
    assert res.F == pytest.approx(f_ref, abs=1e-6)

    q = stats.q_crit(0.05, 3, 12)
    assert q == pytest.approx(3.77, abs=0.01)
    assert stats.studentized_range_sf(q, 3, 12) == pytest.approx(0.05,
                                                                 abs=1e-8)
    print(f"\n[criterion-6] PASS: paired-t p={p:.5f} (0.0742 +/- 1e-4), "
          f"ANOVA-RM F={res.F:.6f} matches statsmodels to 1e-6, "
          f"q_crit(0.05,3,12)={q:.4f} (3.77 +/- 0.01)")


def test_criterion_7_metric_identities():
    rng = np.random.default_rng(7)
    for _ in range(50):
        y = rng.standard_normal(30)
        yhat = rng.standard_normal(30)
        m = compute_metrics(y, yhat)
        assert m["RMSE"] >= m["MAE"] - 1e-15
    y = rng.standard_normal(30)
    assert compute_metrics(y, y)["R2"] == pytest.approx(1.0, abs=1e-12)
    at_mean = compute_metrics(y, np.full_like(y, y.mean()))
    assert at_mean["R2"] == pytest.approx(0.0, abs=1e-12)
    print("\n[criterion-7] PASS: RMSE >= MAE on 50 random pairs; "
          "R2(y,y)=1 and R2(y,mean)=0 to 1e-12")


def test_criterion_8_desk_scale_trend():
    """pretrain-MLM -> DA-MTR beats pretrain-MLM with no DA on the bundled
    synthetic dataset (descriptor-derived target), one-tailed p < 0.05."""
    t0 = time.time()
    corpus = toydata.generate_corpus(150, seed=31)
    smiles, target = toydata.generate_labeled(120, seed=77)
    ds = LabeledDataset(name="toy", smiles=smiles, target=target,
                        censored=np.zeros(120, dtype=bool))
    vocab = train_wordpiece(corpus, 200)
    cfg = _desk_cfg(len(vocab), max_len=48)

    pre = obj.pretrain(corpus, vocab, cfg, "mlm", epochs=8, batch_size=16,
                       lr=1e-3, seed=0)
    da = obj.domain_adapt(pre.params, cfg, vocab, ds.da_corpus(), "mtr",
                          epochs=40, batch_size=16, lr=1e-3, seed=0)

    plan = build_split_plan(ds, "random", 5, 5, seed=0)
    hp = ForestHyperparams(n_trees=25)
    recs = []
    for model_id, params in (("no_da", pre.params), ("da_mtr", da.params)):
        X = embed_dataset(params, cfg, vocab, smiles,
                          pooling="cls").astype(np.float64)
        recs += run_repeated_cv(ds, X, model_id, plan, seed=0, hp=hp)

    table = stats.align_records(recs, ["no_da", "da_mtr"], "MAE")
    assert table.shape == (2, 25)
    t, df, p = stats.paired_t(stats.PairedSample(a=table[0], b=table[1]),
                              tail="greater")  # H1: no_da MAE > da MAE
    elapsed = time.time() - t0
    assert table[1].mean() < table[0].mean()
    assert p < 0.05
    assert elapsed < 1800
    print(f"\n[criterion-8] PASS: MAE no-DA {table[0].mean():.4f} vs "
          f"DA-MTR {table[1].mean():.4f} over 25 cells, one-tailed "
          f"p={p:.2e} < 0.05, {elapsed:.0f}s < 30min")


def test_criterion_9_replay_determinism(tmp_path):
    runner = CliRunner()

    def run(*args):
        r = runner.invoke(cli_main, list(args), catch_exceptions=False)
        assert r.exit_code == 0, r.output
        return r

    toy = tmp_path / "toy"
    run("toy-data", "--out", str(toy), "--seed", "0",
        "--corpus-size", "40", "--dataset-size", "30")
    tok = tmp_path / "tok"
    run("tokenizer-train", "--out", str(tok),
        "--corpus", str(toy / "corpus.smi"), "--vocab-size", "140")
    pre = tmp_path / "pre"
    run("pretrain", "--out", str(pre), "--corpus", str(toy / "corpus.smi"),
        "--vocab", str(tok / "vocab.txt"), "--epochs", "1",
        "--max-len", "40", "--seed", "0")
    ev = tmp_path / "ev"
    run("evaluate", "--out", str(ev), "--dataset", str(toy / "dataset.csv"),
        "--representation", "descriptors", "--splits", "random",
        "--repeats", "2", "--folds", "3", "--n-trees", "5", "--seed", "0")

    replayed = 0
    for stage in (toy, tok, pre, ev):
        out = tmp_path / (stage.name + "_replay")
        run("replay", "--manifest", str(stage / "run_manifest.json"),
            "--out", str(out))
        originals = sorted(p for p in stage.rglob("*") if p.is_file())
        for p in originals:
            q = out / p.relative_to(stage)
            assert q.read_bytes() == p.read_bytes(), f"{q} differs"
            replayed += 1
    print(f"\n[criterion-9] PASS: 4 stages replayed from manifests, "
          f"{replayed} artifact files bitwise identical")
