import csv
import json
import math
import random
import subprocess
import sys

import numpy as np
import pytest

from labelrand import cli, multistage, sco


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return str(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def blob_files(tmp_path, n=400, K=4, d=5, separation=6.0, seed=0, prefix=""):
    X, y, _ = sco.make_blob_problem(n, K, d, separation, np.random.default_rng(seed))
    ids = [f"{prefix}r{i}" for i in range(n)]
    feats = write_rows(tmp_path / f"{prefix}features.csv", ["id"] + [f"f{j}" for j in range(d)],
                       [[i] + [repr(float(v)) for v in row] for i, row in zip(ids, X)])
    labels = write_rows(tmp_path / f"{prefix}labels.csv", ["id", "label"], [[i, int(v)] for i, v in zip(ids, y)])
    return feats, labels, X, y


# randomize ----------------------------------------------------------------


def test_randomize_classic_eps_zero_marginal(tmp_path):
    n = 100_000
    labels = write_rows(tmp_path / "l.csv", ["id", "label"], [[i, i % 2 if i % 7 else 0] for i in range(n)])
    out = tmp_path / "out.csv"
    assert cli.main(["randomize", "--labels", labels, "--eps", "0", "--classes", "2", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert rows[0] == ["id", "label"]
    ones = sum(r[1] == "1" for r in rows[1:]) / n
    assert abs(ones - 0.5) <= 0.005


def test_randomize_with_prior_manifest_records_k_star(tmp_path):
    labels = write_rows(tmp_path / "l.csv", ["id", "label"], [["a", 0], ["b", 1], ["c", 2]])
    priors = write_rows(tmp_path / "p.csv", ["id", "p0", "p1", "p2"], [[i, 0.5, 0.3, 0.2] for i in "abc"])
    out = tmp_path / "out.csv"
    code = cli.main(["randomize", "--labels", labels, "--priors", priors, "--eps", repr(math.log(2)),
                     "--out", str(out)])
    assert code == 0
    rows = read_rows(out)
    assert rows[0] == ["id", "label", "k_star"]
    assert [r[2] for r in rows[1:]] == ["2", "2", "2"]
    assert all(r[1] in ("0", "1") for r in rows[1:])
    manifest = json.loads((tmp_path / "out.csv.manifest.json").read_text())
    assert manifest["k_star_counts"] == {"2": 3}
    assert manifest["params"]["mechanism"] == "with-prior"
    assert len(manifest["inputs"]["labels"]["sha256"]) == 64


def test_randomize_uniform_priors_matches_classic(tmp_path):
    n, K = 2000, 4
    labels = write_rows(tmp_path / "l.csv", ["id", "label"], [[i, i % K] for i in range(n)])
    priors = write_rows(tmp_path / "p.csv", ["id"] + [f"p{k}" for k in range(K)], [[i] + [0.25] * K for i in range(n)])
    cli.main(["randomize", "--labels", labels, "--eps", "1", "--classes", "4", "--out", str(tmp_path / "c.csv")])
    cli.main(["randomize", "--labels", labels, "--priors", priors, "--eps", "1", "--out", str(tmp_path / "w.csv")])
    classic = [r[:2] for r in read_rows(tmp_path / "c.csv")[1:]]
    with_prior = read_rows(tmp_path / "w.csv")[1:]
    assert [r[:2] for r in with_prior] == classic
    assert {r[2] for r in with_prior} == {"4"}


def test_randomize_top_k_needs_k(tmp_path):
    labels = write_rows(tmp_path / "l.csv", ["id", "label"], [["a", 0]])
    priors = write_rows(tmp_path / "p.csv", ["id", "p0", "p1"], [["a", 0.5, 0.5]])
    with pytest.raises(SystemExit) as err:
        cli.main(["randomize", "--labels", labels, "--priors", priors, "--mechanism", "top-k", "--eps", "1",
                  "--out", str(tmp_path / "o.csv")])
    assert err.value.code == 2


@pytest.mark.parametrize("label_rows, prior_rows, needle", [
    ([["a", 0], ["b", 1], ["a", 1]], None, "l.csv:4: duplicate id"),
    ([["a", 0], ["b", 3]], None, "l.csv:3: label 3 outside"),
    ([["a", 0], ["b", 1]], [["a", 0.5, 0.5], ["b", 0.5]], "p.csv:3: expected 2 prior columns"),
    ([["a", "x"]], None, "l.csv:2: label 'x' is not an integer"),
])
def test_randomize_input_errors_exit_2_with_line(tmp_path, capsys, label_rows, prior_rows, needle):
    labels = write_rows(tmp_path / "l.csv", ["id", "label"], label_rows)
    argv = ["randomize", "--labels", labels, "--eps", "1", "--out", str(tmp_path / "o.csv")]
    if prior_rows is not None:
        argv += ["--priors", write_rows(tmp_path / "p.csv", ["id", "p0", "p1"], prior_rows)]
    else:
        argv += ["--classes", "3"]
    assert cli.main(argv) == 2
    assert needle in capsys.readouterr().err
    assert not (tmp_path / "o.csv").exists()


def test_randomize_missing_prior_for_id(tmp_path, capsys):
    labels = write_rows(tmp_path / "l.csv", ["id", "label"], [["a", 0], ["b", 1]])
    priors = write_rows(tmp_path / "p.csv", ["id", "p0", "p1"], [["a", 0.5, 0.5]])
    assert cli.main(["randomize", "--labels", labels, "--priors", priors, "--eps", "1",
                     "--out", str(tmp_path / "o.csv")]) == 2


def test_seed_env_fallback(tmp_path, monkeypatch):
    labels = write_rows(tmp_path / "l.csv", ["id", "label"], [[i, i % 3] for i in range(300)])
    base = ["randomize", "--labels", labels, "--eps", "0.5", "--classes", "3"]
    monkeypatch.setenv("LABELRAND_SEED", "11")
    cli.main(base + ["--out", str(tmp_path / "env.csv")])
    monkeypatch.delenv("LABELRAND_SEED")
    cli.main(base + ["--seed", "11", "--out", str(tmp_path / "flag.csv")])
    cli.main(base + ["--seed", "12", "--out", str(tmp_path / "other.csv")])
    assert (tmp_path / "env.csv").read_bytes() == (tmp_path / "flag.csv").read_bytes()
    assert (tmp_path / "env.csv").read_bytes() != (tmp_path / "other.csv").read_bytes()
    monkeypatch.setenv("LABELRAND_SEED", "abc")
    assert cli.main(base + ["--out", str(tmp_path / "bad.csv")]) == 2


# verify -------------------------------------------------------------------


def test_verify_optimality_passes(capsys):
    assert cli.main(["verify", "optimality", "--classes", "6", "--trials", "1000"]) == 0
    out = capsys.readouterr().out
    assert "[FAIL]" not in out and out.count("[PASS]") == 5


def test_verify_dp_reports_e(capsys):
    assert cli.main(["verify", "dp", "--mechanism", "classic", "--eps", "1"]) == 0
    out = capsys.readouterr().out
    ratio = float(out.split("worst_ratio=")[1].split()[0])
    assert ratio == pytest.approx(math.e, rel=1e-12)


def test_verify_dp_claim_below_actual_fails(capsys):
    assert cli.main(["verify", "dp", "--mechanism", "classic", "--eps", "1", "--claim-eps", "0.5"]) == 1
    assert "[FAIL]" in capsys.readouterr().out


def test_verify_dp_with_prior_and_top_k():
    assert cli.main(["verify", "dp", "--mechanism", "with-prior", "--eps", "2", "--classes", "5", "--trials", "50"]) == 0
    assert cli.main(["verify", "dp", "--mechanism", "top-k", "--k", "3", "--eps", "2", "--classes", "5"]) == 0
    assert cli.main(["verify", "dp", "--mechanism", "top-k", "--eps", "2"]) == 2


def test_verify_unbiased_passes():
    assert cli.main(["verify", "unbiased", "--trials", "100"]) == 0


# priors -------------------------------------------------------------------


def test_priors_defaults_and_manifest(tmp_path):
    feats, labels, _, _ = blob_files(tmp_path, n=300)
    out = tmp_path / "priors.csv"
    assert cli.main(["priors", "--features", feats, "--labels", labels, "--out", str(out)]) == 0
    rows = read_rows(out)
    assert rows[0] == ["id", "p0", "p1", "p2", "p3"]
    P = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    assert np.allclose(P.sum(axis=1), 1.0)
    manifest = json.loads((tmp_path / "priors.csv.manifest.json").read_text())
    assert manifest["params"] == {"clusters": 100, "eps_prior": 0.05, "classes": 4}
    assert manifest["epsilon_spent"] == 0.05


def test_priors_too_many_clusters(tmp_path, capsys):
    feats, labels, _, _ = blob_files(tmp_path, n=20)
    assert cli.main(["priors", "--features", feats, "--labels", labels, "--clusters", "21",
                     "--out", str(tmp_path / "p.csv")]) == 2
    assert "exceeds" in capsys.readouterr().err


def test_priors_single_cluster_shares_global_histogram(tmp_path):
    feats, labels, _, _ = blob_files(tmp_path, n=200)
    out = tmp_path / "p.csv"
    cli.main(["priors", "--features", feats, "--labels", labels, "--clusters", "1", "--eps-prior", "1",
              "--out", str(out)])
    rows = read_rows(out)[1:]
    assert len({tuple(r[1:]) for r in rows}) == 1


def test_priors_clustered_blobs_concentrate(tmp_path):
    feats, labels, _, y = blob_files(tmp_path, n=400, separation=40.0)
    out = tmp_path / "p.csv"
    cli.main(["priors", "--features", feats, "--labels", labels, "--clusters", "4", "--eps-prior", "1",
              "--out", str(out)])
    P = np.array([[float(v) for v in r[1:]] for r in read_rows(out)[1:]])
    assert np.all(P[np.arange(400), y] > 0.9)


# mst ----------------------------------------------------------------------


def test_mst_writes_report_and_model(tmp_path):
    feats, labels, _, _ = blob_files(tmp_path, n=600)
    tf, tl, _, _ = blob_files(tmp_path, n=300, seed=1, prefix="test_")
    config = tmp_path / "run.cfg"
    config.write_text("# two stages\neps = 1.0\nstages = 2\nepochs = 5\n")
    out = tmp_path / "run"
    code = cli.main(["mst", "--features", feats, "--labels", labels, "--test-features", tf, "--test-labels", tl,
                     "--config", str(config), "--diagnostics", "--out", str(out)])
    assert code == 0
    records = [json.loads(line) for line in (out / "report.jsonl").read_text().splitlines()]
    stages = [r for r in records if r["type"] == "stage"]
    assert [s["stage"] for s in stages] == [1, 2]
    assert stages[0]["mean_k_star"] == 4 and stages[1]["mean_k_star"] < 4
    assert all(0 <= s["agreement"] <= 1 for s in stages)
    assert records[-1]["epsilon_spent"] == 1.0 and records[-1]["test_accuracy"] > 0.8
    with np.load(out / "model.npz") as model:
        assert model["weights"].shape == (5, 4)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["params"]["splits"] == [0.65, 0.35]


def test_mst_flags_override_config(tmp_path):
    feats, labels, _, _ = blob_files(tmp_path, n=100)
    config = tmp_path / "run.cfg"
    config.write_text("eps = 1.0\nstages = 2\n")
    out = tmp_path / "run"
    cli.main(["mst", "--features", feats, "--labels", labels, "--config", str(config), "--stages", "3",
              "--epochs", "1", "--out", str(out)])
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["params"]["stages"] == 3
    assert "agreement" not in (out / "report.jsonl").read_text()


def test_mst_config_errors(tmp_path, capsys):
    feats, labels, _, _ = blob_files(tmp_path, n=50)
    config = tmp_path / "bad.cfg"
    config.write_text("eps = 1.0\nbogus = 3\n")
    assert cli.main(["mst", "--features", feats, "--labels", labels, "--config", str(config),
                     "--out", str(tmp_path / "o")]) == 2
    assert "bad.cfg:2" in capsys.readouterr().err
    assert cli.main(["mst", "--features", feats, "--labels", labels, "--out", str(tmp_path / "o")]) == 2


def test_mst_large_eps_close_to_clean_training(tmp_path):
    feats, labels, X, y = blob_files(tmp_path, n=2000, K=5, d=6, separation=4.0)
    tf, tl, Xt, yt = blob_files(tmp_path, n=2000, K=5, d=6, separation=4.0, seed=5, prefix="test_")
    out = tmp_path / "run"
    cli.main(["mst", "--features", feats, "--labels", labels, "--test-features", tf, "--test-labels", tl,
              "--eps", "20", "--out", str(out)])
    private = json.loads((out / "report.jsonl").read_text().splitlines()[-1])["test_accuracy"]
    clean = multistage.softmax_learner_train(X, y, multistage.TrainConfig(), 5).accuracy(Xt, yt)
    assert abs(private - clean) <= 0.01


# sco ----------------------------------------------------------------------


def sco_rows(path):
    rows = read_rows(path)
    return [dict(zip(rows[0], r)) for r in rows[1:]]


def test_sco_risk_decreases_with_n(tmp_path):
    out = tmp_path / "sco.csv"
    assert cli.main(["sco", "--n", "1000", "10000", "--eps", "1", "--seeds", "5", "--out", str(out)]) == 0
    rows = sco_rows(out)
    med = {n: np.median([float(r["excess_risk"]) for r in rows if r["n"] == n]) for n in ("1000", "10000")}
    assert med["10000"] < med["1000"]


def test_sco_normal_sgd_noise_bound(tmp_path):
    out = tmp_path / "sco.csv"
    cli.main(["sco", "--n", "500", "--eps", "0.5", "--delta", "1e-5", "--algorithm", "normal-sgd",
              "--seeds", "3", "--out", str(out)])
    for r in sco_rows(out):
        assert float(r["mean_noise_sq"]) <= float(r["noise_bound"])


def test_sco_zero_samples_is_initial_point(tmp_path):
    out = tmp_path / "sco.csv"
    cli.main(["sco", "--n", "0", "--eps", "1", "--seeds", "2", "--out", str(out)])
    # w = 0 has risk 0 against an optimum of -1/2 for the one-point problem.
    assert [float(r["excess_risk"]) for r in sco_rows(out)] == [0.5, 0.5]


def test_sco_softmax_problem_runs(tmp_path):
    out = tmp_path / "sco.csv"
    assert cli.main(["sco", "--problem", "softmax", "--classes", "3", "--dim", "2", "--n", "200", "--eps", "1",
                     "--seeds", "2", "--holdout", "300", "--out", str(out)]) == 0
    assert all(r["diverged"] == "0" for r in sco_rows(out))


# reproducibility and label hygiene ----------------------------------------


def test_identical_runs_are_byte_identical(tmp_path):
    feats, labels, _, _ = blob_files(tmp_path, n=300)
    for tag in ("a", "b"):
        cli.main(["mst", "--features", feats, "--labels", labels, "--eps", "1", "--epochs", "2", "--seed", "4",
                  "--out", str(tmp_path / tag)])
        cli.main(["randomize", "--labels", labels, "--eps", "1", "--classes", "4", "--seed", "4",
                  "--out", str(tmp_path / f"{tag}.csv")])
    for name in ("report.jsonl", "randomized_labels.csv", "model.npz"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_shuffled_rows_give_same_per_id_labels(tmp_path):
    rows = [[f"id{i}", i % 5] for i in range(500)]
    shuffled = rows[:]
    random.Random(0).shuffle(shuffled)
    a = write_rows(tmp_path / "a.csv", ["id", "label"], rows)
    b = write_rows(tmp_path / "b.csv", ["id", "label"], shuffled)
    for src, dst in ((a, "oa.csv"), (b, "ob.csv")):
        cli.main(["randomize", "--labels", src, "--eps", "0.7", "--classes", "5", "--seed", "2",
                  "--out", str(tmp_path / dst)])
    out_a = dict(tuple(r) for r in read_rows(tmp_path / "oa.csv")[1:])
    out_b = dict(tuple(r) for r in read_rows(tmp_path / "ob.csv")[1:])
    assert out_a == out_b


def test_mst_order_invariant(tmp_path):
    feats, labels, _, _ = blob_files(tmp_path, n=200)
    f_rows, l_rows = read_rows(feats), read_rows(labels)
    perm = list(range(1, 201))
    random.Random(1).shuffle(perm)
    f2 = write_rows(tmp_path / "f2.csv", f_rows[0], [f_rows[i] for i in perm])
    l2 = write_rows(tmp_path / "l2.csv", l_rows[0], [l_rows[i] for i in perm[::-1]])
    cli.main(["mst", "--features", feats, "--labels", labels, "--eps", "1", "--epochs", "1", "--out", str(tmp_path / "a")])
    cli.main(["mst", "--features", f2, "--labels", l2, "--eps", "1", "--epochs", "1", "--out", str(tmp_path / "b")])
    ra = {r[0]: r[1:] for r in read_rows(tmp_path / "a" / "randomized_labels.csv")[1:]}
    rb = {r[0]: r[1:] for r in read_rows(tmp_path / "b" / "randomized_labels.csv")[1:]}
    assert ra == rb


def test_outputs_never_contain_true_label_column(tmp_path):
    feats, labels, _, y = blob_files(tmp_path, n=300)
    out = tmp_path / "run"
    cli.main(["mst", "--features", feats, "--labels", labels, "--eps", "0.5", "--epochs", "1", "--out", str(out)])
    cli.main(["randomize", "--labels", labels, "--eps", "0.5", "--classes", "4", "--out", str(tmp_path / "r.csv")])
    truth = [str(v) for v in y]
    for path in [out / "randomized_labels.csv", tmp_path / "r.csv"]:
        rows = read_rows(path)
        for col in range(1, len(rows[0])):
            assert [r[col] for r in rows[1:]] != truth
    for path in list(out.iterdir()) + [tmp_path / "r.csv.manifest.json"]:
        if path.suffix in (".json", ".jsonl"):
            text = path.read_text()
            assert "".join(truth[:40]) not in text.replace(",", "").replace(" ", "")


def test_console_entry_point(tmp_path):
    result = subprocess.run([sys.executable, "-m", "labelrand.cli", "--version"], capture_output=True, text=True)
    assert result.returncode == 0 and result.stdout.strip() == "0.1.0"
