import dataclasses
import struct

import numpy as np
import pytest

from pnetlab import attacks, cli, harness
from pnetlab.attacks import AttackConfig
from pnetlab.defense import DefenseConfig
from pnetlab.harness import ExperimentSpec, load_spec, metrics, run_experiment
from pnetlab.numerics import make_rng
from pnetlab.pnet_core import predict, save_model


def write_mnist(path, images, labels, split="test"):
    names = {"test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
             "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")}[split]
    n = len(images)
    path.mkdir(parents=True, exist_ok=True)
    (path / names[0]).write_bytes(struct.pack(">IIII", 0x803, n, 28, 28) + images.astype(np.uint8).tobytes())
    (path / names[1]).write_bytes(struct.pack(">II", 0x801, n) + labels.astype(np.uint8).tobytes())


@pytest.fixture
def world(tmp_path, small_pnet):
    """Synthetic MNIST-format data labelled mostly by the model itself."""
    rng = make_rng(8)
    raw = rng.integers(0, 256, (40, 28, 28))
    labels = predict(small_pnet, raw[..., None] / 255.0)
    labels[:5] = (labels[:5] + 1) % 10  # five images the model gets wrong
    write_mnist(tmp_path / "mnist", raw, labels)
    write_mnist(tmp_path / "mnist", raw, labels, "train")
    save_model(small_pnet, tmp_path / "m.pnet")
    return tmp_path


def spec_for(world, **kw):
    base = dict(
        dataset="mnist",
        data_path=str(world / "mnist"),
        models={"plain": str(world / "m.pnet")},
        n_eval=12,
        seed=4,
        output=str(world / "out"),
        attack=AttackConfig.defaults("untargeted", max_queries=30, epsilon=0.5),
    )
    base.update(kw)
    return ExperimentSpec(**base)


def test_metrics_examples():
    rows = [{"success": s, "queries": q, "l2": l} for s, q, l in [(True, 10, 1.0), (False, 100, 2.0), (True, 40, 0.5)]]
    m = metrics(rows)
    assert m["asr"] == pytest.approx(2 / 3) and m["afr"] == pytest.approx(1 / 3)
    assert m["avg_queries"] == pytest.approx(50.0)
    assert m["avg_l2"] == pytest.approx(sum(r["l2"] for r in rows) / 3)
    fails = metrics([{"success": False, "queries": 100, "l2": 0.0}] * 4)
    assert fails["asr"] == 0 and fails["avg_queries"] == 100
    with pytest.raises(ValueError):
        metrics([])


def test_run_experiment_report(world):
    rep = run_experiment(spec_for(world))
    assert rep.n_eval + rep.n_excluded == 12
    assert rep.asr + rep.afr == 1.0
    assert rep.avg_queries == sum(r["queries"] for r in rep.rows) / rep.n_eval
    assert rep.avg_l2 == pytest.approx(sum(r["l2"] for r in rep.rows) / rep.n_eval, abs=1e-12)
    assert rep.asr == sum(r["success"] for r in rep.rows) / rep.n_eval
    out = world / "out"
    text = (out / "rows_pnet_none.csv").read_text()
    assert text.startswith("# pnetlab-report/1\n")
    assert (out / "manifest_pnet_none.json").exists() and (out / "asr_curve_pnet_none.csv").exists()


def test_excludes_misclassified(world, small_pnet):
    rep = run_experiment(spec_for(world, n_eval=40))
    assert rep.n_excluded == 5 and rep.n_eval == 35


def test_determinism_and_jobs(world):
    run_experiment(spec_for(world, output=str(world / "a")))
    run_experiment(spec_for(world, output=str(world / "b")))
    run_experiment(spec_for(world, output=str(world / "c")), jobs=2)
    for f in sorted((world / "a").iterdir()):
        assert f.read_bytes() == (world / "b" / f.name).read_bytes()
        assert f.read_bytes() == (world / "c" / f.name).read_bytes()


def test_defended_run_records_both_verdicts(world):
    spec = spec_for(world, measure_dsr=True)
    rep = run_experiment(spec, "pnet", DefenseConfig("rpnet", 0.05))
    assert {"success", "clean_success", "attack_success"} <= set(rep.rows[0])
    assert rep.empirical_dsr is not None and len(rep.dsr_deciles) == 10


def test_asr_monotone_in_budget(world):
    asr = []
    for q in (5, 15, 40):
        spec = spec_for(world, attack=AttackConfig.defaults("untargeted", max_queries=q, epsilon=0.5), output=str(world / f"q{q}"))
        asr.append(run_experiment(spec).asr)
    assert asr == sorted(asr)


def test_empty_pool(world, small_pnet):
    raw = make_rng(9).integers(0, 256, (6, 28, 28))
    labels = (predict(small_pnet, raw[..., None] / 255.0) + 1) % 10
    write_mnist(world / "bad", raw, labels)
    rep = run_experiment(spec_for(world, data_path=str(world / "bad")))
    assert rep.rows == [] and rep.summary()["empty"] and rep.n_excluded == 6
    assert "empty=1" in (world / "out" / "rows_pnet_none.csv").read_text().splitlines()[0]


def test_truncated_flush(world, monkeypatch):
    calls = {"n": 0}
    real = attacks.ATTACKS["pnet"]

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 3:
            raise RuntimeError("boom")
        return real(*a, **k)

    monkeypatch.setitem(harness.ATTACKS, "pnet", flaky)
    with pytest.raises(RuntimeError):
        run_experiment(spec_for(world))
    lines = (world / "out" / "rows_pnet_none.csv").read_text().splitlines()
    assert "truncated=1" in lines[0] and len(lines) == 2 + 2


def test_spec_validation():
    with pytest.raises(harness.ConfigError):
        ExperimentSpec(n_eval=0)
    with pytest.raises(harness.ConfigError):
        ExperimentSpec(algorithms=["nope"])


def write_spec(world, body):
    p = world / "spec.ini"
    p.write_text(body)
    return p


def test_load_spec(world):
    p = write_spec(world, f"""
[experiment]
dataset = mnist
data_path = mnist
model = m.pnet
n_eval = 7
seed = 3
output = out
[attack]
algorithm = pnet, square
mode = targeted
max_queries = 50
[defense]
preset = mnist
kind = rnd, rpnet
rpnet.sigma = 0.07
""")
    s = load_spec(p)
    assert s.n_eval == 7 and s.algorithms == ["pnet", "square"] and s.attack.targeted and s.attack.max_queries == 50
    assert [(d.kind, d.sigma, d.sigma_in) for d in s.defenses] == [("rnd", 0.0, 0.03), ("rpnet", 0.07, 0.0)]
    assert s.models["plain"] == str(world / "m.pnet")


def test_load_spec_missing_model(world):
    p = write_spec(world, "[experiment]\nmodel = nothere.pnet\n")
    with pytest.raises(harness.ConfigError):
        load_spec(p)


# --- CLI --------------------------------------------------------------------------


def test_cli_attack(world, capsys):
    p = write_spec(world, "[experiment]\ndata_path = mnist\nmodel = m.pnet\nn_eval = 5\n[attack]\nalgorithm = pnet, simba-dct\nmode = untargeted\nmax_queries = 20\n")
    assert cli.main(["attack", str(p), "--out", str(world / "cli"), "--seed", "2"]) == 0
    assert (world / "cli" / "comparison.csv").exists()
    assert "simba-dct" in capsys.readouterr().out


def test_cli_defend_eval(world):
    p = write_spec(world, "[experiment]\ndata_path = mnist\nmodel = m.pnet\nn_eval = 4\n[attack]\nmode = targeted\nmax_queries = 15\n[defense]\npreset = mnist\nkind = none, rpnet\nsweep_sigmas = 0, 0.05\n")
    assert cli.main(["defend-eval", str(p), "--out", str(world / "de")]) == 0
    for name in ("comparison.csv", "accuracy_consistency.csv", "afr_vs_sigma.csv", "dsr_deciles_pnet_rpnet.csv"):
        assert (world / "de" / name).exists()


def test_cli_exit_codes(world, tmp_path):
    assert cli.main(["attack", str(write_spec(world, "[nothing]\n"))]) == 2
    assert cli.main(["attack", str(write_spec(world, "[experiment]\nn_eval = zero\n"))]) == 2
    (world / "junk").mkdir()
    (world / "junk" / "t10k-images-idx3-ubyte").write_bytes(b"\x00\x00\x08\x01" + bytes(20))
    (world / "junk" / "t10k-labels-idx1-ubyte").write_bytes(b"\x00\x00\x08\x01" + bytes(4))
    assert cli.main(["attack", str(write_spec(world, "[experiment]\ndata_path = junk\nmodel = m.pnet\n"))]) == 3
    (world / "broken.pnet").write_bytes(b"PNET" + bytes(8))
    assert cli.main(["margins", str(world / "broken.pnet"), "mnist", "--data-path", str(world / "mnist")]) == 3
    assert cli.main(["attack", str(write_spec(world, "[experiment]\ndata_path = mnist\nmodel = m.pnet\n[attack]\nepsilon = -1\n"))]) == 2


def test_cli_runtime_failure(world, monkeypatch):
    def explode(*a, **k):
        raise RuntimeError("kaput")

    monkeypatch.setattr(harness, "run_all", explode)
    p = write_spec(world, "[experiment]\ndata_path = mnist\nmodel = m.pnet\n")
    assert cli.main(["attack", str(p)]) == 4


def test_cli_analyze_dsr(tmp_path):
    assert cli.main(["analyze-dsr", "--sigmas", "0.05,0.1", "--a-grid", "0:0.1:0.05", "--trials", "20000", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "dsr.csv").read_text().splitlines()
    assert lines[1] == "a,sigma,s_theory,s_empirical,n,ci_low,ci_high" and len(lines) == 2 + 6
    assert (tmp_path / "misclassification.csv").exists()


def test_cli_margins(world, capsys):
    assert cli.main(["margins", str(world / "m.pnet"), "mnist", "--data-path", str(world / "mnist"), "--out", str(world / "mg")]) == 0
    lines = (world / "mg" / "margins.csv").read_text().splitlines()
    assert len(lines) == 2 + 20 and sum(int(l.split(",")[2]) for l in lines[2:]) == 40
    assert "median margin" in capsys.readouterr().out


def test_cli_train(world, capsys):
    cfg = world / "t.ini"
    cfg.write_text(f"[train]\ndataset = mnist\ndata_path = {world / 'mnist'}\narch = mnist\nepochs = 1\nbatch_size = 8\nbits = 8\n")
    assert cli.main(["train", str(cfg), "--out", str(world / "tr"), "--seed", "3"]) == 0
    assert (world / "tr" / "model.pnet").exists() and (world / "tr" / "history.csv").exists()
    assert "test accuracy" in capsys.readouterr().out
