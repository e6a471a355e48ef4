"""Grid orchestration: sweeps, studies, transfer, and report emission.

The attack and quantization engines have their own reference checks
(test_attacks, test_quant); here a tiny synthetic problem pins down the
bookkeeping around them: which adversarial batch meets which victim, how
rows are labelled, cached, sorted, and written out.
"""

import dataclasses
import json

import numpy as np
import pytest

from axdnn import attacks as atk
from axdnn import data as dat
from axdnn import harness, quant
from axdnn import luts as lutmod
from axdnn.config import parse_config
from axdnn.harness import (FLOAT_LABEL, HarnessError, ReportEntry, RobustnessReport,
                           ThresholdError, TransferEntry, config_hash, emit_plot_data,
                           emit_report, emit_transfer_csv, prepare_sweep,
                           quantization_study, read_report_csv, read_report_jsonl,
                           robustness_sweep, transferability_matrix)
from axdnn.ops import softmax_cross_entropy
from axdnn.train import evaluate

from test_quant import oracle_qforward


@pytest.fixture(scope="module")
def toy(toy_problem):
    return toy_problem


BASE_TOML = """\
model = "ffnn"
model_path = "{model_file}"
dataset = "mnist"
train_images = "train-img"
train_labels = "train-lab"
test_images = "{test_img}"
test_labels = "{test_lab}"
eps_list = [{eps}]
multipliers = [{mults}]
seed = {seed}
ath = {ath}
eval_subset_size = {subset}
route_dense = {route_dense}
{extras}
[[attack]]
{attack}
"""


def toy_config(toy, name="cfg.toml", model_file="toydense.axm",
               test_img="test-img", test_lab="test-lab",
               eps="0.0, 0.08", mults='"exact", "operand_trunc:2"',
               seed=42, ath=1.0, subset=24, route_dense=True,
               attack='kind = "fgm"\nnorm = "linf"', extras=""):
    # model/dataset name the report rows only; the weights come from model_path
    path = toy / name
    path.write_text(BASE_TOML.format(model_file=model_file, test_img=test_img,
                                     test_lab=test_lab, eps=eps, mults=mults,
                                     seed=seed, ath=ath, subset=subset,
                                     route_dense=str(route_dense).lower(),
                                     attack=attack, extras=extras))
    return parse_config(path)


# ---------------------------------------------------------------------------
# the sweep itself

def test_sweep_cells_match_independent_reconstruction(toy):
    """Every grid cell equals an end-to-end rebuild from the pieces: crafted
    batch -> routed victim -> scalar reference inference -> mean."""
    cfg = toy_config(toy, subset=3)
    report = robustness_sweep(cfg)
    assert len(report.entries) == 1 * 2 * 2  # attacks x eps x multipliers

    test = dat.load_mnist(toy / "test-img", toy / "test-lab").subset(3)
    train = dat.load_mnist(toy / "train-img", toy / "train-lab")
    model = harness.load_float_model(toy / "toydense.axm")
    qparams = quant.calibrate(model, train.images, qlevel=8)
    qmodel = quant.quantize(model, qparams)

    for entry in report.entries:
        spec = atk.AttackSpec("fgm", "linf", entry.epsilon, seed=cfg.seed)
        adv = atk.craft(model, test.images, test.labels, spec)
        lut = lutmod.from_spec(entry.multiplier, 8)
        victim = quant.route_multipliers(qmodel, {"dense1": lut})
        preds = np.argmax(oracle_qforward(victim, adv.perturbed), axis=1)
        expected = 100.0 * float((preds == test.labels).mean())
        assert entry.robustness_pct == expected
        assert entry.n_samples == 3 and entry.seed == 42
        assert entry.model == "ffnn" and entry.dataset == "mnist"


def test_fgm_matches_finite_difference_gradient_sign(toy):
    """On a purely linear model the crafting step is a closed-form sign step;
    rebuild it from finite differences without touching the autodiff path."""
    cfg = toy_config(toy, subset=3)
    ctx = prepare_sweep(cfg)
    x, y = ctx.eval_images, ctx.eval_labels
    eps = 0.08
    adv = ctx.adversarial(cfg.attacks[0], eps)

    grad = np.zeros_like(x, dtype=np.float64)
    h = 1e-4
    for i in range(x.shape[0]):
        xi = x[i:i + 1].astype(np.float64)
        for idx in np.ndindex(x.shape[1:]):
            lo, hi = xi.copy(), xi.copy()
            lo[(0, *idx)] -= h
            hi[(0, *idx)] += h
            loss_lo, _ = softmax_cross_entropy(ctx.model.logits(lo), y[i:i + 1])
            loss_hi, _ = softmax_cross_entropy(ctx.model.logits(hi), y[i:i + 1])
            grad[(i, *idx)] = (loss_hi - loss_lo) / (2 * h)
    expected = np.clip(x + eps * np.sign(grad), 0.0, 1.0)
    np.testing.assert_allclose(adv.perturbed, expected, atol=1e-6)


def test_epsilon_zero_rows_are_clean_accuracy(toy):
    cfg = toy_config(toy)
    ctx = prepare_sweep(cfg)
    report = robustness_sweep(cfg, ctx)
    for entry in report.entries:
        if entry.epsilon != 0.0:
            continue
        victim = ctx.routed(lutmod.from_spec(entry.multiplier, 8))
        preds = atk.predict_batched(victim, ctx.eval_images, 128)
        assert entry.robustness_pct == 100.0 * float((preds == ctx.eval_labels).mean())
        assert entry.robustness_pct == pytest.approx(
            evaluate(victim, ctx.eval_images, ctx.eval_labels), abs=1e-9)
        assert report.clean[(cfg.model, entry.multiplier)] == entry.robustness_pct


def test_adversarial_batches_are_cached_per_spec(toy):
    cfg = toy_config(toy)
    ctx = prepare_sweep(cfg)
    template = cfg.attacks[0]
    assert ctx.adversarial(template, 0.08) is ctx.adversarial(template, 0.08)
    assert ctx.adversarial(template, 0.08) is not ctx.adversarial(template, 0.0)


def test_multiplier_order_does_not_change_cells(toy):
    cells = {}
    for name, mults in (("a.toml", '"exact", "operand_trunc:2", "pp_trunc:10"'),
                        ("b.toml", '"exact", "pp_trunc:10", "operand_trunc:2"')):
        cfg = toy_config(toy, name=name, mults=mults)
        report = robustness_sweep(cfg)
        cells[name] = {(e.multiplier, e.attack, e.norm, e.epsilon): e.robustness_pct
                       for e in report.entries}
    assert cells["a.toml"] == cells["b.toml"]


def test_sweep_is_deterministic_across_runs(toy):
    cfg = toy_config(toy)
    assert robustness_sweep(cfg).entries == robustness_sweep(cfg).entries


def test_metadata_carries_config_echo(toy):
    cfg = toy_config(toy)
    report = robustness_sweep(cfg)
    meta = report.metadata
    assert meta["config_hash"] == config_hash(cfg)
    assert meta["seed"] == 42 and meta["n_samples"] == 24
    assert meta["model"] == "ffnn" and meta["dataset"] == "mnist"
    assert set(meta["lut_metrics"]) == {"exact", "operand_trunc:2"}
    assert meta["lut_metrics"]["exact"]["mae_pct"] == 0.0
    assert 0.0 <= meta["float_clean_pct"] <= 100.0


def test_noise_attack_robustness_is_monotone_at_shipped_seed(toy):
    cfg = toy_config(toy, name="noise.toml", eps="0.0, 0.3, 0.8",
                     mults='"exact"',
                     attack='kind = "rau"\nnorm = "linf"\ndraws = 6')
    report = robustness_sweep(cfg)
    curve = [e.robustness_pct for e in
             sorted(report.entries, key=lambda e: e.epsilon)]
    assert curve == sorted(curve, reverse=True)
    cfg2 = toy_config(toy, name="noise2.toml", eps="0.0, 1.0, 2.5",
                      mults='"exact"',
                      attack='kind = "rag"\nnorm = "l2"\ndraws = 6')
    report2 = robustness_sweep(cfg2)
    curve2 = [e.robustness_pct for e in
              sorted(report2.entries, key=lambda e: e.epsilon)]
    assert curve2 == sorted(curve2, reverse=True)


def test_threshold_gate_aborts_bad_baselines(toy):
    cfg = toy_config(toy, name="gate.toml", test_img="conflict-img",
                     test_lab="conflict-lab", subset=2, ath=100.0)
    with pytest.raises(ThresholdError, match="below the threshold"):
        prepare_sweep(cfg)


def test_sweep_requires_attacks(toy):
    cfg = dataclasses.replace(toy_config(toy), attacks=[])
    with pytest.raises(HarnessError, match="attack"):
        robustness_sweep(cfg)
    with pytest.raises(HarnessError, match="attack"):
        quantization_study(cfg)


# ---------------------------------------------------------------------------
# quantization study

def test_study_emits_three_columns(toy):
    cfg = toy_config(toy, name="study.toml", model_file="toyconv.axm",
                     extras='study_multiplier = "operand_trunc:2"\n')
    ctx = prepare_sweep(cfg)
    report = quantization_study(cfg, ctx)
    assert report.metadata["study_multiplier"] == "operand_trunc:2"
    per_point = {}
    for e in report.entries:
        per_point.setdefault((e.attack, e.epsilon), set()).add(e.multiplier)
        if e.multiplier == FLOAT_LABEL:
            assert e.mae_pct is None
        else:
            assert e.mae_pct is not None
    assert all(cols == {FLOAT_LABEL, "exact", "operand_trunc:2"}
               for cols in per_point.values())
    float_clean = next(e for e in report.entries
                       if e.multiplier == FLOAT_LABEL and e.epsilon == 0.0)
    assert float_clean.robustness_pct == pytest.approx(
        evaluate(ctx.model, ctx.eval_images, ctx.eval_labels), abs=1e-9)


def test_study_refuses_an_exact_study_multiplier(toy):
    cfg = toy_config(toy, name="studybad.toml", mults='"exact"')
    with pytest.raises(HarnessError, match="exact"):
        quantization_study(cfg)


# ---------------------------------------------------------------------------
# transfer

def test_transfer_covers_every_source_victim_pair(toy):
    text = """\
model = "ffnn"
model_path = "toydense.axm"
dataset = "mnist"
train_images = "train-img"
train_labels = "train-lab"
test_images = "test-img"
test_labels = "test-lab"
eps_list = [0.0]
multipliers = ["exact"]
eval_subset_size = 24
transfer_epsilon = 0.1

[[transfer_source]]
name = "dense"
model = "toydense.axm"

[[transfer_source]]
name = "conv"
model = "toyconv.axm"

[[transfer_victim]]
name = "dense_q8"
model = "toydense.axm"
multiplier = "exact"

[[transfer_victim]]
name = "conv_ot2"
model = "toyconv.axm"
multiplier = "operand_trunc:2"
"""
    path = toy / "transfer.toml"
    path.write_text(text)
    cfg = parse_config(path)
    entries = transferability_matrix(cfg)
    pairs = {(e.source, e.victim) for e in entries}
    assert pairs == {(s, v) for s in ("dense", "conv")
                     for v in ("dense_q8", "conv_ot2")}
    for e in entries:
        assert 0.0 <= e.after_pct <= 100.0 and 0.0 <= e.before_pct <= 100.0
        assert e.epsilon == 0.1 and e.n_samples == 24 and e.attack == "bim"
    assert transferability_matrix(cfg) == entries  # deterministic

    empty = dataclasses.replace(cfg, transfer_victims=[])
    with pytest.raises(HarnessError, match="transfer"):
        transferability_matrix(empty)


# ---------------------------------------------------------------------------
# emission and read-back

def handmade_report():
    entries = [
        ReportEntry("m", "mnist", FLOAT_LABEL, None, "pgd", "linf", 0.1, 52.5, 100, 7),
        ReportEntry("m", "mnist", "operand_trunc:2", 11.0888, "pgd", "linf", 0.1,
                    47.25, 100, 7),
        ReportEntry("m", "mnist", "exact", 0.0, "pgd", "linf", 0.0, 98.0, 100, 7),
    ]
    clean = {("m", "exact"): 98.0}
    meta = {"seed": 7, "model": "m", "dataset": "mnist"}
    return RobustnessReport(metadata=meta, clean=clean, entries=entries)


EXPECTED_CSV = """\
model,dataset,multiplier,mae_pct,attack,norm,epsilon,robustness_pct,n_samples,seed
m,mnist,exact,0.0,pgd,linf,0.0,98.0,100,7
m,mnist,float,,pgd,linf,0.1,52.5,100,7
m,mnist,operand_trunc:2,11.0888,pgd,linf,0.1,47.25,100,7
"""


def test_csv_emission_bytes_and_roundtrip(tmp_path):
    report = handmade_report()
    out = tmp_path / "report.csv"
    emit_report(report, out, fmt="csv")
    assert out.read_text() == EXPECTED_CSV
    loaded = read_report_csv(out)
    assert loaded == sorted(report.entries, key=lambda e: e.sort_key())
    meta = json.loads((tmp_path / "report.meta.json").read_text())
    assert meta["clean"] == {"m/exact": 98.0} and meta["seed"] == 7


def test_jsonl_emission_and_roundtrip(tmp_path):
    report = handmade_report()
    out = tmp_path / "report.jsonl"
    emit_report(report, out, fmt="jsonl")
    lines = out.read_text().splitlines()
    assert len(lines) == 4
    head = json.loads(lines[0])
    assert head["meta"]["clean"] == {"m/exact": 98.0}
    rows = [json.loads(line) for line in lines[1:]]
    assert [r["multiplier"] for r in rows] == ["exact", "float", "operand_trunc:2"]
    assert rows[1]["mae_pct"] is None

    loaded = read_report_jsonl(out)
    assert loaded.entries == sorted(report.entries, key=lambda e: e.sort_key())
    assert loaded.clean == {("m", "exact"): 98.0}
    assert loaded.metadata["seed"] == 7

    with pytest.raises(ValueError, match="format"):
        emit_report(report, tmp_path / "x.bin", fmt="bin")


EXPECTED_DAT = """\
# m mnist pgd linf
# epsilon exact float
0.0 98.0 nan
0.1 47.25 52.5
"""


def test_plot_data_layout(tmp_path):
    entries = [
        ReportEntry("m", "mnist", FLOAT_LABEL, None, "pgd", "linf", 0.1, 52.5, 100, 7),
        ReportEntry("m", "mnist", "exact", 0.0, "pgd", "linf", 0.0, 98.0, 100, 7),
        ReportEntry("m", "mnist", "exact", 0.0, "pgd", "linf", 0.1, 47.25, 100, 7),
    ]
    written = emit_plot_data(entries, tmp_path / "plots")
    assert [p.split("/")[-1] for p in written] == ["m_mnist_pgd_linf.dat"]
    assert (tmp_path / "plots" / "m_mnist_pgd_linf.dat").read_text() == EXPECTED_DAT


def test_transfer_csv_emission(tmp_path):
    entries = [
        TransferEntry("b", "v", "mnist", "bim", "linf", 0.05, 98.0, 40.5, 100, 7),
        TransferEntry("a", "v", "mnist", "bim", "linf", 0.05, 97.0, 60.0, 100, 7),
    ]
    out = tmp_path / "t.csv"
    emit_transfer_csv(entries, out)
    text = out.read_text().splitlines()
    assert text[0] == "source,victim,dataset,attack,norm,epsilon,before_pct,after_pct,n_samples,seed"
    assert text[1].startswith("a,v,mnist,bim,linf,0.05,97.0,60.0")
    assert text[2].startswith("b,v,mnist,bim,linf,0.05,98.0,40.5")


def test_config_hash_tracks_content(toy):
    cfg1 = toy_config(toy, name="h1.toml")
    cfg2 = toy_config(toy, name="h2.toml")
    cfg3 = toy_config(toy, name="h3.toml", seed=43)
    assert config_hash(cfg1) == config_hash(cfg2)
    assert config_hash(cfg1) != config_hash(cfg3)
