"""End-to-end robustness experiments over (multiplier x attack x epsilon) grids.

The sweep follows one discipline throughout: adversarial sets are crafted
once per (attack, epsilon) on the accurate float model, cached, and reused
for every multiplier routing, so grid columns differ only in the arithmetic
of the victim. Percentage robustness is 100 * (1 - misclassified/N) against
the true labels, which makes the epsilon = 0 column the clean accuracy.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import attacks as atk
from . import data as dat
from . import luts as lutmod
from . import modelio, quant
from .config import HarnessConfig
from .model import Model
from .train import evaluate

REPORT_COLUMNS = ("model", "dataset", "multiplier", "mae_pct", "attack", "norm",
                  "epsilon", "robustness_pct", "n_samples", "seed")
TRANSFER_COLUMNS = ("source", "victim", "dataset", "attack", "norm", "epsilon",
                    "before_pct", "after_pct", "n_samples", "seed")

FLOAT_LABEL = "float"  # multiplier column value for unquantized rows


class ThresholdError(RuntimeError):
    """Baseline accuracy below the configured threshold; the sweep must abort."""


class HarnessError(RuntimeError):
    """Setup problem: missing models, LUTs, or incompatible inputs."""


@dataclass(frozen=True)
class ReportEntry:
    model: str
    dataset: str
    multiplier: str
    mae_pct: float | None  # None for float (unquantized) rows
    attack: str
    norm: str
    epsilon: float
    robustness_pct: float
    n_samples: int
    seed: int

    def sort_key(self):
        mae = -1.0 if self.mae_pct is None else self.mae_pct
        return (self.model, self.dataset, self.multiplier, mae, self.attack,
                self.norm, self.epsilon, self.robustness_pct, self.n_samples,
                self.seed)


@dataclass(frozen=True)
class TransferEntry:
    source: str
    victim: str
    dataset: str
    attack: str
    norm: str
    epsilon: float
    before_pct: float
    after_pct: float
    n_samples: int
    seed: int


@dataclass
class RobustnessReport:
    metadata: dict
    clean: dict[tuple[str, str], float]  # (model, multiplier) -> percent
    entries: list[ReportEntry] = field(default_factory=list)


def config_hash(cfg: HarnessConfig) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def load_split(cfg: HarnessConfig, split: str) -> dat.Dataset:
    paths = cfg.data_paths
    if cfg.dataset == "mnist":
        return dat.load_mnist(paths[f"{split}_images"], paths[f"{split}_labels"])
    return dat.load_cifar10(paths[f"{split}_batches"])


def load_float_model(path) -> Model:
    model = modelio.load_model(path)
    if not isinstance(model, Model):
        raise HarnessError(f"{path}: expected an accurate float model, found a "
                           f"quantized container")
    return model


def resolve_multipliers(cfg: HarnessConfig) -> list[lutmod.MultiplierLUT]:
    try:
        resolved = [lutmod.from_spec(m, cfg.qlevel) for m in cfg.multipliers]
    except (lutmod.LutError, OSError) as exc:
        raise HarnessError(f"cannot resolve multiplier: {exc}") from exc
    if not resolved[0].is_exact:
        raise HarnessError(f"first multiplier {cfg.multipliers[0]!r} must resolve "
                           f"to the exact product table")
    return resolved


@dataclass
class SweepContext:
    """Everything a grid evaluation needs, built once per config."""

    cfg: HarnessConfig
    model: Model
    qmodel: quant.QuantizedModel
    eval_images: np.ndarray
    eval_labels: np.ndarray
    float_clean_pct: float
    _adv_cache: dict = field(default_factory=dict)

    def adversarial(self, template, epsilon: float) -> atk.AdversarialBatch:
        key = (template.kind, template.norm, template.steps, template.step_size,
               template.draws, float(epsilon))
        if key not in self._adv_cache:
            spec = atk.AttackSpec(template.kind, template.norm, float(epsilon),
                                  steps=template.steps, step_size=template.step_size,
                                  draws=template.draws, seed=self.cfg.seed)
            self._adv_cache[key] = atk.craft(self.model, self.eval_images,
                                             self.eval_labels, spec)
        return self._adv_cache[key]

    def routed(self, lut: lutmod.MultiplierLUT) -> quant.QuantizedModel:
        assignment = {n: lut for n in self.qmodel.spec.conv_layer_names}
        if self.cfg.route_dense:
            assignment.update({n: lut for n in self.qmodel.spec.mult_layer_names
                               if n not in assignment})
        return quant.route_multipliers(self.qmodel, assignment)


def prepare_sweep(cfg: HarnessConfig) -> SweepContext:
    """Load data and models, enforce the accuracy threshold, quantize."""
    if not cfg.eps_list:
        raise HarnessError("empty eps list")
    model = load_float_model(cfg.model_path)
    test = dat.adapt_dataset(load_split(cfg, "test"), model.input_shape)
    train = dat.adapt_dataset(load_split(cfg, "train"), model.input_shape)
    n = min(cfg.eval_subset_size, test.n)
    subset = test.subset(n)

    float_clean = evaluate(model, subset.images, subset.labels)
    if float_clean < cfg.ath:
        raise ThresholdError(f"float model accuracy {float_clean:.2f}% on the eval "
                             f"subset is below the threshold {cfg.ath:.2f}%")

    calib = train.subset(min(cfg.calib_size, train.n))
    qparams = quant.calibrate(model, calib.images, qlevel=cfg.qlevel)
    qmodel = quant.quantize(model, qparams)
    return SweepContext(cfg, model, qmodel, subset.images, subset.labels,
                        float_clean)


def _robustness(qm_or_model, adv: atk.AdversarialBatch) -> float:
    preds = atk.predict_batched(qm_or_model, adv.perturbed, 128)
    return 100.0 * float((preds == adv.labels).mean())


def _base_metadata(cfg: HarnessConfig, ctx: SweepContext) -> dict:
    return {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "model": cfg.model,
        "dataset": cfg.dataset,
        "qlevel": cfg.qlevel,
        "n_samples": int(ctx.eval_labels.shape[0]),
        "float_clean_pct": ctx.float_clean_pct,
        "ath": cfg.ath,
    }


def robustness_sweep(cfg: HarnessConfig, ctx: SweepContext | None = None) -> RobustnessReport:
    """The full (attack x epsilon x multiplier) grid for one model."""
    if not cfg.attacks:
        raise HarnessError("the sweep needs at least one [[attack]] table in "
                           "the config")
    ctx = ctx or prepare_sweep(cfg)
    luts = resolve_multipliers(cfg)
    metrics = {lut.name: lutmod.error_metrics(lut) for lut in luts}
    n = int(ctx.eval_labels.shape[0])

    report = RobustnessReport(metadata=_base_metadata(cfg, ctx), clean={})
    for template in cfg.attacks:
        for eps in cfg.eps_list:
            adv = ctx.adversarial(template, eps)
            for lut in luts:
                rob = _robustness(ctx.routed(lut), adv)
                report.entries.append(ReportEntry(
                    model=cfg.model, dataset=cfg.dataset, multiplier=lut.name,
                    mae_pct=metrics[lut.name].mae_pct, attack=template.kind,
                    norm=template.norm, epsilon=float(eps), robustness_pct=rob,
                    n_samples=n, seed=cfg.seed))
                if eps == 0.0:
                    report.clean[(cfg.model, lut.name)] = rob
    report.metadata["lut_metrics"] = {
        name: dataclasses.asdict(m) for name, m in sorted(metrics.items())}
    return report


def quantization_study(cfg: HarnessConfig, ctx: SweepContext | None = None) -> RobustnessReport:
    """Three curves per attack: float, quantized-exact, quantized-approximate."""
    if not cfg.attacks:
        raise HarnessError("the quantization study needs at least one "
                           "[[attack]] table in the config")
    ctx = ctx or prepare_sweep(cfg)
    luts = resolve_multipliers(cfg)
    study_name = cfg.study_multiplier or cfg.multipliers[-1]
    by_token = dict(zip(cfg.multipliers, luts))
    if study_name not in by_token:
        raise HarnessError(f"study multiplier {study_name!r} is not configured")
    exact_lut, approx_lut = luts[0], by_token[study_name]
    if approx_lut.is_exact:
        raise HarnessError(f"study multiplier {study_name!r} resolves to the exact "
                           f"table; the study needs an approximate one")

    metrics = {lut.name: lutmod.error_metrics(lut) for lut in (exact_lut, approx_lut)}
    n = int(ctx.eval_labels.shape[0])
    report = RobustnessReport(metadata=_base_metadata(cfg, ctx), clean={})
    report.metadata["study_multiplier"] = approx_lut.name

    columns = ((FLOAT_LABEL, ctx.model, None),
               (exact_lut.name, ctx.routed(exact_lut), metrics[exact_lut.name].mae_pct),
               (approx_lut.name, ctx.routed(approx_lut), metrics[approx_lut.name].mae_pct))
    for template in cfg.attacks:
        for eps in cfg.eps_list:
            adv = ctx.adversarial(template, eps)
            for label, victim, mae in columns:
                rob = _robustness(victim, adv)
                report.entries.append(ReportEntry(
                    model=cfg.model, dataset=cfg.dataset, multiplier=label,
                    mae_pct=mae, attack=template.kind, norm=template.norm,
                    epsilon=float(eps), robustness_pct=rob, n_samples=n,
                    seed=cfg.seed))
                if eps == 0.0:
                    report.clean[(cfg.model, label)] = rob
    report.metadata["lut_metrics"] = {
        name: dataclasses.asdict(m) for name, m in sorted(metrics.items())}
    return report


def transferability_matrix(cfg: HarnessConfig) -> list[TransferEntry]:
    """Craft on each source's float model, evaluate every quantized victim.

    Adversarial images are crafted in the source's input space, mapped back
    to the dataset's canonical shape, then adapted to each victim's input
    shape; clean "before" accuracy uses the same adaptation chain.
    """
    if not cfg.transfer_sources or not cfg.transfer_victims:
        raise HarnessError("transfer needs at least one [[transfer_source]] and one "
                           "[[transfer_victim]] in the config")
    canonical = dat.CANONICAL_SHAPES[cfg.dataset]
    test = load_split(cfg, "test")
    train = load_split(cfg, "train")
    n = min(cfg.eval_subset_size, test.n)
    subset = test.subset(n)

    victims = []
    for v in cfg.transfer_victims:
        vmodel = load_float_model(v.model_path)
        vtrain = dat.adapt_dataset(train, vmodel.input_shape)
        calib = vtrain.subset(min(cfg.calib_size, vtrain.n))
        qparams = quant.calibrate(vmodel, calib.images, qlevel=cfg.qlevel)
        qm = quant.quantize(vmodel, qparams)
        try:
            lut = lutmod.from_spec(v.multiplier, cfg.qlevel)
        except (lutmod.LutError, OSError) as exc:
            raise HarnessError(f"victim {v.name}: cannot resolve multiplier: {exc}") from exc
        qm = quant.route_multipliers(qm, {c: lut for c in qm.spec.conv_layer_names})
        clean_victim = dat.adapt_input(subset.images, vmodel.input_shape)
        before = 100.0 * float((atk.predict_batched(qm, clean_victim, 128)
                                == subset.labels).mean())
        victims.append((v, qm, before))

    entries = []
    for s in cfg.transfer_sources:
        smodel = load_float_model(s.model_path)
        src_images = dat.adapt_input(subset.images, smodel.input_shape)
        spec = atk.AttackSpec("bim", "linf", cfg.transfer_epsilon, seed=cfg.seed)
        adv = atk.craft(smodel, src_images, subset.labels, spec)
        adv_canonical = dat.adapt_input(adv.perturbed, canonical)
        for v, qm, before in victims:
            adv_victim = dat.adapt_input(adv_canonical, qm.input_shape)
            after = 100.0 * float((atk.predict_batched(qm, adv_victim, 128)
                                   == subset.labels).mean())
            entries.append(TransferEntry(
                source=s.name, victim=v.name, dataset=cfg.dataset, attack="bim",
                norm="linf", epsilon=cfg.transfer_epsilon, before_pct=before,
                after_pct=after, n_samples=n, seed=cfg.seed))
    return entries


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(report: RobustnessReport, path, fmt: str = "csv") -> None:
    """Write the grid (sorted by columns, left to right) plus a companion
    <stem>.meta.json with the config echo and LUT metrics."""
    rows = sorted(report.entries, key=lambda e: e.sort_key())
    if fmt == "csv":
        lines = [",".join(REPORT_COLUMNS)]
        for e in rows:
            lines.append(",".join(_format_cell(getattr(e, c)) for c in REPORT_COLUMNS))
        text = "\n".join(lines) + "\n"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    elif fmt == "jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            meta = dict(report.metadata,
                        clean={f"{m}/{mult}": acc
                               for (m, mult), acc in sorted(report.clean.items())})
            fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
            for e in rows:
                fh.write(json.dumps(dataclasses.asdict(e), sort_keys=True) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    _write_meta(report, path)


def _write_meta(report: RobustnessReport, path) -> None:
    stem, _ = os.path.splitext(str(path))
    meta = dict(report.metadata)
    meta["clean"] = {f"{m}/{mult}": acc
                     for (m, mult), acc in sorted(report.clean.items())}
    with open(stem + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report_jsonl(path) -> RobustnessReport:
    entries = []
    meta: dict = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "meta" in obj:
                meta = obj["meta"]
                continue
            entries.append(ReportEntry(**obj))
    clean = {}
    for key, acc in meta.get("clean", {}).items():
        m, _, mult = key.partition("/")
        clean[(m, mult)] = acc
    return RobustnessReport(metadata=meta, clean=clean, entries=entries)


def read_report_csv(path) -> list[ReportEntry]:
    import csv as _csv
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in _csv.DictReader(fh):
            entries.append(ReportEntry(
                model=row["model"], dataset=row["dataset"],
                multiplier=row["multiplier"],
                mae_pct=float(row["mae_pct"]) if row["mae_pct"] else None,
                attack=row["attack"], norm=row["norm"],
                epsilon=float(row["epsilon"]),
                robustness_pct=float(row["robustness_pct"]),
                n_samples=int(row["n_samples"]), seed=int(row["seed"])))
    return entries


def emit_transfer_csv(entries: list[TransferEntry], path) -> None:
    rows = sorted(entries, key=lambda e: tuple(getattr(e, c) for c in TRANSFER_COLUMNS))
    lines = [",".join(TRANSFER_COLUMNS)]
    for e in rows:
        lines.append(",".join(_format_cell(getattr(e, c)) for c in TRANSFER_COLUMNS))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def emit_plot_data(entries: list[ReportEntry], out_dir) -> list[str]:
    """One gnuplot-ready .dat per (model, dataset, attack, norm): epsilon in
    column 1, one robustness column per multiplier."""
    os.makedirs(out_dir, exist_ok=True)
    families: dict[tuple, dict] = {}
    for e in entries:
        fam = families.setdefault((e.model, e.dataset, e.attack, e.norm), {})
        fam.setdefault(e.multiplier, {})[e.epsilon] = e.robustness_pct
    written = []
    for (model, dataset, attack, norm), series in sorted(families.items()):
        mults = sorted(series)
        eps_values = sorted({eps for col in series.values() for eps in col})
        name = f"{model}_{dataset}_{attack}_{norm}.dat"
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# {model} {dataset} {attack} {norm}\n")
            fh.write("# epsilon " + " ".join(mults) + "\n")
            for eps in eps_values:
                cells = [repr(eps)]
                for m in mults:
                    value = series[m].get(eps)
                    cells.append("nan" if value is None else repr(value))
                fh.write(" ".join(cells) + "\n")
        written.append(path)
    return written
