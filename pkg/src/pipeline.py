"""Stage runner: data -> unimodal -> confidence -> calibrate -> fusion -> evaluate.

Every stage writes its artifacts under the output directory and records
their sha256 in ``manifest.json``. A stage only runs when the artifacts of
its prerequisite stages still match the recorded checksums; rerunning a
stage drops the records of everything downstream of it. One pipeline runs
per output directory at a time (file lock).
"""

import csv
import io
import json
import logging
import time
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.baselines import (
    EnsembleMember,
    EarlyFusionModel,
    JointFusionModel,
    baseline_predict,
    late_average,
    top_members,
    train_early_fusion,
    train_joint_fusion,
)
from src.checkpoint import file_digest, load_checkpoint, save_checkpoint
from src.confidence import (
    ConfidenceHead,
    TemperatureParams,
    calibrate_temperature,
    calibration_rows,
    token_dataset,
    token_logits,
    train_confidence_heads,
)
from src.config import (
    ExperimentConfig,
    _atomic_write_json,
    _atomic_write_text,
    output_lock,
)
from src.data import (
    Dataset,
    DatasetSplit,
    class_names,
    generate_dataset,
    load_embeddings,
    save_embeddings,
    split_dataset,
)
from src.errors import ConfigError, PrerequisiteError
from src.fusion import (
    FusionInputs,
    FusionVariant,
    MedPatchModel,
    ablation_variant,
    train_medpatch,
)
from src.metrics import (
    METRICS,
    bonferroni,
    bootstrap_ci,
    paired_t_test,
    per_class,
    selection_auroc,
    t_log10_p,
)
from src.models import ExperimentManifest, MetricReport, SignificanceRow, StageRecord, TrainingRecord
from src.numeric import ParameterStore
from src.patching import patch_split
from src.training import SweepResult, lr_sweep
from src.unimodal import (
    EncodedSplit,
    UnimodalHead,
    encode_dataset,
    encoders_from_store,
    encoders_store,
    make_encoders,
    predict_split,
    pretrain_unimodal,
)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"

STAGES = (
    "gen-data",
    "pretrain",
    "train-confidence",
    "calibrate",
    "train-fusion",
    "evaluate",
    "ablate",
    "report-weights",
)
# run-all order; ablations are run on demand.
PIPELINE = tuple(s for s in STAGES if s != "ablate")

PREREQUISITES: Dict[str, Tuple[str, ...]] = {
    "gen-data": (),
    "pretrain": ("gen-data",),
    "train-confidence": ("pretrain",),
    "calibrate": ("train-confidence",),
    "train-fusion": ("calibrate",),
    "evaluate": ("train-fusion",),
    "ablate": ("calibrate",),
    "report-weights": ("train-fusion",),
}

# Report labels and column order for fused predictors.
PREDICTOR_LABELS = {"miss": "Missingness", "low": "Low", "high": "High"}

METRICS_HEADER = ("metric", "point", "lo", "hi", "n_replicates", "seed")
SIGNIFICANCE_HEADER = ("comparator", "metric", "t", "p", "log10_p", "p_bonferroni")


def downstream_of(stage: str) -> List[str]:
    out: List[str] = []
    frontier = [stage]
    while frontier:
        current = frontier.pop()
        for s, reqs in PREREQUISITES.items():
            if current in reqs and s not in out:
                out.append(s)
                frontier.append(s)
    return out


def upstream_of(stage: str) -> List[str]:
    """Every stage ``stage`` depends on, nearest first."""
    out: List[str] = []
    frontier = list(PREREQUISITES[stage])
    while frontier:
        current = frontier.pop(0)
        if current not in out:
            out.append(current)
            frontier.extend(PREREQUISITES[current])
    return out


def _fmt(x: float) -> str:
    return repr(float(x))


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _write_records(path: Path, records: Dict[str, TrainingRecord]) -> None:
    _atomic_write_json(path, {k: r.model_dump(mode="json") for k, r in records.items()})


# ---------------------------------------------------------------------------
# Experiment context
# ---------------------------------------------------------------------------

class Experiment:
    """Lazily loaded artifacts of one output directory."""

    def __init__(self, config: ExperimentConfig, out_dir: Path):
        self.config = config
        self.out = Path(out_dir)
        self.modalities = tuple(config.active_modalities)

    def path(self, name: str) -> Path:
        return self.out / name

    # -- data ------------------------------------------------------------------
    @cached_property
    def split_info(self) -> dict:
        with open(self.path("split.json"), "r", encoding="utf-8") as f:
            return json.load(f)

    @cached_property
    def dataset(self) -> Dataset:
        ds = load_embeddings(self.path("dataset.jsonl"), modalities=self.modalities)
        ds.num_classes = int(self.split_info["num_classes"])
        ds.token_dims = {m: int(self.split_info["token_dims"][m]) for m in self.modalities}
        return ds

    @cached_property
    def split(self) -> DatasetSplit:
        info = self.split_info
        return DatasetSplit(tuple(info["train"]), tuple(info["validation"]), tuple(info["test"]))

    def part(self, name: str) -> Dataset:
        return self.dataset.subset(getattr(self.split, name))

    # -- frozen stages -----------------------------------------------------------
    @cached_property
    def encoders(self):
        store = load_checkpoint(self.path("encoders.mpck"))
        return encoders_from_store(store, self.modalities, self.config.data.encoder)

    @cached_property
    def encoded(self) -> Dict[str, EncodedSplit]:
        return {name: encode_dataset(self.part(name), self.encoders)
                for name in ("train", "validation", "test")}

    @cached_property
    def unimodal_heads(self) -> Dict[str, UnimodalHead]:
        return {m: UnimodalHead(m, load_checkpoint(self.path(f"unimodal_{m}.mpck")), trained=True)
                for m in self.modalities}

    @cached_property
    def confidence_heads(self) -> Dict[str, ConfidenceHead]:
        return {m: ConfidenceHead(m, load_checkpoint(self.path(f"confidence_{m}.mpck")))
                for m in self.modalities}

    @cached_property
    def temperatures(self) -> TemperatureParams:
        return TemperatureParams.from_json_file(self.path("temperatures.json"))

    # -- fusion inputs -------------------------------------------------------------
    def temps_for(self, variant: FusionVariant) -> Dict[str, np.ndarray]:
        if not variant.calibrated:
            return {m: np.ones(self.dataset.num_classes) for m in self.modalities}
        return {m: self.temperatures.tau(m) for m in self.modalities}

    def fusion_inputs(self, name: str, variant: FusionVariant, theta: float, patching: str,
                      theta_entropy: float) -> FusionInputs:
        split = self.encoded[name]
        unimodal = {m: predict_split(self.unimodal_heads[m], split) for m in self.modalities}
        patched = None
        if variant.uses_patching:
            patched = patch_split(split, self.confidence_heads, self.temps_for(variant),
                                  theta, patching, theta_entropy)
        return FusionInputs(self.modalities, unimodal, split.availability(), split.labels(), patched)

    def new_fusion_model(self, variant: FusionVariant, seed: int,
                         store: Optional[ParameterStore] = None, meta: Optional[dict] = None) -> MedPatchModel:
        mcfg = self.config.model
        meta = meta or {}
        dims = {m: self.confidence_heads[m].dim for m in self.modalities}
        return MedPatchModel(
            self.modalities, self.dataset.num_classes, dims,
            d_proj=meta.get("d_proj", mcfg.d_proj),
            variant=variant,
            per_class_heads=meta.get("per_class_heads", mcfg.per_class_heads),
            low_target=meta.get("low_target", mcfg.low_target),
            store=store,
            seed=seed,
        )

    def fusion_settings(self) -> dict:
        mcfg = self.config.model
        return {
            "ablation": mcfg.ablation,
            "d_proj": mcfg.d_proj,
            "per_class_heads": mcfg.per_class_heads,
            "low_target": mcfg.low_target,
            "theta": mcfg.theta,
            "patching": mcfg.patching,
            "theta_entropy": mcfg.entropy_threshold(),
        }


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

@dataclass
class StageOutput:
    files: List[str]
    summary: dict


def _stage_gen_data(exp: Experiment) -> StageOutput:
    cfg = exp.config
    if cfg.data.path:
        dataset = load_embeddings(cfg.data.path, document_chunk=cfg.data.document_chunk)
        extra = [m for m in dataset.modalities if m not in exp.modalities]
        if extra:
            logger.info(f"Dropping modalities not used by the {cfg.task} task: {', '.join(extra)}")
        if len(dataset) and cfg.task == "mortality" and dataset.num_classes != 1:
            raise ConfigError(f"mortality task needs 1 label per sample, file has {dataset.num_classes}")
        num_classes = dataset.num_classes or cfg.num_classes
        dataset = dataset.restrict(exp.modalities)
        dataset.num_classes = num_classes
    else:
        dataset = generate_dataset(cfg.generator_config())
    split = split_dataset(dataset, cfg.data.split, cfg.seed)
    save_embeddings(dataset, exp.path("dataset.jsonl"))
    _atomic_write_json(exp.path("split.json"), {
        "modalities": list(dataset.modalities),
        "num_classes": dataset.num_classes,
        "token_dims": dataset.token_dims,
        "train": list(split.train),
        "validation": list(split.validation),
        "test": list(split.test),
    })
    n_train, n_val, n_test = split.sizes()
    logger.info(f"Split {len(dataset)} samples into {n_train}/{n_val}/{n_test}")
    return StageOutput(["dataset.jsonl", "split.json"],
                       {"samples": len(dataset), "split": [n_train, n_val, n_test]})


def _stage_pretrain(exp: Experiment, manifest: ExperimentManifest) -> StageOutput:
    cfg = exp.config
    t = cfg.training
    ds = exp.dataset
    encoders = make_encoders(exp.modalities, ds.token_dims, cfg.data.embed_dim, cfg.seed,
                             cfg.data.encoder)
    save_checkpoint(encoders_store(encoders), exp.path("encoders.mpck"))
    train, val = exp.encoded["train"], exp.encoded["validation"]
    files = ["encoders.mpck"]
    records: Dict[str, TrainingRecord] = {}
    for m in exp.modalities:
        sweep = lr_sweep(
            lambda lr, s, m=m: pretrain_unimodal(m, train, val, lr, t.max_epochs, t.patience,
                                                 t.batch_size, s),
            t.lr_bounds, t.sweeps, cfg.seed, name=f"pretrain:{m}",
        )
        save_checkpoint(sweep.best.store, exp.path(f"unimodal_{m}.mpck"))
        files.append(f"unimodal_{m}.mpck")
        records[m] = sweep.best_record
        manifest.learning_rates[f"pretrain:{m}"] = sweep.best_record.lr
        manifest.parameter_counts[f"unimodal:{m}"] = sweep.best.store.num_parameters()
    _write_records(exp.path("logs_pretrain.json"), records)
    files.append("logs_pretrain.json")
    return StageOutput(files, {m: r.best_score for m, r in records.items()})


def _stage_train_confidence(exp: Experiment, manifest: ExperimentManifest) -> StageOutput:
    cfg = exp.config
    t = cfg.training
    heads, records = train_confidence_heads(
        exp.encoded["train"], exp.encoded["validation"], exp.modalities,
        lr=t.confidence_lr, epochs=t.confidence_epochs, batch=t.batch_size,
        patience=t.patience, seed=cfg.seed,
    )
    files = []
    for m, head in heads.items():
        save_checkpoint(head.store, exp.path(f"confidence_{m}.mpck"))
        files.append(f"confidence_{m}.mpck")
        manifest.parameter_counts[f"confidence:{m}"] = head.store.num_parameters()
    _write_records(exp.path("logs_confidence.json"), records)
    files.append("logs_confidence.json")
    return StageOutput(files, {m: -r.best_score for m, r in records.items()})


def _validation_logits(exp: Experiment) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    logits, labels = {}, {}
    C = exp.dataset.num_classes
    for m in exp.modalities:
        tokens, y = token_dataset(exp.encoded["validation"], m)
        head = exp.confidence_heads[m]
        logits[m] = token_logits(tokens, head) if tokens.shape[0] else np.zeros((0, C))
        labels[m] = y
    return logits, labels


def _stage_calibrate(exp: Experiment, manifest: ExperimentManifest) -> StageOutput:
    cfg = exp.config
    logits, labels = _validation_logits(exp)
    temps = calibrate_temperature(logits, labels, epochs=cfg.training.calibration_epochs,
                                  lr=cfg.training.calibration_lr, bins=cfg.evaluation.ece_bins,
                                  seed=cfg.seed)
    temps.to_json_file(exp.path("temperatures.json"))
    rows = calibration_rows(logits, labels, temps, cfg.evaluation.ece_bins)
    _atomic_write_text(exp.path("calibration.csv"), _csv_text(
        ("modality", "class", "tau", "ece_before", "ece_after"),
        [(r["modality"], r["class"], r["tau"], r["ece_before"], r["ece_after"]) for r in rows],
    ))
    return StageOutput(["temperatures.json", "calibration.csv"], {"temperatures": temps.values})


def _fit_fusion(exp: Experiment, variant: FusionVariant, settings: dict) -> SweepResult:
    cfg = exp.config
    t = cfg.training
    args = (variant, settings["theta"], settings["patching"], settings["theta_entropy"])
    train = exp.fusion_inputs("train", *args)
    val = exp.fusion_inputs("validation", *args)

    def trainer(lr: float, seed: int):
        model = exp.new_fusion_model(variant, seed, meta=settings)
        record = train_medpatch(model, train, val, lr, t.max_epochs, t.patience,
                                t.batch_size, seed)
        return model, record

    return lr_sweep(trainer, t.lr_bounds, t.sweeps, cfg.seed, name=f"fusion:{variant.setting}")


def _split_fusion_store(store: ParameterStore) -> Tuple[ParameterStore, ParameterStore]:
    joint, rest = ParameterStore(), ParameterStore()
    for name, value in store.items():
        target = joint if name.split(".")[0] in ("proj", "high", "low") else rest
        target.add(name, value)
    return joint, rest


def _load_fusion(exp: Experiment) -> MedPatchModel:
    with open(exp.path("fusion.json"), "r", encoding="utf-8") as f:
        meta = json.load(f)
    store = load_checkpoint(exp.path("joint.mpck"))
    for name, value in load_checkpoint(exp.path("fusion.mpck")).items():
        store.add(name, value)
    variant = ablation_variant(meta["ablation"])
    model = exp.new_fusion_model(variant, 0, meta=meta)
    expected = set(model.store)
    if set(store) != expected:
        raise ConfigError("fusion checkpoint does not match the configured model")
    for name in model.store:
        model.store.set(name, store[name])
    return model


def _stage_train_fusion(exp: Experiment, manifest: ExperimentManifest) -> StageOutput:
    cfg = exp.config
    t = cfg.training
    settings = exp.fusion_settings()
    variant = ablation_variant(settings["ablation"])
    sweep = _fit_fusion(exp, variant, settings)
    model = sweep.best
    joint, rest = _split_fusion_store(model.store)
    save_checkpoint(joint, exp.path("joint.mpck"))
    save_checkpoint(rest, exp.path("fusion.mpck"))
    _atomic_write_json(exp.path("fusion.json"), settings)
    manifest.learning_rates["fusion"] = sweep.best_record.lr
    manifest.parameter_counts["medpatch"] = model.store.num_parameters()
    files = ["joint.mpck", "fusion.mpck", "fusion.json"]
    records = {"fusion": sweep.best_record}

    if t.baselines:
        members = []
        train, val = exp.encoded["train"], exp.encoded["validation"]
        dims = {m: exp.encoders[m].d_out for m in exp.modalities}
        early = lr_sweep(
            lambda lr, s: train_early_fusion(train, val, dims, lr, t.max_epochs, t.patience,
                                             t.batch_size, s),
            t.lr_bounds, t.sweeps, cfg.seed, name="baseline:early",
        )
        train_ds, val_ds = exp.part("train"), exp.part("validation")
        joint_sweep = lr_sweep(
            lambda lr, s: train_joint_fusion(train_ds, val_ds, exp.encoders, lr, t.max_epochs,
                                             t.patience, t.batch_size, s),
            t.lr_bounds, t.sweeps, cfg.seed, name="baseline:joint",
        )
        for kind, sweep_k in (("early", early), ("joint", joint_sweep)):
            manifest.learning_rates[f"baseline:{kind}"] = sweep_k.best_record.lr
            manifest.parameter_counts[kind] = sweep_k.best.store.num_parameters()
            records[f"baseline:{kind}"] = sweep_k.best_record
            for rank, (member, record) in enumerate(sweep_k.top(3)):
                fname = f"baseline_{kind}_{rank}.mpck"
                save_checkpoint(member.store, exp.path(fname))
                files.append(fname)
                members.append({"name": f"{kind}_{rank}", "kind": kind, "file": fname,
                                "lr": record.lr, "val_score": record.best_score})
        _atomic_write_json(exp.path("baselines.json"), members)
        files.append("baselines.json")
    _write_records(exp.path("logs_fusion.json"), records)
    files.append("logs_fusion.json")
    return StageOutput(files, {"val_auroc": sweep.best_record.best_score,
                               "lr": sweep.best_record.lr})


def _baseline_predictions(exp: Experiment) -> Tuple[Dict[str, np.ndarray], List[EnsembleMember]]:
    """Test predictions of every baseline plus ensemble members (validation-scored)."""
    preds: Dict[str, np.ndarray] = {}
    members: List[EnsembleMember] = []
    val_split, test_split = exp.encoded["validation"], exp.encoded["test"]
    val_uni = {m: predict_split(exp.unimodal_heads[m], val_split) for m in exp.modalities}
    test_uni = {m: predict_split(exp.unimodal_heads[m], test_split) for m in exp.modalities}
    preds["late"] = baseline_predict("late", unimodal=test_uni)
    late_val = selection_auroc(late_average(val_uni), val_split.labels())

    if not exp.path("baselines.json").exists():
        return preds, members
    with open(exp.path("baselines.json"), "r", encoding="utf-8") as f:
        saved = json.load(f)
    val_ds, test_ds = exp.part("validation"), exp.part("test")
    by_kind: Dict[str, List[EnsembleMember]] = {}
    for entry in saved:
        store = load_checkpoint(exp.path(entry["file"]))
        if entry["kind"] == "early":
            model = EarlyFusionModel(exp.modalities, store)
            test_pred = baseline_predict("early", model=model, split=test_split)
        else:
            model = JointFusionModel(exp.modalities, store)
            test_pred = baseline_predict("joint", model=model, dataset=test_ds)
        member = EnsembleMember(entry["name"], float(entry["val_score"]), test_pred)
        by_kind.setdefault(entry["kind"], []).append(member)
        members.append(member)
    for kind, kind_members in by_kind.items():
        preds[kind] = kind_members[0].predictions
        if len(kind_members) >= 3:
            preds[f"ensemble_{kind}"] = baseline_predict("ensemble", members=kind_members)
    diverse = members + [EnsembleMember("late", late_val, preds["late"])]
    if len(diverse) >= 3:
        chosen = top_members(diverse)
        logger.info(f"Diverse ensemble: {', '.join(m.name for m in chosen)}")
        preds["ensemble_diverse"] = baseline_predict("ensemble", members=diverse)
    return preds, members


def _score(predictions: Dict[str, np.ndarray], labels: np.ndarray, replicates: int,
           seed: int) -> Tuple[List[MetricReport], Dict[str, np.ndarray]]:
    reports, reps = [], {}
    for name, scores in predictions.items():
        for metric_name, metric in METRICS.items():
            key = f"{name}.{metric_name}"
            report, vec = bootstrap_ci(metric, scores, labels, replicates, seed, key)
            reports.append(report)
            reps[key] = vec
    return reports, reps


def _stage_evaluate(exp: Experiment, manifest: ExperimentManifest) -> StageOutput:
    cfg = exp.config
    ev = cfg.evaluation
    model = _load_fusion(exp)
    with open(exp.path("fusion.json"), "r", encoding="utf-8") as f:
        meta = json.load(f)
    test = exp.fusion_inputs("test", model.variant, meta["theta"], meta["patching"],
                             meta["theta_entropy"])
    outputs = model.predict(test)
    labels = test.labels

    predictions: Dict[str, np.ndarray] = {}
    for name, value in outputs.components().items():
        prefix = "unimodal" if name in exp.modalities else "medpatch"
        predictions[f"{prefix}.{name}"] = value
    baseline_preds, _ = _baseline_predictions(exp)
    for name, value in baseline_preds.items():
        predictions[f"baseline.{name}"] = value

    reports, reps = _score(predictions, labels, ev.replicates, ev.metric_seed)
    _atomic_write_text(exp.path("metrics.csv"), _csv_text(
        METRICS_HEADER,
        [(r.metric, r.point, r.lo, r.hi, r.n_replicates, r.seed) for r in reports],
    ))
    _atomic_write_json(exp.path("metrics.json"), [r.model_dump(mode="json") for r in reports])

    rows: List[SignificanceRow] = []
    reference = "medpatch.late"
    comparators = [n for n in predictions if n.startswith("baseline.")]
    for comp in comparators:
        for metric_name in METRICS:
            a, b = reps[f"{reference}.{metric_name}"], reps[f"{comp}.{metric_name}"]
            if a.shape != b.shape:
                logger.warning(f"{comp}.{metric_name}: replicate counts differ; skipped")
                continue
            t_stat, p = paired_t_test(a, b)
            log10_p = 0.0 if t_stat == 0.0 else t_log10_p(t_stat, a.size - 1)
            rows.append(SignificanceRow(comparator=comp, metric=metric_name, t=t_stat, p=p,
                                        log10_p=log10_p, p_bonferroni=p))
    for row in rows:
        row.p_bonferroni = bonferroni(row.p, len(rows))
    _atomic_write_text(exp.path("significance.csv"), _csv_text(
        SIGNIFICANCE_HEADER,
        [(r.comparator, r.metric, r.t, r.p, r.log10_p, r.p_bonferroni) for r in rows],
    ))

    names = class_names(exp.dataset.num_classes, cfg.task)
    per_class_rows = []
    late_auroc = per_class(METRICS["auroc"], outputs.late, labels)
    late_auprc = per_class(METRICS["auprc"], outputs.late, labels)
    for c, cname in enumerate(names):
        per_class_rows.append((cname, "" if late_auroc[c] is None else late_auroc[c],
                               "" if late_auprc[c] is None else late_auprc[c]))
    _atomic_write_text(exp.path("per_class.csv"),
                       _csv_text(("class", "auroc", "auprc"), per_class_rows))

    manifest.metrics = reports
    headline = {r.metric: r.point for r in reports if r.metric.startswith(reference)}
    return StageOutput(["metrics.csv", "metrics.json", "significance.csv", "per_class.csv"],
                       headline)


ABLATION_LABELS = {
    0: "full model",
    1: "without unimodal predictions",
    2: "without missingness module",
    3: "without calibration",
    4: "without confidence-based patching",
}


def _stage_ablate(exp: Experiment, manifest: ExperimentManifest) -> StageOutput:
    cfg = exp.config
    ev = cfg.evaluation
    rows = []
    for setting in range(5):
        variant = ablation_variant(setting)
        settings = dict(exp.fusion_settings(), ablation=setting)
        sweep = _fit_fusion(exp, variant, settings)
        test = exp.fusion_inputs("test", variant, settings["theta"], settings["patching"],
                                 settings["theta_entropy"])
        late = sweep.best.predict(test).late
        auroc_rep, _ = bootstrap_ci(METRICS["auroc"], late, test.labels, ev.replicates,
                                    ev.metric_seed, f"ablation{setting}.auroc")
        auprc_rep, _ = bootstrap_ci(METRICS["auprc"], late, test.labels, ev.replicates,
                                    ev.metric_seed, f"ablation{setting}.auprc")
        manifest.learning_rates[f"ablation:{setting}"] = sweep.best_record.lr
        rows.append((setting, ABLATION_LABELS[setting], len(sweep.best.predictors),
                     auroc_rep.point, auroc_rep.lo, auroc_rep.hi,
                     auprc_rep.point, auprc_rep.lo, auprc_rep.hi))
    _atomic_write_text(exp.path("ablation.csv"), _csv_text(
        ("setting", "description", "fused_predictors", "auroc", "auroc_lo", "auroc_hi",
         "auprc", "auprc_lo", "auprc_hi"), rows))
    return StageOutput(["ablation.csv"], {str(r[0]): r[3] for r in rows})


def weights_table(model: MedPatchModel, task: str = "mortality") -> Tuple[List[str], List[List]]:
    """α per class (softmax over predictors) and the β row, report column order."""
    order = [m for m in model.modalities if m in model.predictors]
    order += [k for k in ("miss", "low", "high") if k in model.predictors]
    columns = [PREDICTOR_LABELS.get(k, k) for k in order]
    beta = model.beta()
    beta_cols = [f"beta_{t}" for t in model.variant.loss_terms] if beta is not None else []
    alpha = model.alpha().effective()
    index = {k: i for i, k in enumerate(model.predictors)}
    rows: List[List] = []
    for c, cname in enumerate(class_names(model.num_classes, task)):
        rows.append([cname] + [float(alpha[index[k], c]) for k in order] + [""] * len(beta_cols))
    if beta is not None:
        rows.append(["beta"] + [""] * len(order) + [float(v) for v in beta.effective()])
    return ["row"] + columns + beta_cols, rows


def _stage_report_weights(exp: Experiment, manifest: ExperimentManifest) -> StageOutput:
    model = _load_fusion(exp)
    header, rows = weights_table(model, exp.config.task)
    _atomic_write_text(exp.path("weights.csv"), _csv_text(header, rows))
    return StageOutput(["weights.csv"], {"columns": header[1:],
                                         "parameter_counts": dict(manifest.parameter_counts)})


_HANDLERS: Dict[str, Callable] = {
    "pretrain": _stage_pretrain,
    "train-confidence": _stage_train_confidence,
    "calibrate": _stage_calibrate,
    "train-fusion": _stage_train_fusion,
    "evaluate": _stage_evaluate,
    "ablate": _stage_ablate,
    "report-weights": _stage_report_weights,
}


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

def _check_prerequisites(stage: str, manifest: ExperimentManifest, out: Path) -> Dict[str, str]:
    inputs: Dict[str, str] = {}
    for req in upstream_of(stage):
        record = manifest.stages.get(req)
        if record is None:
            raise PrerequisiteError(stage, req)
        for name, digest in record.checksums.items():
            path = out / name
            if not path.exists():
                raise PrerequisiteError(stage, req, f"{name} is missing")
            if file_digest(path) != digest:
                raise PrerequisiteError(stage, req, f"{name} changed since it was written")
            inputs[name] = digest
    return inputs


def _check_task(config: ExperimentConfig, manifest: ExperimentManifest) -> None:
    previous = manifest.config
    if not previous:
        return
    task, modalities = previous.get("task"), tuple(previous.get("modalities") or ())
    if task != config.task or modalities != tuple(config.active_modalities):
        raise ConfigError(
            f"output directory holds a {task} run over {','.join(modalities)}; "
            f"config asks for {config.task} over {','.join(config.active_modalities)}"
        )


def run_stage(stage: str, config: ExperimentConfig, out_dir) -> dict:
    """Run one stage under the output-directory lock and update the manifest."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage: {stage}")
    out = Path(out_dir)
    with output_lock(out):
        manifest = ExperimentManifest.from_json_file(out / MANIFEST)
        if stage != "gen-data":
            _check_task(config, manifest)
        inputs = _check_prerequisites(stage, manifest, out)
        exp = Experiment(config, out)
        started = time.perf_counter()
        logger.info(f"Running stage {stage} in {out}")
        if stage == "gen-data":
            manifest = ExperimentManifest()
            result = _stage_gen_data(exp)
        else:
            result = _HANDLERS[stage](exp, manifest)
        elapsed = time.perf_counter() - started
        for later in downstream_of(stage):
            manifest.stages.pop(later, None)
        manifest.config = config.snapshot()
        manifest.stages[stage] = StageRecord(
            stage=stage,
            checksums={name: file_digest(out / name) for name in result.files},
            inputs=inputs,
            wall_time_s=elapsed,
        )
        manifest.to_json_file(out / MANIFEST)
        logger.info(f"Stage {stage} finished in {elapsed:.1f}s")
        return {"stage": stage, "files": result.files, **result.summary}


def run_all(config: ExperimentConfig, out_dir, stages: Sequence[str] = PIPELINE) -> List[dict]:
    return [run_stage(stage, config, out_dir) for stage in stages]
