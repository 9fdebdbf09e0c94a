"""sdfholo: synthetic cohorts, pre-training, evaluation and atlas outputs.

Every command writes its fully resolved configuration to ``<out>/config.json``
before doing any work. Exit codes: 0 success, 1 usage or configuration error,
2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import anatomy, atlas, evalmetrics
from .errors import (
    CheckpointVersionError,
    ConfigurationError,
    ConsistencyError,
    CorruptFileError,
    DegenerateMaskError,
    DegeneratePartitionError,
    NumericError,
    UnmappedLabelError,
)
from .losses import LossWeights
from .maskfusion import LabelLookup, fuse_sources
from .model import ModelConfig, SDFHolo, load_checkpoint, prepare_study, save_checkpoint
from .synthio import default_phantom_config, load_study, make_cohort, save_study
from .synthio.phantom import EffectModel, source_lookup
from .synthio.text import default_vocabulary, detokenize, words
from .synthio.volumes import read_array, write_array
from .training import TrainConfig, train

log = logging.getLogger("sdfholo")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_VERSION = 1
WINDOW = 128
OVERLAP = 0.5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---- helpers ----------------------------------------------------------------

def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    version = payload.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigurationError(f"config schema version {version} unsupported (expected {CONFIG_VERSION})")
    return payload


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _prepare_out(out) -> Path:
    d = Path(out)
    try:
        d.mkdir(parents=True, exist_ok=True)
        probe = d / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigurationError(f"output directory {d} is not writable: {exc}") from exc
    return d


def _echo(out: Path, command: str, resolved: dict):
    (out / "config.json").write_text(_dump({"version": CONFIG_VERSION, "command": command, **resolved}))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _study_dirs(data) -> list:
    root = Path(data)
    manifest = root / "manifest.json"
    if not manifest.exists():
        raise CorruptFileError(f"{root} has no manifest.json")
    try:
        entries = json.loads(manifest.read_text())["studies"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise CorruptFileError(f"{manifest} is malformed") from exc
    return [(e["id"], root / e["dir"]) for e in entries]


def _load_studies(data, fuse: bool = True) -> list:
    """(id, study) pairs; studies with source masks are re-fused through the lookup."""
    root = Path(data)
    lookup = LabelLookup.load(root / "lookup.json") if (root / "lookup.json").exists() else None
    out = []
    for sid, d in _study_dirs(data):
        s = load_study(d)
        if fuse and s.sources and lookup is not None:
            s.mask = fuse_sources(s.sources, lookup)
        out.append((sid, s))
    return out


def _default_constants(model_cfg: ModelConfig, weights: LossWeights) -> dict:
    return {
        "mask_ratio": model_cfg.mask_ratio,
        "patch_size": [model_cfg.patch_size] * 3,
        "regions": model_cfg.regions,
        "omega_pet": weights.omega_pet,
        "lambdas": list(weights.lambdas),
        "window": [WINDOW] * 3,
        "overlap": OVERLAP,
        "r_threshold": atlas.R_THRESHOLD,
        "fdr_alpha": atlas.FDR_ALPHA,
    }


# ---- synth ------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _load_json(args.config)
    n = int(args.n if args.n is not None else cfg.get("n", 4))
    phantom_over = cfg.get("phantom", {})
    cohort_cfg = cfg.get("cohort", {})
    try:
        phantom = default_phantom_config(**{"emit_sources": True, **phantom_over})
        effect = EffectModel(**cohort_cfg.get("effect", {}))
    except (TypeError, KeyError) as exc:
        raise ConfigurationError(f"bad synth config: {exc}") from exc
    phantom.validate()
    strata = cohort_cfg.get("strata")
    age_range = tuple(cohort_cfg.get("age_range", (12, 82)))
    if strata is None and n < 1:
        raise ConfigurationError(f"need at least one study, got n={n}")
    resolved = {"seed": args.seed, "n": n, "phantom": phantom.to_dict(),
                "cohort": {"effect": effect.to_dict(), "strata": strata, "age_range": list(age_range)}}
    out = _prepare_out(args.out)
    _echo(out, "synth", resolved)

    if strata is None and n == 1:
        # a cohort needs two subjects; a single study is drawn the same way and the second discarded
        cohort = make_cohort(args.seed, 2, age_range, effect, phantom)
        studies = cohort.studies[:1]
    else:
        cohort = make_cohort(args.seed, n, age_range, effect, phantom, strata)
        studies = cohort.studies
    source_lookup(phantom).save(out / "lookup.json")
    entries = []
    for i, s in enumerate(studies):
        sid = f"study_{i:04d}"
        files = save_study(s, out / sid)
        entries.append({"id": sid, "dir": sid, "age": s.subject_age,
                        "files": {p.name: _sha256(p) for p in sorted(files)}})
    manifest = {"seed": args.seed, "n": len(entries), "studies": entries,
                "lookup_sha256": _sha256(out / "lookup.json")}
    (out / "manifest.json").write_text(_dump(manifest))
    print(f"wrote {len(entries)} studies to {out}")
    return EXIT_OK


# ---- pretrain ---------------------------------------------------------------

def _model_config(cfg: dict) -> ModelConfig:
    model = dict(cfg.get("model", {}))
    model.setdefault("vocab_size", len(default_vocabulary()))
    try:
        return ModelConfig(**model)
    except TypeError as exc:
        raise ConfigurationError(f"bad model config: {exc}") from exc


def cmd_pretrain(args) -> int:
    cfg = _load_json(args.config)
    model_cfg = _model_config(cfg)
    train_over = dict(cfg.get("train", {}))
    for key in ("steps", "lr", "optimizer", "seed"):
        val = getattr(args, key)
        if val is not None:
            train_over[key] = val
    try:
        train_cfg = TrainConfig(**train_over)
        weights = LossWeights(**cfg.get("weights", {}))
    except TypeError as exc:
        raise ConfigurationError(f"bad training config: {exc}") from exc
    out = _prepare_out(args.out)
    _echo(out, "pretrain", {"data": str(args.data), "model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                            "weights": dict(zip(("mim", "lm", "gac", "anchor", "omega_pet"),
                                                (*weights.lambdas, weights.omega_pet))),
                            "constants": _default_constants(model_cfg, weights)})
    studies = _load_studies(args.data)
    if not studies:
        raise ConsistencyError(f"no studies under {args.data}")
    preps = []
    partitions = {}
    for sid, s in studies:
        if len(s.report.tokens) and max(s.report.tokens) >= model_cfg.vocab_size:
            raise ConfigurationError(f"{sid}: report token id exceeds vocab_size {model_cfg.vocab_size}")
        p = prepare_study(s, model_cfg)
        preps.append(p)
        partitions[sid] = p.manifest
    (out / "partitions.json").write_text(_dump(partitions))
    model = SDFHolo(model_cfg, seed=train_cfg.seed)
    result = train(model, preps, train_cfg, weights, log_path=out / "loss_log.jsonl")
    save_checkpoint(model, out / "model.ckpt", extra={"steps": train_cfg.steps, "seed": train_cfg.seed})
    final = result.history[-1]["L_total"] if result.history else float("nan")
    print(f"trained {train_cfg.steps} steps on {len(preps)} studies; final L_total {final:.6f}")
    return EXIT_OK


# ---- segmentation -----------------------------------------------------------

def suv_predictor(threshold: float, scale: float):
    """Voxelwise lesion probability sigmoid((SUV - threshold) / scale)."""
    def predict(ct_win, pet_win):
        return 1.0 / (1.0 + np.exp(-(np.asarray(pet_win, dtype=np.float64) - threshold) / scale))
    return predict


def _pad_to_window(arr: np.ndarray, window: int, fill: float) -> np.ndarray:
    pads = [(0, max(0, window - s)) for s in arr.shape]
    return np.pad(arr, pads, mode="constant", constant_values=fill)


def cmd_infer_seg(args) -> int:
    resolved = {"data": str(args.data), "window": args.window, "overlap": args.overlap,
                "suv_threshold": args.suv_threshold, "suv_scale": args.suv_scale,
                "weighting": args.weighting, "checkpoint": args.checkpoint}
    if not 0 <= args.overlap < 1 or args.window < 1:
        raise ConfigurationError("window must be positive and overlap in [0, 1)")
    out = _prepare_out(args.out)
    _echo(out, "infer-seg", resolved)
    if args.checkpoint:
        load_checkpoint(args.checkpoint)  # validates the file and its version
    predictor = suv_predictor(args.suv_threshold, args.suv_scale)
    for sid, s in _load_studies(args.data, fuse=False):
        dims = s.dims
        ct = _pad_to_window(s.ct.values.astype(np.float64), args.window, -1000.0)
        pet = _pad_to_window(s.pet.values.astype(np.float64), args.window, 0.0)
        pred = evalmetrics.sliding_window_infer(predictor, ct, pet, args.window, args.overlap, s.spacing,
                                                weighting=args.weighting)
        mask = pred.mask[:dims[0], :dims[1], :dims[2]]
        d = out / sid
        d.mkdir(exist_ok=True)
        write_array(d, "lesion_pred", mask.astype(np.uint16), "uint16", s.spacing, "MASK")
    print(f"wrote predictions to {out}")
    return EXIT_OK


def cmd_eval_seg(args) -> int:
    out = _prepare_out(args.out)
    _echo(out, "eval-seg", {"pred": str(args.pred), "data": str(args.data), "method": args.method,
                            "connectivity": args.connectivity})
    rows = []
    for sid, d in _study_dirs(args.data):
        gt, h = read_array(d, "lesion")
        pred, hp = read_array(Path(args.pred) / sid, "lesion_pred")
        if tuple(hp["dims"]) != tuple(h["dims"]):
            raise ConsistencyError(f"{sid}: prediction dims {hp['dims']} differ from ground truth {h['dims']}")
        sc = evalmetrics.seg_scores(pred > 0, gt > 0, h["spacing"], args.connectivity)
        rows.append({"method": args.method, "study": sid, "dsc": sc.dsc, "fnv": sc.fnv, "fpv": sc.fpv,
                     "flags": ";".join(sc.flags)})
    with open(out / "per_study.csv", "w") as fh:
        fh.write("study,dsc,fnv,fpv,flags\n")
        for r in rows:
            fh.write(f"{r['study']},{r['dsc']:.4f},{r['fnv']:.4f},{r['fpv']:.4f},{r['flags']}\n")
    table = evalmetrics.score_table(rows)
    (out / "seg_scores.csv").write_text(evalmetrics.table_csv(table))
    print(evalmetrics.table_csv(table), end="")
    return EXIT_OK


# ---- reports ----------------------------------------------------------------

def cmd_gen_report(args) -> int:
    out = _prepare_out(args.out)
    _echo(out, "gen-report", {"checkpoint": str(args.checkpoint), "data": str(args.data),
                              "max_len": args.max_len})
    model, _ = load_checkpoint(args.checkpoint)
    vocab = default_vocabulary()
    if model.config.vocab_size != len(vocab):
        raise CheckpointVersionError(f"checkpoint vocab_size {model.config.vocab_size} does not match "
                                     f"this build's vocabulary ({len(vocab)})")
    reports = {}
    for sid, s in _load_studies(args.data):
        prep = prepare_study(s, model.config)
        ids = model.generate_report(prep, vocab.bos, vocab.eos, args.max_len)
        reports[sid] = {"tokens": ids, "text": detokenize(ids, vocab)}
    (out / "reports.json").write_text(_dump(reports))
    print(f"generated {len(reports)} reports")
    return EXIT_OK


def cmd_eval_report(args) -> int:
    out = _prepare_out(args.out)
    _echo(out, "eval-report", {"generated": str(args.generated), "data": str(args.data), "method": args.method})
    try:
        generated = json.loads(Path(args.generated).read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{args.generated} is not valid JSON") from exc
    rows = []
    for sid, d in _study_dirs(args.data):
        if sid not in generated:
            raise ConsistencyError(f"no generated report for {sid}")
        ref = words(json.loads((d / "report.json").read_text())["text"])
        cand = words(generated[sid]["text"])
        rows.append({"method": args.method, **evalmetrics.report_scores(cand, ref)})
    table = evalmetrics.score_table(rows, evalmetrics.REPORT_COLUMNS)
    text = evalmetrics.table_csv(table, evalmetrics.REPORT_COLUMNS)
    (out / "report_scores.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


# ---- atlas ------------------------------------------------------------------

def cmd_atlas(args) -> int:
    exclude = [] if args.keep_bladder else [anatomy.BLADDER]
    exclude += [anatomy.resolve_class(c) for c in args.exclude_organ]
    exclude = sorted(set(exclude))
    out = _prepare_out(args.out)
    _echo(out, "atlas", {"data": str(args.data), "features": args.features, "checkpoint": args.checkpoint,
                         "exclude_organs": exclude, "r_threshold": args.r_threshold, "fdr_alpha": args.fdr,
                         "split_middle": args.split_middle, "top_k": args.top_k,
                         "system_map": args.system_map})
    studies = _load_studies(args.data)
    ids = [sid for sid, _ in studies]
    organ_ids = sorted({c for _, s in studies for c in s.mask.classes()})
    if args.features == "embedding":
        if not args.checkpoint:
            raise ConfigurationError("embedding features need --checkpoint")
        model, _ = load_checkpoint(args.checkpoint)
        preps = [prepare_study(s, model.config) for _, s in studies]
        fm = atlas.first_component(atlas.embedding_features(model, preps, organ_ids, ids))
    else:
        fm = atlas.suv_features([s for _, s in studies], organ_ids, ids)
    system_map = atlas.load_system_map(args.system_map) if args.system_map else atlas.default_system_map()
    atlas.save_system_map(out / "system_map.json", system_map)

    strata = atlas.stratify(fm.ages, split_middle=False)
    if strata.rejected:
        (out / "rejected_subjects.json").write_text(_dump([{"subject": ids[i], "age": a} for i, a in strata.rejected]))
    young, old = fm.rows(strata.members("young")), fm.rows(strata.members("old"))
    full = atlas.covariance_difference(young, old, top_k=args.top_k)
    atlas.write_matrix_csv(full.difference, out / "covdiff_young_old_all.csv")
    atlas.write_ranking_csv(full.ranking, out / "covdiff_young_old_all_top.csv")
    present = [c for c in exclude if c in fm.organ_ids]
    fm_x = atlas.exclude_organs(fm, present)
    diff = atlas.covariance_difference(fm_x.rows(strata.members("young")), fm_x.rows(strata.members("old")),
                                       top_k=args.top_k)
    atlas.write_matrix_csv(diff.difference, out / "covdiff_young_old.csv")
    atlas.write_ranking_csv(diff.ranking, out / "covdiff_young_old_top.csv")

    net_strata = atlas.stratify(fm_x.ages, split_middle=args.split_middle)
    networks = {}
    for name, rows in net_strata.groups.items():
        cov = atlas.OrganMatrix(atlas.covariance_matrix(fm_x.rows(rows)), fm_x.organ_ids, fm_x.excluded)
        atlas.write_matrix_csv(cov, out / f"covariance_{name}.csv")
        net = atlas.correlation_network(fm_x.rows(rows), r_threshold=args.r_threshold, alpha=args.fdr)
        networks[name] = net.to_json()
    (out / "networks.json").write_text(_dump({"excluded": fm_x.excluded, "groups": networks}))
    trends = atlas.system_trends(fm_x, strata, system_map)
    atlas.write_trends_csv(trends, out / "system_trends.csv")
    print(f"atlas written to {out} ({len(fm_x.organ_ids)} organs, {len(ids)} subjects)")
    return EXIT_OK


# ---- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sdfholo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic cohort")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="pre-train on a synthetic cohort")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--optimizer", choices=("sgd", "adamw"))
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("infer-seg", help="sliding-window lesion inference")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--window", type=int, default=WINDOW)
    s.add_argument("--overlap", type=float, default=OVERLAP)
    s.add_argument("--suv-threshold", type=float, default=4.0)
    s.add_argument("--suv-scale", type=float, default=0.25)
    s.add_argument("--weighting", choices=("uniform", "gaussian"), default="uniform")
    s.set_defaults(func=cmd_infer_seg)

    s = sub.add_parser("eval-seg", help="DSC / FNV / FPV table")
    s.add_argument("--pred", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--method", default="sdfholo")
    s.add_argument("--connectivity", type=int, choices=(6, 18, 26), default=evalmetrics.CONNECTIVITY)
    s.set_defaults(func=cmd_eval_seg)

    s = sub.add_parser("gen-report", help="greedy report generation")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-len", type=int, default=160)
    s.set_defaults(func=cmd_gen_report)

    s = sub.add_parser("eval-report", help="BLEU / ROUGE-L table")
    s.add_argument("--generated", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--method", default="sdfholo")
    s.set_defaults(func=cmd_eval_report)

    s = sub.add_parser("atlas", help="covariance, network and trend outputs")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--features", choices=("suv", "embedding"), default="suv")
    s.add_argument("--checkpoint")
    s.add_argument("--exclude-organ", action="append", default=[])
    s.add_argument("--keep-bladder", action="store_true", help="do not exclude the urinary bladder")
    s.add_argument("--r-threshold", type=float, default=atlas.R_THRESHOLD)
    s.add_argument("--fdr", type=float, default=atlas.FDR_ALPHA)
    s.add_argument("--split-middle", action="store_true")
    s.add_argument("--top-k", type=int, default=20)
    s.add_argument("--system-map")
    s.set_defaults(func=cmd_atlas)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorruptFileError, ConsistencyError, CheckpointVersionError, UnmappedLabelError,
            DegeneratePartitionError, DegenerateMaskError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
