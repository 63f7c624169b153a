"""Command-line entry point: ``attentionmixer {synth,pretrain,train,eval,importance,ablate}``.

Every command reads a JSON config (``--config``), merged over
:data:`DEFAULT_CONFIG` and validated against :data:`CONFIG_SCHEMA`; the
flags ``--seed``, ``--out``, ``--variant`` and ``--jobs`` override it.
Failures print one JSON object on stderr and exit with the category code
from :data:`EXIT_CODES`.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from .data.cohort import ManifestError, generate_synthetic_cohort, load_cohort, load_manifest
from .data.metadata import MetadataPreprocessor, SchemaError
from .data.volume import VolumeFormatError
from .evaluation.crossval import (
    ablation_grid,
    cross_validate,
    prepare_batch,
    write_ablation,
    write_cv_reports,
    write_importance,
)
from .evaluation.folds import fold_indices, make_folds
from .evaluation.metrics import UndefinedAUCError, auc, classification_metrics
from .io import write_csv, write_json
from .model.checkpoint import CheckpointError, load_encoder_state, save_checkpoint, save_encoder
from .model.encoder import EncoderConfig, ViTEncoder, patchify
from .model.network import VARIANTS, ConfigError, ModelVariantConfig, build_model
from .seeding import derive_seed
from .training import TrainConfig, TrainingError, predict, pretrain_encoder, train

logger = logging.getLogger("attentionmixer")

COMMANDS = ("synth", "pretrain", "train", "eval", "importance", "ablate")

EXIT_CODES = {
    "internal": 1,
    "config": 2,
    "missing_file": 3,
    "prerequisite": 4,
    "data": 5,
    "training": 6,
}

DEFAULT_CONFIG = {
    "seed": 0,
    "cohort_dir": "cohort",
    "out_dir": "runs",
    "encoder_checkpoint": None,
    "variant": "full",
    "variants": list(VARIANTS),
    "synth": {
        "n_patients": 200,
        "side": 16,
        "d_m": 8,
        "missing_rate": 0.1,
        "signal_strength": 1.0,
        "field_missing_rate": 0.05,
        "multi_scan_rate": 0.15,
    },
    "encoder": EncoderConfig().to_json(),
    "pretrain": {"steps": 100, "batch_size": 8, "lr": 1e-3},
    "model": {"heads": 4, "mixer_blocks": 2, "mixer_hidden": None, "query_residual": True},
    "train": {"lr": 1e-3, "batch_size": 8, "max_epochs": 50, "patience": 10, "freeze_encoder": False},
    "eval": {"k": 5, "impute_k": 5, "importance_repeats": 5, "bins": 10},
}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_INT1 = {"type": "integer", "minimum": 1}
_RATE = {"type": "number", "minimum": 0, "maximum": 1}

CONFIG_SCHEMA = _obj(
    {
        "seed": {"type": "integer", "minimum": 0},
        "cohort_dir": {"type": "string"},
        "out_dir": {"type": "string"},
        "encoder_checkpoint": {"type": ["string", "null"]},
        "variant": {"enum": list(VARIANTS)},
        "variants": {"type": "array", "items": {"enum": list(VARIANTS)}, "minItems": 1, "uniqueItems": True},
        "synth": _obj(
            {
                "n_patients": {"type": "integer", "minimum": 10},
                "side": {"type": "integer", "minimum": 8},
                "d_m": {"type": "integer", "minimum": 4},
                "missing_rate": _RATE,
                "signal_strength": {"type": "number", "minimum": 0},
                "field_missing_rate": _RATE,
                "multi_scan_rate": _RATE,
            }
        ),
        "encoder": _obj(
            {
                "side": _INT1,
                "patch": _INT1,
                "d_enc": _INT1,
                "depth": _INT1,
                "heads": _INT1,
                "mask_ratio": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "d_f": _INT1,
                "mlp_ratio": _INT1,
            }
        ),
        "pretrain": _obj({"steps": {"type": "integer", "minimum": 0}, "batch_size": _INT1, "lr": {"type": "number", "exclusiveMinimum": 0}}),
        "model": _obj(
            {
                "heads": _INT1,
                "mixer_blocks": {"type": "integer", "minimum": 0},
                "mixer_hidden": {"type": ["integer", "null"], "minimum": 1},
                "query_residual": {"type": "boolean"},
            }
        ),
        "train": _obj(
            {
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": _INT1,
                "max_epochs": _INT1,
                "patience": {"type": "integer", "minimum": 0},
                "freeze_encoder": {"type": "boolean"},
            }
        ),
        "eval": _obj(
            {
                "k": {"type": "integer", "minimum": 2},
                "impute_k": _INT1,
                "importance_repeats": _INT1,
                "bins": _INT1,
            }
        ),
    }
)


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    user = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise CliError("missing_file", f"config file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError("config", f"{path}: invalid JSON at byte offset {exc.pos}") from exc
    try:
        jsonschema.validate(user, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError("config", f"config {where}: {exc.message}") from exc
    cfg = _merge(DEFAULT_CONFIG, user)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    if cfg["train"]["patience"] > cfg["train"]["max_epochs"]:
        raise CliError("config", "train.patience must not exceed train.max_epochs")
    return cfg


# ---------------------------------------------------------------------------
# config -> objects


def encoder_config(cfg: dict) -> EncoderConfig:
    return EncoderConfig(**cfg["encoder"])


def model_config(cfg: dict, d_m: int, variant: str | None = None) -> ModelVariantConfig:
    return ModelVariantConfig(
        variant=variant or cfg["variant"], d_m=d_m, encoder=encoder_config(cfg), **cfg["model"]
    )


def train_config(cfg: dict, variant: str | None = None) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], variant=variant or cfg["variant"], **cfg["train"])


def _manifest(cfg: dict):
    root = Path(cfg["cohort_dir"])
    if not (root / "manifest.json").exists():
        raise CliError("missing_file", f"no cohort manifest at {root / 'manifest.json'}; run synth first")
    return load_manifest(root)


def _encoder_state(cfg: dict, needs_hct: bool):
    """Pretrained encoder weights, or None for a random initialisation."""
    path = cfg["encoder_checkpoint"]
    frozen = cfg["train"]["freeze_encoder"]
    if not needs_hct:
        return None
    if path is None:
        if frozen:
            raise CliError(
                "prerequisite",
                "freeze_encoder is set but no encoder_checkpoint is configured; run pretrain first",
            )
        return None
    if not Path(path).exists():
        raise CliError("prerequisite", f"encoder checkpoint not found: {path}; run pretrain first")
    return load_encoder_state(path, encoder_config(cfg))


def _out(cfg: dict) -> Path:
    return Path(cfg["out_dir"])


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict) -> dict:
    out = Path(cfg["cohort_dir"])
    m = generate_synthetic_cohort(out, seed=cfg["seed"], **cfg["synth"])
    return {"cohort_dir": str(out), "n_samples": len(m.samples), "n_patients": len(m.patient_ids)}


def cmd_pretrain(cfg: dict) -> dict:
    m = _manifest(cfg)
    p = cfg["pretrain"]
    enc_cfg = encoder_config(cfg)
    cohort = load_cohort(m, enc_cfg.side)
    encoder = ViTEncoder(enc_cfg, np.random.default_rng(derive_seed(cfg["seed"], "encoder-init")))
    losses = pretrain_encoder(
        encoder,
        patchify(cohort.volumes, enc_cfg.patch),
        steps=p["steps"],
        batch_size=p["batch_size"],
        lr=p["lr"],
        seed=derive_seed(cfg["seed"], "pretrain"),
    )
    out = _out(cfg)
    save_encoder(encoder, out / "encoder.ckpt")
    write_csv(out / "pretrain_loss.csv", ["step", "loss"], enumerate(losses, start=1))
    return {"checkpoint": str(out / "encoder.ckpt"), "first_loss": losses[0] if losses else None,
            "last_loss": losses[-1] if losses else None}


def cmd_train(cfg: dict) -> dict:
    """Train one model with the first patient-exclusive fold held out for validation."""
    m = _manifest(cfg)
    model_cfg = model_config(cfg, m.d_m)
    encoder_state = _encoder_state(cfg, model_cfg.uses_hct)
    cohort = load_cohort(m, model_cfg.encoder.side, load_volumes=model_cfg.uses_hct)
    assignment = make_folds(cohort.patient_ids, cfg["eval"]["k"], derive_seed(cfg["seed"], "folds"))
    tr, va = fold_indices(cohort.patient_ids, assignment, 0)
    train_data, val_data = cohort.subset(tr), cohort.subset(va)
    pre = None
    if model_cfg.uses_meta:
        pre = MetadataPreprocessor(m.schema, k=cfg["eval"]["impute_k"]).fit(train_data.records)
    tokens = patchify(cohort.volumes, model_cfg.encoder.patch) if model_cfg.uses_hct else None
    tb = prepare_batch(train_data, None if tokens is None else tokens[tr], pre)
    vb = prepare_batch(val_data, None if tokens is None else tokens[va], pre)

    model = build_model(model_cfg, derive_seed(cfg["seed"], "init", 0))
    if encoder_state is not None:
        model.encoder.load_state_dict(encoder_state, strict=True)
    result = train(model, tb, vb, replace(train_config(cfg), seed=derive_seed(cfg["seed"], "train", model_cfg.variant, 0)))
    model.load_state_dict(result.state)
    probs = predict(model, vb)
    cm = classification_metrics(probs, val_data.labels)

    out = _out(cfg)
    save_checkpoint(model, out / "model.ckpt")
    write_csv(out / "trainlog.csv", ["epoch", "train_loss", "val_loss", "val_auc"], result.log.rows())
    summary = {
        "variant": model_cfg.variant,
        "log": result.log.summary(),
        "validation": {
            "auc": auc(probs, val_data.labels),
            "accuracy": cm.accuracy,
            "precision": cm.precision,
            "f1": cm.f1,
        },
        "preprocessing": _scaling(pre),
        "model_config": model_cfg.to_json(),
        "train_config": train_config(cfg).to_json(),
    }
    write_json(out / "train_summary.json", summary)
    return {"checkpoint": str(out / "model.ckpt"), "best_epoch": result.log.best_epoch}


def _scaling(pre: MetadataPreprocessor | None) -> dict:
    if pre is None:
        return {}
    p = pre.params()
    return {key: np.asarray(p[key]).tolist() for key in ("mean", "std", "column_means")}


def _cross_validate(cfg: dict, jobs: int, importance: bool = False):
    m = _manifest(cfg)
    model_cfg = model_config(cfg, m.d_m)
    encoder_state = _encoder_state(cfg, model_cfg.uses_hct)
    ev = cfg["eval"]
    return cross_validate(
        m,
        model_cfg,
        train_config(cfg),
        k=ev["k"],
        seed=cfg["seed"],
        encoder_state=encoder_state,
        impute_k=ev["impute_k"],
        importance_repeats=ev["importance_repeats"] if importance else 0,
        jobs=jobs,
    )


def cmd_eval(cfg: dict, jobs: int = 1) -> dict:
    result = _cross_validate(cfg, jobs)
    write_cv_reports(_out(cfg), result, cfg["eval"]["bins"])
    return {"variant": result.variant, "mean_auc": result.mean_auc}


def cmd_importance(cfg: dict, jobs: int = 1) -> dict:
    if cfg["variant"] == "hct_only":
        raise CliError("config", "importance needs a variant that uses metadata")
    result = _cross_validate(cfg, jobs, importance=True)
    report = result.importance_report()
    write_importance(_out(cfg), report)
    return {"variant": result.variant, "top": report.top(10)}


def cmd_ablate(cfg: dict, jobs: int = 1) -> dict:
    m = _manifest(cfg)
    base = model_config(cfg, m.d_m)
    encoder_state = _encoder_state(cfg, any(v != "meta_only" for v in cfg["variants"]))
    results = ablation_grid(
        m,
        base,
        train_config(cfg),
        k=cfg["eval"]["k"],
        seed=cfg["seed"],
        encoder_state=encoder_state,
        variants=cfg["variants"],
        jobs=jobs,
        impute_k=cfg["eval"]["impute_k"],
    )
    out = _out(cfg)
    write_ablation(out, results)
    write_json(out / "ablation.json", {v: r.to_json() for v, r in results.items()})
    return {v: r.mean_auc for v, r in results.items()}


HANDLERS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "importance": cmd_importance,
    "ablate": cmd_ablate,
}
PARALLEL = {"eval", "importance", "ablate"}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attentionmixer",
        description="Multimodal volume + metadata classifier: synthetic cohorts, "
        "pretraining, training, cross-validated evaluation, importance and ablations.",
        epilog="Log verbosity comes from the AM_LOG environment variable (e.g. AM_LOG=INFO).",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "synth": "write a synthetic cohort to cohort_dir (or --out)",
        "pretrain": "masked-patch pretraining; writes encoder.ckpt",
        "train": "train one model; writes model.ckpt, trainlog.csv, train_summary.json",
        "eval": "k-fold cross-validation; writes metrics.json, ROC, probabilities, histogram",
        "importance": "permutation importance of metadata columns; writes importance.csv",
        "ablate": "cross-validate every variant; writes ablation.csv and ablation.json",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--config", metavar="PATH", help="JSON config file")
        p.add_argument("--seed", type=int, metavar="N", help="master seed")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--variant", choices=VARIANTS, help="model variant")
        p.add_argument("--jobs", type=int, default=1, metavar="N", help="parallel fold workers")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("AM_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _fail(category: str, message: str) -> int:
    code = EXIT_CODES[category]
    print(json.dumps({"error": category, "message": message, "exit_code": code}, sort_keys=True), file=sys.stderr)
    return code


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        overrides = {"seed": args.seed, "variant": args.variant}
        if args.out is not None:
            overrides["cohort_dir" if args.command == "synth" else "out_dir"] = args.out
        cfg = load_config(args.config, overrides)
        if args.jobs < 1:
            raise CliError("config", "--jobs must be >= 1")
        handler = HANDLERS[args.command]
        summary = handler(cfg, args.jobs) if args.command in PARALLEL else handler(cfg)
    except CliError as exc:
        return _fail(exc.category, str(exc))
    except (ConfigError, jsonschema.ValidationError) as exc:
        return _fail("config", str(exc))
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc))
    except CheckpointError as exc:
        return _fail("prerequisite", str(exc))
    except (ManifestError, SchemaError, VolumeFormatError, UndefinedAUCError) as exc:
        return _fail("data", str(exc))
    except TrainingError as exc:
        return _fail("training", str(exc))
    except ValueError as exc:
        return _fail("config", str(exc))
    except Exception as exc:  # noqa: BLE001 - reported, not swallowed
        logger.debug("unexpected failure", exc_info=True)
        return _fail("internal", f"{type(exc).__name__}: {exc}")
    print(json.dumps(summary, sort_keys=True, default=float))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
