"""Command-line driver for the whole pipeline.

Every subcommand writes its outputs plus a run manifest recording the flags,
input/output hashes and timings.  ``replay`` re-executes a manifest.  Errors
go to stderr as a JSON object with an ``error`` category and exit code 2.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import attribank, explain, metrics, protogen
from .backends import (
    DETECTION_CLASSES,
    KINDS,
    detection_labels,
    fit_backend,
    load_model,
    save_model,
)
from .dataio import (
    BONAFIDE,
    FORMAT_VERSION,
    dumps_canonical,
    load_embeddings,
    load_protocol,
    load_schema,
    save_protocol,
    schema_from_document,
    sha256_file,
    write_embeddings,
)
from .errors import SchemaMismatch, SpoofAttrError, UnknownClass
from .seeding import derive_seed

RHO_FILE = "rho.pae"
RHO_INDEX = "rho.tsv"
PATH_FLAGS = ("embeddings", "index", "protocol", "schema", "model", "out", "metadata", "spec", "assignments")


# ---------------------------------------------------------------------------
# helpers


def _meta_path(embeddings) -> Path:
    return Path(str(embeddings) + ".meta.json")


def _read_meta(embeddings) -> dict | None:
    p = _meta_path(embeddings)
    return json.loads(p.read_text(encoding="utf-8")) if p.exists() else None


def _write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps_canonical(doc), encoding="utf-8")


def _load_partition(args, partition):
    ds = load_embeddings(args.embeddings, args.index)
    if getattr(args, "protocol", None):
        proto = load_protocol(args.protocol)
        return proto.resolve(ds, partition), proto.name
    return ds, None


def _schema_for(args, meta):
    if meta is not None and "schema" in meta:
        return schema_from_document(meta["schema"], source=str(_meta_path(args.embeddings)))
    if getattr(args, "schema", None):
        return load_schema(args.schema)
    return None


def _task_labels(task, labels):
    if task == "detect":
        return detection_labels(labels)
    return list(labels)


def _spoof_rows(task, labels):
    return [i for i, lab in enumerate(labels) if task == "detect" or lab != BONAFIDE]


# ---------------------------------------------------------------------------
# subcommands; each returns (inputs, outputs) path lists for the manifest


def cmd_synth(args):
    spec = protogen.load_synth_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    ds, proto = protogen.synth_generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(ds, out / "embeddings.pae", out / "index.tsv")
    save_protocol(proto, out / "protocol.json")
    protogen.save_synth_spec(spec, out / "synth_spec.json")
    inputs = [args.spec] if Path(args.spec).exists() else []
    return inputs, [out / "embeddings.pae", out / "index.tsv", out / "protocol.json", out / "synth_spec.json"]


def _read_metadata(path):
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise ValueError(f"{path}:{lineno}: expected utterance, attack, speaker[, origin]")
            meta[parts[0]] = {"attack": parts[1], "speaker": parts[2],
                              "origin": parts[3] if len(parts) > 3 else "train"}
    return meta


def cmd_partition(args):
    if args.spec:
        spec = protogen.PartitionSpec.from_document(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    else:
        spec = protogen.PartitionSpec()
    if args.seed is not None:
        spec.seed = args.seed
    proto = protogen.build_attr17(_read_metadata(args.metadata), spec)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_protocol(proto, args.out)
    return [p for p in (args.metadata, args.spec) if p], [args.out]


def cmd_train_extractors(args):
    ds = load_embeddings(args.embeddings, args.index)
    proto = load_protocol(args.protocol)
    schema = load_schema(args.schema)
    cfg = attribank.TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch,
                                pooling=args.pooling, normalize=args.normalize)
    bank = attribank.train_bank(proto.resolve(ds, "train"), proto.resolve(ds, "dev"), schema,
                                cfg, seed=args.seed or 0, workers=args.workers)
    attribank.save_bank(bank, args.out)
    out = Path(args.out)
    inputs = [args.embeddings, args.index, args.protocol] + ([args.schema] if Path(args.schema).exists() else [])
    return inputs, [out / "manifest.json"] + [out / f"extractor_{i}.pam" for i in range(len(bank.extractors))]


def cmd_extract(args):
    bank = attribank.load_bank(args.model)
    ds, _ = _load_partition(args, args.partition)
    rho = attribank.extract_all(bank, ds, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(rho, out / RHO_FILE, out / RHO_INDEX)
    meta = {
        "schema_version": FORMAT_VERSION,
        "kind": "prob-attr-embedding",
        "schema_hash": bank.schema.digest(),
        "schema": bank.schema.to_document(),
        "bank_manifest_sha256": sha256_file(Path(args.model) / "manifest.json"),
    }
    _write_json(_meta_path(out / RHO_FILE), meta)
    inputs = [args.embeddings, args.index, Path(args.model) / "manifest.json"] + ([args.protocol] if args.protocol else [])
    return inputs, [out / RHO_FILE, out / RHO_INDEX, _meta_path(out / RHO_FILE)]


def cmd_train_backend(args):
    ds, proto_name = _load_partition(args, args.partition)
    meta = _read_meta(args.embeddings)
    schema = _schema_for(args, meta)
    rows = _spoof_rows(args.task, ds.labels)
    x = ds.vectors[rows].astype(np.float64)
    labels = _task_labels(args.task, [ds.labels[i] for i in rows])
    classes = DETECTION_CLASSES if args.task == "detect" else None
    manifest = {
        "task": args.task,
        "schema_hash": meta["schema_hash"] if meta else (schema.digest() if schema else None),
        "features": "rho" if meta else "raw",
        "protocol": proto_name,
        "train_embeddings_sha256": sha256_file(args.embeddings),
        "score": "native margins, no cross-class normalisation",
    }
    hp = {"nb": {"alpha": args.alpha}, "dt": {"max_depth": args.max_depth, "min_leaf": args.min_leaf},
          "lr": {"reg": args.reg, "objective": "logistic"}, "svm": {"reg": args.reg, "objective": "hinge"}}[args.model]
    manifest["hyperparameters"] = hp
    model = fit_backend(args.model, x, labels, sizes=schema, classes=classes, alpha=args.alpha,
                        max_depth=args.max_depth, min_leaf=args.min_leaf, reg=args.reg,
                        seed=args.seed or 0, workers=args.workers, manifest=manifest)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_model(model, args.out)
    return [args.embeddings, args.index] + ([args.protocol] if args.protocol else []), [args.out]


def _check_schema(model, meta, embeddings):
    want = model.manifest.get("schema_hash")
    if want is None:
        return
    have = meta.get("schema_hash") if meta else None
    if have != want:
        raise SchemaMismatch(
            f"model expects schema {want[:12]}, embeddings {embeddings} carry {(have or 'none')[:12]}"
        )


def cmd_eval(args):
    model = load_model(args.model)
    meta = _read_meta(args.embeddings)
    _check_schema(model, meta, args.embeddings)
    ds, proto_name = _load_partition(args, args.partition)
    task = model.manifest.get("task", "attribute")
    rows = _spoof_rows(task, ds.labels)
    x = ds.vectors[rows].astype(np.float64)
    raw_labels = [ds.labels[i] for i in rows]
    labels = _task_labels(task, raw_labels)
    classes = model.classes
    known = [i for i, lab in enumerate(labels) if lab in classes]
    unknown = [i for i, lab in enumerate(labels) if lab not in classes]
    if unknown and not args.allow_unknown:
        raise UnknownClass(f"label {labels[unknown[0]]!r} is not a model class; pass --allow-unknown to report assignments")
    scores = model.score(x)
    preds = model.predict(x)
    y = np.array([classes.index(labels[i]) for i in known], dtype=np.int64)
    cm = metrics.confusion_matrix(y, preds[known], len(classes))
    report = {
        "schema_version": FORMAT_VERSION,
        "protocol": proto_name,
        "partition": args.partition,
        "model_sha256": sha256_file(args.model),
        "model_type": model.kind,
        "task": task,
        "classes": list(classes),
        "n_trials": len(known),
        "confusion": cm.tolist(),
    }
    present = [c for c in range(len(classes)) if cm[c].sum() > 0]
    report["balanced_accuracy"] = metrics.balanced_accuracy(cm[np.ix_(present, present)]) if present else None
    if task == "detect":
        d = model.detection_score(x[known])
        spoof = classes.index("spoof")
        report["eer"] = metrics.eer(metrics.ScorePool(d[y == spoof], d[y != spoof])).value
        report["detection_target"] = "spoof"
    else:
        report["eer"] = metrics.multiclass_eer(scores[known], y, pooling=args.pooling)
        report["eer_pooling"] = args.pooling
        report["score_normalization"] = "none"
    if unknown:
        names = sorted({labels[i] for i in unknown})
        counts = {n: [0] * len(classes) for n in names}
        for i in unknown:
            counts[labels[i]][int(preds[i])] += 1
        report["unknown_assignments"] = {"known": list(classes), "counts": counts}
    schema = _schema_for(args, meta)
    if schema is not None and task == "attribute" and meta is not None:
        report["flow"] = metrics.flow_report(x, raw_labels, schema)
    _write_json(args.out, report)
    print(f"EER: {report['eer']:.6f}")
    ba = report["balanced_accuracy"]
    print(f"balanced accuracy: {ba:.6f}" if ba is not None else "balanced accuracy: n/a")
    return [args.model, args.embeddings, args.index] + ([args.protocol] if args.protocol else []), [args.out]


def cmd_explain(args):
    model = load_model(args.model)
    meta = _read_meta(args.embeddings)
    _check_schema(model, meta, args.embeddings)
    schema = _schema_for(args, meta)
    if schema is None:
        raise SchemaMismatch("ranking needs an attribute schema (embedding sidecar or --schema)")
    full = load_embeddings(args.embeddings, args.index)
    proto = load_protocol(args.protocol) if args.protocol else None
    bg_set = proto.resolve(full, args.background_partition) if proto else full
    ev_set = proto.resolve(full, args.partition) if proto else full
    task = model.manifest.get("task", "attribute")
    bg_rows = _spoof_rows(task, bg_set.labels)
    ev_rows = _spoof_rows(task, ev_set.labels)
    if args.limit is not None:
        pick = np.random.default_rng(derive_seed(args.seed or 0, "explain-subset"))
        if len(ev_rows) > args.limit:
            ev_rows = sorted(pick.choice(ev_rows, args.limit, replace=False).tolist())
    background = explain.background_sample(bg_set.vectors[bg_rows], args.background_n, seed=args.seed or 0)
    rep = explain.explain_dataset(model, ev_set.vectors[ev_rows], background, method=args.shap,
                                  n_permutations=args.shap_n, seed=args.seed or 0, workers=args.workers)
    table = explain.rank_aggregate(rep.phi, schema, class_mode=args.class_mode)
    doc = {
        "schema_version": FORMAT_VERSION,
        "model_sha256": sha256_file(args.model),
        "classes": list(model.classes),
        "estimator": rep.estimator,
        "background": {"partition": args.background_partition, "rows": int(background.shape[0])},
        "base_value": np.asarray(rep.base).tolist(),
        "n_utterances": len(ev_rows),
        "class_mode": args.class_mode,
        "ranking": table.to_document(),
    }
    _write_json(args.out, doc)
    return [args.model, args.embeddings, args.index] + ([args.protocol] if args.protocol else []), [args.out]


def cmd_hamming(args):
    schema = load_schema(args.schema)
    attacks, mat = protogen.hamming_matrix(schema)
    doc = {"schema_version": FORMAT_VERSION, "attacks": attacks, "distances": mat.tolist()}
    inputs = [args.schema] if Path(args.schema).exists() else []
    if args.assignments:
        rep = json.loads(Path(args.assignments).read_text(encoding="utf-8"))
        ua = rep.get("unknown_assignments")
        if not ua:
            raise SpoofAttrError(f"{args.assignments} holds no unknown-attack assignments")
        known = ua["known"]
        rows = sorted(ua["counts"])
        conf = np.array([ua["counts"][r] for r in rows], dtype=np.float64)
        _, ham = protogen.hamming_matrix(schema, rows + known)
        sub = ham[: len(rows), len(rows):]
        check = protogen.confusability_check(conf, sub)
        doc["confusability"] = {"unknown": rows, "known": known, **check}
        inputs.append(args.assignments)
    _write_json(args.out, doc)
    return inputs, [args.out]


COMMANDS = {
    "synth": cmd_synth,
    "partition": cmd_partition,
    "train-extractors": cmd_train_extractors,
    "extract": cmd_extract,
    "train-backend": cmd_train_backend,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "hamming": cmd_hamming,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spoofattr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--out", required=True)
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        if seed:
            p.add_argument("--seed", type=int, default=None)

    def data(p, protocol_required=False):
        p.add_argument("--embeddings", required=True)
        p.add_argument("--index", required=True)
        p.add_argument("--protocol", required=protocol_required)

    p = sub.add_parser("synth", help="generate a seeded synthetic embedding set")
    p.add_argument("--spec", default="det", help="det, attr17 or a spec file")
    common(p)

    p = sub.add_parser("partition", help="build an attr-17 style protocol from utterance metadata")
    p.add_argument("--metadata", required=True, help="TSV: utterance, attack, speaker, origin")
    p.add_argument("--spec", help="partition spec file")
    common(p)

    p = sub.add_parser("train-extractors", help="train the attribute extractor bank")
    data(p, protocol_required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--pooling", choices=("pooled", "macro"), default="pooled")
    p.add_argument("--normalize", action="store_true", help="length-normalise embeddings")
    common(p)

    p = sub.add_parser("extract", help="compute probabilistic attribute embeddings")
    data(p)
    p.add_argument("--partition", default="eval")
    p.add_argument("--model", required=True, help="extractor bank directory")
    common(p, seed=False)

    p = sub.add_parser("train-backend", help="fit a back-end classifier")
    data(p)
    p.add_argument("--partition", default="train")
    p.add_argument("--model", choices=KINDS, required=True)
    p.add_argument("--task", choices=("attribute", "detect"), default="attribute")
    p.add_argument("--schema")
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--max-depth", type=int, default=5)
    p.add_argument("--min-leaf", type=int, default=1)
    p.add_argument("--reg", type=float, default=1e-4)
    common(p)

    p = sub.add_parser("eval", help="score a partition and report EER and balanced accuracy")
    data(p)
    p.add_argument("--partition", default="eval")
    p.add_argument("--model", required=True)
    p.add_argument("--schema")
    p.add_argument("--pooling", choices=("pooled", "macro"), default="pooled")
    p.add_argument("--allow-unknown", action="store_true", help="report assignments of labels the model lacks")
    common(p, seed=False)

    p = sub.add_parser("explain", help="Shapley ranking of attribute values")
    data(p)
    p.add_argument("--partition", default="eval")
    p.add_argument("--background-partition", default="train")
    p.add_argument("--model", required=True)
    p.add_argument("--schema")
    p.add_argument("--shap", choices=("exact", "sample"), default="sample")
    p.add_argument("--shap-n", type=int, default=2000)
    p.add_argument("--background-n", type=int, default=100)
    p.add_argument("--limit", type=int, default=None, help="explain at most this many utterances")
    p.add_argument("--class-mode", choices=("per-class", "pooled"), default="per-class")
    common(p)

    p = sub.add_parser("hamming", help="attack Hamming distances and confusability")
    p.add_argument("--schema", required=True)
    p.add_argument("--assignments", help="eval report with unknown-attack assignments")
    common(p, seed=False)

    p = sub.add_parser("replay", help="re-run the command recorded in a run manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="write outputs here instead")
    p.add_argument("--workers", type=int)
    return parser


def manifest_path(out) -> Path:
    out = Path(out)
    return out / "run_manifest.json" if out.is_dir() else Path(str(out) + ".run.json")


def _absolutise(flags: dict) -> dict:
    flags = dict(flags)
    for k in PATH_FLAGS:
        v = flags.get(k)
        if v is not None and (k == "out" or Path(v).exists()):
            flags[k] = str(Path(v).resolve())
    return flags


def execute(flags: dict) -> dict:
    """Run one subcommand from a flag dictionary and write its manifest."""
    started = time.time()
    args = argparse.Namespace(**flags)
    inputs, outputs = COMMANDS[flags["command"]](args)
    manifest = {
        "schema_version": FORMAT_VERSION,
        "tool": "spoofattr",
        "version": __version__,
        "command": flags["command"],
        "flags": flags,
        "seed": flags.get("seed"),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "timings": {"started": started, "seconds": time.time() - started},
        "workers": flags.get("workers"),
    }
    _write_json(manifest_path(flags["out"]), manifest)
    return manifest


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "replay":
            recorded = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
            flags = dict(recorded["flags"])
            if args.out:
                flags["out"] = str(Path(args.out).resolve())
            if args.workers:
                flags["workers"] = args.workers
            execute(flags)
        else:
            execute(_absolutise(vars(args)))
    except SpoofAttrError as exc:
        _fail(exc.category, exc)
        return 2
    except FileNotFoundError as exc:
        _fail("FileNotFound", exc)
        return 2
    except json.JSONDecodeError as exc:
        _fail("MalformedDocument", exc)
        return 2
    except (ValueError, KeyError) as exc:
        _fail("InvalidInput", exc)
        return 2
    return 0


def _fail(category, exc):
    sys.stderr.write(json.dumps({"error": category, "message": str(exc)}) + "\n")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
