"""Command-line pipeline over manifests: label, split, synth, train, evaluate.

Every subcommand takes an optional JSON config file plus flag overrides
(flags win), draws all randomness from a single --seed, writes artifacts
under --out-dir, and finishes with a RunReport JSON describing the run.
Outputs are byte-identical across reruns with identical inputs and seed;
the wall-clock field is the one exception, and runreport_fingerprint
excludes it for comparisons.

Exit codes: 0 success, 1 contract errors (bad values, bad state),
2 I/O and file-format errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .classify import (
    ProbeConfig,
    PromptSet,
    default_prompts,
    fit_linear_probe,
    global_feature_matrix,
    image_features,
    probe_predict,
    zero_shot_scores,
)
from .datapipe import (
    PATHOLOGIES,
    Lexicon,
    SynthConfig,
    build_single_disease_subset,
    default_lexicon,
    filter_with_report,
    label_report,
    labels_to_matrix,
    make_splits,
    manifest_hash,
    read_manifest,
    synth_paired_dataset,
    write_manifest,
)
from .encoders import (
    ImageGrid,
    encode_image_toy,
    encode_text_toy,
    read_pgm,
    save_embeddings,
    write_pgm,
)
from .errors import (
    ConsistencyError,
    FormatError,
    InsufficientDataError,
    UndefinedAucError,
    VersionError,
)
from .metrics import aggregate_auc, roc_auc
from .trainer import TrainConfig, encode_report, load_checkpoint, save_checkpoint, train


# ---------------------------------------------------------------------------
# Run reports
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    """What a subcommand did: inputs digest, outputs, and any scores."""

    command: str
    config_hash: str = ""
    seed: int | None = None
    outputs: list[str] = field(default_factory=list)
    auc: dict | None = None
    auc_mean: float | None = None
    auc_std: float | None = None
    content_hash: str | None = None
    wall_clock_seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def runreport_fingerprint(path) -> str:
    """Digest of a RunReport with the wall-clock timing stripped.

    Two runs of the same command over the same inputs and seed must agree
    on this fingerprint even though their timings differ.
    """
    payload = json.loads(Path(path).read_text())
    payload.pop("wall_clock_seconds", None)
    return _digest(payload)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()


def _content_hash(out_dir: Path, outputs: list[str]) -> str:
    """Digest over the bytes of every listed output, directories walked."""
    h = hashlib.sha256()
    files: list[Path] = []
    for rel in sorted(outputs):
        p = out_dir / rel
        if p.is_dir():
            files.extend(sorted(q for q in p.rglob("*") if q.is_file()))
        else:
            files.append(p)
    for p in files:
        try:
            key = str(p.relative_to(out_dir))
        except ValueError:
            key = str(p)
        h.update(key.encode("utf-8"))
        h.update(b"\x00")
        h.update(p.read_bytes())
        h.update(b"\x00")
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _load_json(path) -> dict:
    payload = json.loads(Path(path).read_text())
    if not isinstance(payload, dict):
        raise FormatError(f"config file {path} must hold a JSON object")
    return payload


def _opt(args, config: dict, key: str, default=None):
    """Flag value if given, else config value, else default."""
    v = getattr(args, key, None)
    if v is not None:
        return v
    return config.get(key, default)


def _require(value, flag: str):
    if value is None:
        raise ValueError(f"{flag} is required (pass the flag or set it in --config)")
    return value


def _section(config: dict, name: str) -> dict:
    sec = config.get(name, {})
    if not isinstance(sec, dict):
        raise FormatError(f"config section {name!r} must be a JSON object")
    return dict(sec)


def _attach_images(records, manifest_path, region_grid) -> None:
    """Load referenced PGM files; paths resolve relative to the manifest."""
    base = Path(manifest_path).resolve().parent
    for rec in records:
        if rec.image is None and rec.image_path:
            pixels = read_pgm(base / rec.image_path)
            rec.image = ImageGrid(pixels, region_grid=tuple(region_grid))


def _out_path(out_dir: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else out_dir / p


def _out_key(path: Path, out_dir: Path) -> str:
    """Relative form for the outputs list when the file sits under out_dir."""
    try:
        return str(path.relative_to(out_dir))
    except ValueError:
        return str(path)


def _write_scores(path, ids, scores) -> None:
    scores = np.asarray(scores, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["study_id", *PATHOLOGIES])
        for sid, row in zip(ids, scores):
            w.writerow([sid, *[repr(float(v)) for v in row]])


def _read_scores(path):
    expected = ["study_id", *PATHOLOGIES]
    ids: list[str] = []
    rows: list[list[float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise FormatError(f"scores file {path} must start with header {expected}")
        for n, line in enumerate(reader, start=2):
            if len(line) != len(expected):
                raise FormatError(f"scores file {path} line {n}: expected "
                                  f"{len(expected)} fields, got {len(line)}")
            ids.append(line[0])
            try:
                rows.append([float(v) for v in line[1:]])
            except ValueError as exc:
                raise FormatError(f"scores file {path} line {n}: {exc}") from exc
    return ids, np.asarray(rows, dtype=np.float64).reshape(len(ids), len(PATHOLOGIES))


def _labeled_matrix(records, uncertain_policy: str):
    for rec in records:
        if rec.labels is None:
            raise ValueError(f"record {rec.study_id!r} carries no labels")
    return labels_to_matrix([r.labels for r in records],
                            uncertain_policy=uncertain_policy)


def _evaluate_scores(ids, scores, label_records, uncertain_policy: str):
    """Per-pathology AUC of scored studies against a labeled manifest."""
    by_id = {r.study_id: r for r in label_records}
    missing = [sid for sid in ids if sid not in by_id]
    if missing:
        raise ConsistencyError(
            f"{len(missing)} scored studies absent from the label manifest, "
            f"first {missing[0]!r}")
    recs = [by_id[sid] for sid in ids]
    y, mask = _labeled_matrix(recs, uncertain_policy)
    per: dict[str, float | None] = {}
    defined: list[float] = []
    for k, name in enumerate(PATHOLOGIES):
        keep = mask[:, k]
        try:
            auc = roc_auc(scores[keep, k], y[keep, k].astype(int)).auc
        except (UndefinedAucError, InsufficientDataError):
            per[name] = None
            continue
        per[name] = auc
        defined.append(auc)
    if defined:
        mean, std = aggregate_auc(defined)
    else:
        mean = std = None
    return per, mean, std


def _lexicon_payload(lex: Lexicon) -> dict:
    return {"mentions": lex.mentions, "negations": list(lex.negations),
            "uncertainties": list(lex.uncertainties)}


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_label(args, config, out_dir: Path) -> RunReport:
    manifest = _require(_opt(args, config, "manifest"), "--manifest")
    records = read_manifest(manifest)
    lex_path = _opt(args, config, "lexicon")
    lexicon = Lexicon.load(lex_path) if lex_path else default_lexicon()
    for rec in records:
        rec.labels = label_report(rec.report_text, lexicon)
    out = _out_path(out_dir, _opt(args, config, "out", "labeled.jsonl"))
    write_manifest(records, out)
    return RunReport(
        command="label",
        config_hash=_digest({"lexicon": _lexicon_payload(lexicon)}),
        outputs=[_out_key(out, out_dir)],
    )


def _parse_sizes(spec: str) -> dict:
    sizes: dict[str, object] = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        name, _, value = part.partition("=")
        if not name or not value:
            raise ValueError(f"--sizes entries look like name=count, got {part!r}")
        sizes[name] = value if value == "rest" else int(value)
    if not sizes:
        raise ValueError("--sizes named no splits")
    return sizes


def _cmd_split(args, config, out_dir: Path) -> RunReport:
    manifest = _require(_opt(args, config, "manifest"), "--manifest")
    records = read_manifest(manifest)
    view = _opt(args, config, "view")
    if view is not None:
        records = [r for r in records if r.view == view]
    require_report = bool(_opt(args, config, "require_report", False))
    if require_report:
        records = filter_with_report(records)
    sizes_raw = _require(_opt(args, config, "sizes"), "--sizes")
    sizes = _parse_sizes(sizes_raw) if isinstance(sizes_raw, str) else dict(sizes_raw)
    seed = int(_opt(args, config, "seed", 0))

    split = make_splits(records, sizes, seed)
    split.save(out_dir / "split.json")
    by_id = {r.study_id: r for r in records}
    outputs = ["split.json"]
    for name in sizes:
        part = [by_id[sid] for sid in split.splits[name]]
        write_manifest(part, out_dir / f"{name}.jsonl")
        outputs.append(f"{name}.jsonl")
    return RunReport(
        command="split", seed=seed, outputs=outputs,
        config_hash=_digest({"sizes": sizes, "seed": seed, "view": view,
                             "require_report": require_report,
                             "source": manifest_hash(records)}),
    )


def _cmd_subset(args, config, out_dir: Path) -> RunReport:
    manifest = _require(_opt(args, config, "manifest"), "--manifest")
    records = read_manifest(manifest)
    cap = int(_require(_opt(args, config, "cap"), "--cap"))
    seed = int(_opt(args, config, "seed", 0))
    subset = build_single_disease_subset(records, cap, seed)
    out = _out_path(out_dir, _opt(args, config, "out", "subset.json"))
    out.write_text(json.dumps(subset, indent=2, sort_keys=True) + "\n")
    return RunReport(
        command="subset", seed=seed, outputs=[_out_key(out, out_dir)],
        config_hash=_digest({"cap": cap, "seed": seed,
                             "source": manifest_hash(records)}),
    )


def _cmd_synth(args, config, out_dir: Path) -> RunReport:
    scfg = SynthConfig(**_section(config, "synth"))
    seed = int(_opt(args, config, "seed", 0))
    train_recs, heldout = synth_paired_dataset(scfg, seed)
    (out_dir / "images").mkdir(exist_ok=True)
    for rec in (*train_recs, *heldout):
        rel = f"images/{rec.study_id}.pgm"
        write_pgm(out_dir / rel, rec.image.pixels)
        rec.image_path = rel
    write_manifest(train_recs, out_dir / "train.jsonl")
    write_manifest(heldout, out_dir / "heldout.jsonl")
    cfg_dict = asdict(scfg)
    cfg_dict["region_grid"] = list(scfg.region_grid)
    return RunReport(
        command="synth", seed=seed,
        outputs=["train.jsonl", "heldout.jsonl", "images"],
        config_hash=_digest({"synth": cfg_dict, "seed": seed}),
    )


def _cmd_train(args, config, out_dir: Path) -> RunReport:
    manifest = _require(_opt(args, config, "manifest"), "--manifest")
    tdict = _section(config, "train")
    if getattr(args, "seed", None) is not None:
        tdict["seed"] = args.seed
    elif "seed" in config:
        tdict.setdefault("seed", config["seed"])
    tcfg = TrainConfig.from_dict(tdict)
    records = read_manifest(manifest)
    records = filter_with_report(records)
    _attach_images(records, manifest, tcfg.region_grid)
    resume_path = _opt(args, config, "resume")
    resume = load_checkpoint(resume_path) if resume_path else None
    ckpt = train(records, tcfg, log_path=out_dir / "train_log.jsonl",
                 resume_from=resume)
    save_checkpoint(ckpt, out_dir / "checkpoint.bin")
    return RunReport(
        command="train", seed=tcfg.seed,
        outputs=["checkpoint.bin", "train_log.jsonl"],
        config_hash=tcfg.hash(),
    )


def _cmd_probe(args, config, out_dir: Path) -> RunReport:
    ckpt = load_checkpoint(_require(_opt(args, config, "checkpoint"), "--checkpoint"))
    manifest = _require(_opt(args, config, "manifest"), "--manifest")
    records = read_manifest(manifest)
    _attach_images(records, manifest, ckpt.config.region_grid)
    pdict = _section(config, "probe")
    policy = _opt(args, config, "uncertain_policy")
    if policy is not None:
        pdict["uncertain_policy"] = policy
    pcfg = ProbeConfig(**pdict)
    for rec in records:
        if rec.labels is None:
            raise ValueError(f"record {rec.study_id!r} carries no labels")
    feats = image_features(records, ckpt)
    model = fit_linear_probe(global_feature_matrix(feats),
                             [r.labels for r in records], pcfg)
    model.save(out_dir / "probe.json")
    outputs = ["probe.json"]

    score_manifest = _opt(args, config, "score_manifest")
    if score_manifest:
        srecs = read_manifest(score_manifest)
        _attach_images(srecs, score_manifest, ckpt.config.region_grid)
        sfeats = image_features(srecs, ckpt)
        probs = probe_predict(model, global_feature_matrix(sfeats))
        _write_scores(out_dir / "probe_scores.csv",
                      [r.study_id for r in srecs], probs)
        outputs.append("probe_scores.csv")
    return RunReport(
        command="probe", outputs=outputs,
        config_hash=_digest({"probe": asdict(pcfg),
                             "checkpoint": ckpt.config_hash}),
    )


def _cmd_zeroshot(args, config, out_dir: Path) -> RunReport:
    ckpt = load_checkpoint(_require(_opt(args, config, "checkpoint"), "--checkpoint"))
    manifest = _require(_opt(args, config, "manifest"), "--manifest")
    records = read_manifest(manifest)
    _attach_images(records, manifest, ckpt.config.region_grid)
    prompts_path = _opt(args, config, "prompts")
    prompts = PromptSet.load(prompts_path) if prompts_path else default_prompts()
    zsec = _section(config, "zeroshot")
    gw = float(zsec.get("global_weight", 0.5))
    lw = float(zsec.get("local_weight", 0.5))
    feats = image_features(records, ckpt)
    scores = zero_shot_scores(feats, prompts, ckpt, global_weight=gw, local_weight=lw)
    _write_scores(out_dir / "zeroshot_scores.csv",
                  [r.study_id for r in records], scores)
    return RunReport(
        command="zeroshot", outputs=["zeroshot_scores.csv"],
        config_hash=_digest({"checkpoint": ckpt.config_hash,
                             "prompts": prompts.prompts,
                             "global_weight": gw, "local_weight": lw}),
    )


def _cmd_eval(args, config, out_dir: Path) -> RunReport:
    scores_path = _require(_opt(args, config, "scores"), "--scores")
    labels_path = _require(_opt(args, config, "labels"), "--labels")
    policy = _opt(args, config, "uncertain_policy", "exclude")
    ids, scores = _read_scores(scores_path)
    label_records = read_manifest(labels_path)
    per, mean, std = _evaluate_scores(ids, scores, label_records, policy)
    return RunReport(
        command="eval", auc=per, auc_mean=mean, auc_std=std,
        config_hash=_digest({"uncertain_policy": policy,
                             "scores": _digest(ids),
                             "labels": manifest_hash(label_records)}),
    )


def _cmd_export_embeddings(args, config, out_dir: Path) -> RunReport:
    ckpt = load_checkpoint(_require(_opt(args, config, "checkpoint"), "--checkpoint"))
    manifest = _require(_opt(args, config, "manifest"), "--manifest")
    records = read_manifest(manifest)
    _attach_images(records, manifest, ckpt.config.region_grid)
    items = {}
    for rec in records:
        if rec.image is not None:
            items[f"{rec.study_id}:image"] = encode_image_toy(rec.image, ckpt.params)
        if rec.report_text.strip():
            seq = encode_report(rec.report_text, ckpt.vocab, ckpt.config)
            items[f"{rec.study_id}:text"] = encode_text_toy(seq, ckpt.params)
    if not items:
        raise InsufficientDataError("no images or reports to export")
    out = _out_path(out_dir, _opt(args, config, "out", "embeddings.bin"))
    save_embeddings(out, items)
    return RunReport(
        command="export-embeddings", outputs=[_out_key(out, out_dir)],
        config_hash=_digest({"checkpoint": ckpt.config_hash,
                             "records": sorted(items)}),
    )


def _cmd_export_roc(args, config, out_dir: Path) -> RunReport:
    scores_path = _require(_opt(args, config, "scores"), "--scores")
    labels_path = _require(_opt(args, config, "labels"), "--labels")
    policy = _opt(args, config, "uncertain_policy", "exclude")
    ids, scores = _read_scores(scores_path)
    label_records = read_manifest(labels_path)
    by_id = {r.study_id: r for r in label_records}
    missing = [sid for sid in ids if sid not in by_id]
    if missing:
        raise ConsistencyError(
            f"{len(missing)} scored studies absent from the label manifest, "
            f"first {missing[0]!r}")
    recs = [by_id[sid] for sid in ids]
    y, mask = _labeled_matrix(recs, policy)
    outputs = []
    for k, name in enumerate(PATHOLOGIES):
        keep = mask[:, k]
        try:
            curve = roc_auc(scores[keep, k], y[keep, k].astype(int))
        except (UndefinedAucError, InsufficientDataError):
            continue
        rel = f"roc_{name.replace(' ', '_')}.csv"
        curve.write_csv(out_dir / rel)
        outputs.append(rel)
    if not outputs:
        raise UndefinedAucError("no pathology had both label classes present")
    return RunReport(
        command="export-roc", outputs=outputs,
        config_hash=_digest({"uncertain_policy": policy, "scores": _digest(ids),
                             "labels": manifest_hash(label_records)}),
    )


_HANDLERS = {
    "label": _cmd_label,
    "split": _cmd_split,
    "subset": _cmd_subset,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "probe": _cmd_probe,
    "zeroshot": _cmd_zeroshot,
    "eval": _cmd_eval,
    "export-embeddings": _cmd_export_embeddings,
    "export-roc": _cmd_export_roc,
}


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors (including unknown flags) exit 1, not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="glre", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    flag_help = {
        "--manifest": "input manifest (JSONL, one study per line)",
        "--lexicon": "phrase lexicon JSON (default: built-in)",
        "--out": "output file name (default depends on the command)",
        "--sizes": "split sizes, e.g. train=2552,test=727 or test=rest",
        "--view": "keep only records with this view",
        "--resume": "checkpoint to continue training from",
        "--checkpoint": "trained checkpoint file",
        "--score-manifest": "extra manifest to score with the fitted probe",
        "--prompts": "prompt set JSON (default: built-in prompts)",
        "--scores": "scores CSV (study_id plus one column per pathology)",
        "--labels": "labeled manifest to evaluate against",
    }

    def add(name: str, help_text: str, *flags: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, help="seed for all randomness")
        p.add_argument("--out-dir", dest="out_dir", help="artifact directory (default .)")
        for flag in flags:
            if flag == "--require-report":
                p.add_argument(flag, dest="require_report", action="store_true",
                               default=None, help="drop records with empty reports")
            elif flag == "--uncertain-policy":
                p.add_argument(flag, dest="uncertain_policy",
                               choices=("exclude", "pos", "neg"),
                               help="how -1 labels enter binary evaluation")
            elif flag == "--cap":
                p.add_argument(flag, type=int, help="per-class study cap")
            else:
                p.add_argument(flag, help=flag_help[flag])
        return p

    add("label", "derive rule-based labels for a manifest",
        "--manifest", "--lexicon", "--out")
    add("split", "seeded disjoint splits of a manifest",
        "--manifest", "--sizes", "--view", "--require-report")
    add("subset", "single-disease study subsets per pathology",
        "--manifest", "--cap", "--out")
    add("synth", "generate the paired synthetic corpus")
    add("train", "contrastive training over a paired manifest",
        "--manifest", "--resume")
    add("probe", "fit a linear probe on frozen global features",
        "--checkpoint", "--manifest", "--score-manifest", "--uncertain-policy")
    add("zeroshot", "prompt-based class scores for images",
        "--checkpoint", "--manifest", "--prompts")
    add("eval", "per-pathology AUC of a scores file against labels",
        "--scores", "--labels", "--uncertain-policy")
    add("export-embeddings", "write image/text embeddings in GLRE1 format",
        "--checkpoint", "--manifest", "--out")
    add("export-roc", "write per-pathology ROC curve CSVs",
        "--scores", "--labels", "--uncertain-policy")
    return parser


def _dispatch(args) -> int:
    config = _load_json(args.config) if args.config else {}
    out_dir = Path(_opt(args, config, "out_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)

    started = time.perf_counter()
    report = _HANDLERS[args.command](args, config, out_dir)
    if report.seed is None and getattr(args, "seed", None) is not None:
        report.seed = args.seed
    report.content_hash = _content_hash(out_dir, report.outputs)
    report.wall_clock_seconds = time.perf_counter() - started

    report_path = out_dir / f"run_report_{args.command.replace('-', '_')}.json"
    report.save(report_path)
    line = f"{args.command}: wrote {report_path}"
    if report.auc_mean is not None:
        line += f" (mean AUC {report.auc_mean:.4f})"
    print(line)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _dispatch(args)
    except (FormatError, VersionError, json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
