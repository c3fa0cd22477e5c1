"""Command-line harness: corpus | pretrain | tune | eval | report (and ``run`` for all).

Every command prints one JSON summary line on success. On failure it prints a
JSON error object on stderr and exits nonzero:

    2  config schema violation / bad flags
    3  missing or corrupt artifact
    4  provenance mismatch (e.g. merging runs built on different corpora)
    5  training diverged
    1  anything else

Artifacts live under ``--out``::

    corpus/                 images, manifest.jsonl, corpus.json, provenance.json
    backbone.ckpt           pretrained weights, no v*
    tuned.ckpt              identical weights section + tuned v* record
    baseline.ckpt           CNN baseline
    *_history.csv           per-epoch losses
    eval/<tag>/             predictions.jsonl, metrics.json, confusion/*.csv|pgm
    report/                 report.csv, report.txt
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .answers import ParsedAnswer, build_question, parse_answer, render_label
from .baseline import baseline_verdicts, load_baseline, predict_proba, save_baseline, train_baseline
from .config import ConfigError, ExperimentConfig, load_config
from .corpus import (
    ALL_FAKES, SEEN_FAKES, UNSEEN_FAKES, CorpusManifest, GeneratorId, build_corpus, load_manifest,
)
from .metrics import (
    confusion_matrices, detection_metrics, subset_report, write_matrix_csv, write_matrix_pgm,
)
from .model import (
    NO_VSTAR, CorruptArtifact, DivergenceError, load_checkpoint, save_checkpoint, split_checkpoint,
    vstar_record,
)
from .pretrain import pretrain_backbone
from .prompt_tuning import TuneTriplet, init_pseudo_embedding, tune

log = logging.getLogger("vqa_forensics")

METHOD_ORDER = ("baseline_cnn", "vlm_plain_question", "vlm_random_prompt", "vlm_soft_prompt")
GEN_CHUNK = 256


class MissingArtifact(FileNotFoundError):
    pass


class ProvenanceMismatch(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def checkpoint_checksums(path: Path) -> dict:
    raw = Path(path).read_bytes()
    if path.suffix == ".ckpt" and raw[:8] == b"VQAFCKPT":
        theta, vrec = split_checkpoint(raw)
        return {"theta": _sha(theta), "vstar": _sha(vrec) if vrec not in (NO_VSTAR, b"") else None}
    return {"theta": _sha(raw), "vstar": None}


def provenance(cfg: ExperimentConfig, checkpoints: dict | None = None) -> dict:
    return {"config_hash": cfg.hash(), "corpus_seed": cfg.corpus.seed,
            "checkpoints": checkpoints or {}}


def provenance_line(prov: dict) -> str:
    parts = [f"config_hash={prov['config_hash']}", f"corpus_seed={prov['corpus_seed']}"]
    for name, sums in sorted(prov.get("checkpoints", {}).items()):
        parts.append(f"{name}.theta={sums['theta']}")
        if sums.get("vstar"):
            parts.append(f"{name}.vstar={sums['vstar']}")
    return " ".join(parts)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found at {path}; run the upstream command first")
    return path


def subsets_for(name: str) -> tuple[GeneratorId, ...]:
    return {"seen": SEEN_FAKES, "unseen": UNSEEN_FAKES, "all": ALL_FAKES}[name]


def open_corpus(cfg: ExperimentConfig) -> CorpusManifest:
    root = Path(cfg.out) / "corpus"
    _require(root / "manifest.jsonl", "corpus manifest")
    try:
        manifest = load_manifest(root)
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptArtifact(f"unreadable corpus at {root}: {exc}") from exc
    if manifest.config != cfg.corpus:
        raise ProvenanceMismatch(f"corpus at {root} was built with a different corpus config "
                                 f"(seed {manifest.seed}, expected {cfg.corpus.seed})")
    return manifest


def _load(manifest: CorpusManifest, records) -> tuple[np.ndarray, list[GeneratorId]]:
    try:
        pixels = manifest.load_pixels(records)
    except (OSError, ValueError) as exc:
        raise CorruptArtifact(f"cannot read corpus images: {exc}") from exc
    return pixels, [r.label for r in records]


def _check_extra(extra: dict, cfg: ExperimentConfig, path: Path, stage: str) -> None:
    if extra.get("corpus_seed") != cfg.corpus.seed:
        raise ProvenanceMismatch(f"{path} was trained on corpus seed {extra.get('corpus_seed')}, "
                                 f"config says {cfg.corpus.seed}")
    if extra.get("stage_hash") != cfg.stage_hash(stage):
        raise ProvenanceMismatch(f"{path} was trained under different {stage} settings "
                                 f"({extra.get('stage_hash')} vs {cfg.stage_hash(stage)})")


def _write_history(path: Path, header: list[str], rows, prov: dict) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {provenance_line(prov)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ------------------------------------------------------------------ commands


def cmd_corpus(cfg: ExperimentConfig) -> dict:
    root = Path(cfg.out) / "corpus"
    manifest = build_corpus(cfg.corpus, root)
    prov = provenance(cfg)
    (root / "provenance.json").write_text(_dump(prov) + "\n")
    return {"command": "corpus", "path": str(root), "records": len(manifest.records),
            "provenance": prov}


def cmd_pretrain(cfg: ExperimentConfig, baseline: bool = False) -> dict:
    manifest = open_corpus(cfg)
    pixels, labels = _load(manifest, manifest.select("train"))
    out = Path(cfg.out)
    extra = {"config_hash": cfg.hash(), "corpus_seed": cfg.corpus.seed,
             "stage_hash": cfg.stage_hash("baseline" if baseline else "pretrain")}
    if baseline:
        params, hist = train_baseline(pixels, labels, cfg.baseline)
        path = out / "baseline.ckpt"
        save_baseline(path, params, cfg.baseline, extra=dict(extra, epoch_loss=hist.epoch_loss))
        prov = provenance(cfg, {"baseline": checkpoint_checksums(path)})
        _write_history(out / "baseline_history.csv", ["epoch", "mean_loss"],
                       [[i + 1, repr(x)] for i, x in enumerate(hist.epoch_loss)], prov)
        return {"command": "pretrain", "baseline": True, "path": str(path),
                "epoch_loss": hist.epoch_loss, "provenance": prov}
    model, hist = pretrain_backbone(pixels, labels, cfg.model, cfg.pretrain, cfg.init_seed)
    path = out / "backbone.ckpt"
    save_checkpoint(path, model, None, extra=dict(extra, initial_loss=hist.initial_loss,
                                                  epoch_loss=hist.epoch_loss))
    prov = provenance(cfg, {"backbone": checkpoint_checksums(path)})
    rows = [[0, repr(hist.initial_loss)]] + [[i + 1, repr(x)] for i, x in enumerate(hist.epoch_loss)]
    _write_history(out / "pretrain_history.csv", ["epoch", "mean_loss"], rows, prov)
    return {"command": "pretrain", "baseline": False, "path": str(path),
            "initial_loss": hist.initial_loss, "epoch_loss": hist.epoch_loss, "provenance": prov}


def cmd_tune(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out)
    src = _require(out / "backbone.ckpt", "backbone checkpoint")
    model, _, extra = load_checkpoint(src)
    _check_extra(extra, cfg, src, "pretrain")
    manifest = open_corpus(cfg)
    pixels, labels = _load(manifest, manifest.select("train"))
    vocab = model.vocab
    q = vocab.tokenize(build_question(True))
    answers = {g: vocab.answer(render_label(g)) for g in set(labels)}
    triplets = [TuneTriplet(px, q, answers[g]) for px, g in zip(pixels, labels)]
    v0 = init_pseudo_embedding(cfg.vstar_seed, cfg.model.d)
    vstar, hist = tune(model, v0, triplets, cfg.tune)
    path = out / "tuned.ckpt"
    # same extra => the weights section stays byte-identical to the backbone's
    save_checkpoint(path, model, vstar, extra=extra)
    prov = provenance(cfg, {"tuned": checkpoint_checksums(path)})
    hist.write_csv(out / "tune_history.csv", provenance=provenance_line(prov))
    return {"command": "tune", "path": str(path), "mean_loss": hist.mean_loss, "provenance": prov}


def method_name(cfg: ExperimentConfig, baseline: bool) -> str:
    if baseline:
        return "baseline_cnn"
    if not cfg.eval.with_pseudo:
        return "vlm_plain_question"
    return "vlm_soft_prompt" if cfg.eval.vstar == "tuned" else "vlm_random_prompt"


def _truth_gen(truth: dict) -> GeneratorId:
    return GeneratorId(truth["model_name"]) if truth["is_fake"] else GeneratorId.REAL


def read_predictions(path: Path) -> tuple[dict, list[dict]]:
    """(header, records) of a predictions JSONL file."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise CorruptArtifact(f"{path} is empty")
    header = json.loads(lines[0])
    if "provenance" not in header:
        raise CorruptArtifact(f"{path} lacks its provenance header line")
    return header, [json.loads(x) for x in lines[1:]]


def cmd_eval(cfg: ExperimentConfig, baseline: bool = False) -> dict:
    out = Path(cfg.out)
    manifest = open_corpus(cfg)
    subsets = subsets_for(cfg.eval.subsets)
    records = {}
    for g in subsets:
        for r in manifest.test_subset(g):
            records[r.id] = r
    records = [records[k] for k in sorted(records)]
    pixels, truth = _load(manifest, records)
    method = method_name(cfg, baseline)

    if baseline:
        path = _require(out / "baseline.ckpt", "baseline checkpoint")
        params, _, extra = load_baseline(path)
        _check_extra(extra, cfg, path, "baseline")
        probs = predict_proba(params, pixels)
        parsed = baseline_verdicts(probs)
        question = None
        generated = [None] * len(records)
        checkpoints = {"baseline": checkpoint_checksums(path)}
    else:
        use_tuned = cfg.eval.with_pseudo and cfg.eval.vstar == "tuned"
        path = _require(out / ("tuned.ckpt" if use_tuned else "backbone.ckpt"),
                        "tuned checkpoint" if use_tuned else "backbone checkpoint")
        model, vstar, extra = load_checkpoint(path)
        _check_extra(extra, cfg, path, "pretrain")
        if use_tuned and vstar is None:
            raise CorruptArtifact(f"{path} carries no v* record")
        if not cfg.eval.with_pseudo:
            vstar = None
        elif cfg.eval.vstar == "random":
            vstar = init_pseudo_embedding(cfg.vstar_seed, cfg.model.d)
        question = build_question(cfg.eval.with_pseudo)
        q = model.vocab.tokenize(question)
        generated = []
        for s in range(0, len(records), GEN_CHUNK):
            generated += model.generate_batch(pixels[s:s + GEN_CHUNK], q, cfg.eval.max_len, vstar)
        parsed = [parse_answer(t) for t in generated]
        probs = None
        sums = checkpoint_checksums(path)
        if vstar is not None and not use_tuned:
            sums["vstar"] = _sha(vstar_record(vstar))  # the random initialization
        checkpoints = {"tuned" if use_tuned else "backbone": sums}

    prov = provenance(cfg, checkpoints)
    tag = f"{method}-{cfg.eval.subsets}"
    edir = out / "eval" / tag
    (edir / "confusion").mkdir(parents=True, exist_ok=True)

    buf = io.StringIO()
    buf.write(_dump({"provenance": prov, "method": method, "subsets": cfg.eval.subsets}) + "\n")
    for i, (r, p, g, t) in enumerate(zip(records, parsed, generated, truth)):
        rec = {"id": r.id, "question": question, "generated": g, "parsed": p.to_json(),
               "truth": ParsedAnswer.truth(t).to_json()}
        if probs is not None:
            rec["score"] = round(float(probs[i]), 12)
        buf.write(_dump(rec) + "\n")
    (edir / "predictions.jsonl").write_text(buf.getvalue())

    if baseline:
        report = _detection_only_report(parsed, truth, subsets)
    else:
        report = subset_report(parsed, truth, generated, subsets)
    line = provenance_line(prov)
    for key, fams in report["confusion"]["per_subset"].items():
        for fam, m in fams.items():
            write_matrix_csv(edir / "confusion" / f"{key}_{fam}.csv", m, provenance=line)
            write_matrix_pgm(edir / "confusion" / f"{key}_{fam}.pgm", m, provenance=line)
    if "model_overall" in report["confusion"]:
        m = report["confusion"]["model_overall"]
        write_matrix_csv(edir / "confusion" / "overall_model.csv", m, provenance=line)
        write_matrix_pgm(edir / "confusion" / "overall_model.pgm", m, provenance=line)

    metrics = {"provenance": prov, "method": method, "tag": tag, "config": cfg.to_dict(),
               "report": report}
    (edir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    avg = report["average"]
    return {"command": "eval", "path": str(edir), "method": method, "subsets": cfg.eval.subsets,
            "average": avg, "provenance": prov}


def _detection_only_report(parsed, truth, subsets) -> dict:
    detection, confusion = {}, {}
    for g in subsets:
        idx = [i for i, t in enumerate(truth) if t in (g, GeneratorId.REAL)]
        p = [parsed[i] for i in idx]
        t = [truth[i] for i in idx]
        det = detection_metrics(p, t)
        detection[g.value] = {"acc": det["acc"], "f1": det["f1"], "n": len(idx)}
        confusion[g.value] = {"binary": confusion_matrices(p, t)["binary"]}
    keys = [g.value for g in subsets]
    return {
        "subsets": keys,
        "detection": detection,
        "average": {"detection": {f: float(np.mean([detection[k][f] for k in keys]))
                                  for f in ("acc", "f1")}},
        "confusion": {"per_subset": confusion},
        "population": {"evaluated": len(truth),
                       "unparseable": sum(1 for p in parsed if p.unparseable)},
    }


# ------------------------------------------------------------------ report


def _load_metrics(path: Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.json"
    _require(path, "metrics report")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptArtifact(f"{path} is not valid JSON: {exc}") from exc


def _pct(x: float) -> str:
    return f"{100 * x:.2f}"


def cmd_report(cfg: ExperimentConfig, runs: list[str]) -> dict:
    metrics = [_load_metrics(Path(r)) for r in runs]
    seeds = {m["provenance"]["corpus_seed"] for m in metrics}
    if len(seeds) > 1:
        raise ProvenanceMismatch(f"refusing to merge runs built on corpus seeds {sorted(seeds)}")
    groups: dict[tuple, list[dict]] = {}
    for m in metrics:
        groups.setdefault(tuple(m["report"]["subsets"]), []).append(m)

    rows = []  # long format: table, subsets, method, subset, metric, value
    text = []
    for subs, ms in groups.items():
        ms = sorted(ms, key=lambda m: METHOD_ORDER.index(m["method"])
                    if m["method"] in METHOD_ORDER else len(METHOD_ORDER))
        cols = list(subs) + ["average"]
        for table, fields in (("detection", ("acc", "f1")),
                              ("attribution", ("acc", "f1")),
                              ("rouge", ("rouge2", "rougeL"))):
            src = "detection" if table == "detection" else "attribution"
            present = [m for m in ms if src in m["report"]]
            if not present:
                continue
            title = {"detection": "Detection ACC / F1 (%)",
                     "attribution": "Attribution ACC / F1 (%)",
                     "rouge": "Attribution ROUGE-2 / ROUGE-L (%)"}[table]
            text.append(f"{title} on subsets: {', '.join(subs)}")
            width = max(len(c) for c in cols + ["method"]) + 2
            text.append("method".ljust(22) + "".join(c.rjust(max(width, 16)) for c in cols))
            for m in present:
                rep = m["report"]
                cells = []
                for c in cols:
                    vals = rep["average"][src] if c == "average" else rep[src][c]
                    cells.append(" / ".join(_pct(vals[f]) for f in fields))
                    for f in fields:
                        rows.append([table, "+".join(subs), m["method"], c, f, repr(float(vals[f]))])
                text.append(m["method"].ljust(22) + "".join(x.rjust(max(width, 16)) for x in cells))
            text.append("")

    rdir = Path(cfg.out) / "report"
    rdir.mkdir(parents=True, exist_ok=True)
    prov_lines = [provenance_line(m["provenance"]) + f" method={m['method']}" for m in metrics]
    with open(rdir / "report.csv", "w", newline="") as fh:
        for line in prov_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["table", "subsets", "method", "subset", "metric", "value"])
        w.writerows(rows)
    header = "".join(f"# {line}\n" for line in prov_lines)
    (rdir / "report.txt").write_text(header + "\n" + "\n".join(text))
    return {"command": "report", "path": str(rdir), "runs": len(metrics),
            "corpus_seed": seeds.pop() if seeds else None}


# ------------------------------------------------------------------ pipeline


def run_pipeline(cfg: ExperimentConfig) -> dict:
    """Corpus, pretrain, tune, baseline, the standard evaluations and the report."""
    summary = {"corpus": cmd_corpus(cfg), "pretrain": cmd_pretrain(cfg),
               "tune": cmd_tune(cfg), "baseline": cmd_pretrain(cfg, baseline=True)}
    evals = []
    for subsets, with_pseudo, vstar, baseline in (
            ("seen", True, "tuned", False), ("unseen", True, "tuned", False),
            ("seen", True, "random", False), ("unseen", True, "random", False),
            ("seen", False, "tuned", False),
            ("seen", True, "tuned", True), ("unseen", True, "tuned", True)):
        cfg.eval.subsets, cfg.eval.with_pseudo, cfg.eval.vstar = subsets, with_pseudo, vstar
        evals.append(cmd_eval(cfg, baseline=baseline))
    summary["eval"] = evals
    summary["report"] = cmd_report(cfg, [e["path"] for e in evals])
    return summary


# ------------------------------------------------------------------ argparse


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {s!r}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="root seed; every stage seed derives from it")
    common.add_argument("--out", help="output directory for all artifacts")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set tune.lr=0.01 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="vqa-forensics",
                description="Synthetic-image detection and attribution as visual question answering.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("corpus", parents=[common], help="synthesize the image corpus")
    pre = sub.add_parser("pretrain", parents=[common], help="pretrain the backbone (or the baseline)")
    pre.add_argument("--baseline", action="store_true", help="train the CNN baseline instead")
    sub.add_parser("tune", parents=[common], help="tune the pseudo-word embedding")
    ev = sub.add_parser("eval", parents=[common], help="generate, parse and score answers")
    ev.add_argument("--subsets", choices=("seen", "unseen", "all"))
    ev.add_argument("--with-pseudo", type=_bool, metavar="{true,false}",
                    help="ask the question with the pseudo-word")
    ev.add_argument("--vstar", choices=("tuned", "random"),
                    help="tuned v* or its random initialization")
    ev.add_argument("--baseline", action="store_true", help="evaluate the CNN baseline")
    rep = sub.add_parser("report", parents=[common], help="merge eval runs into comparison tables")
    rep.add_argument("runs", nargs="+", help="eval directories or metrics.json files")
    sub.add_parser("run", parents=[common], help="the whole pipeline end to end")
    return p


def config_from_args(args) -> ExperimentConfig:
    overrides = []
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides.append((k.strip(), v.strip()))
    if args.seed is not None:
        overrides.append(("seed", args.seed))
    if args.out is not None:
        overrides.append(("out", args.out))
    for flag, key in (("subsets", "eval.subsets"), ("with_pseudo", "eval.with_pseudo"),
                      ("vstar", "eval.vstar")):
        if getattr(args, flag, None) is not None:
            overrides.append((key, getattr(args, flag)))
    return load_config(args.config, overrides)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, (MissingArtifact, CorruptArtifact)):
        return 3
    if isinstance(exc, ProvenanceMismatch):
        return 4
    if isinstance(exc, DivergenceError):
        return 5
    return 1


def main(argv: list[str] | None = None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        cfg = config_from_args(args)
        if command == "corpus":
            result = cmd_corpus(cfg)
        elif command == "pretrain":
            result = cmd_pretrain(cfg, baseline=args.baseline)
        elif command == "tune":
            result = cmd_tune(cfg)
        elif command == "eval":
            result = cmd_eval(cfg, baseline=args.baseline)
        elif command == "report":
            result = cmd_report(cfg, args.runs)
        else:
            result = run_pipeline(cfg)
    except Exception as exc:  # every failure becomes a JSON error object
        err = {"status": "error", "command": command, "kind": type(exc).__name__,
               "message": str(exc), "exit_code": _exit_code(exc)}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return err["exit_code"]
    print(json.dumps(dict(result, status="ok"), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
