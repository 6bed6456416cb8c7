"""Command line entry point.

Exit status is 0 on success, 1 when an operation fails and 2 for usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .adapter import AdapterConfig, ExternalDetector, external_scan
from .corpus import (SYNTHETIC_MARKER_FILE, Corpus, CorpusError, Split, generate_synthetic_corpus,
                     ingest, label_vector, read_manifest, sample, split, write_manifest)
from .detectors import ConstantDetector, Detector, DetectorError, FunctionDetector, NGramDetector
from .mutations import MAX_CHAIN_STEPS, POOL_VERSION, MutationError
from .ngram import (FORMAT_VERSION, DegenerateCorpus, ModelFormatError, TrainParams, feature_matrix,
                    save_model, train)
from .occlusion import (DEFAULT_BETA, ByteSource, OcclusionConfig, OcclusionError, TieBreak,
                        occlude_region, occlusion_search, undirected_occlusion_window)
from .pe import Label, PeError, RawBinary
from .protocol import (REPORT_FORMAT_VERSION, ConfusionCounts, ExternalCommand, Ledger,
                       ProtocolError, baseline_records, compute_metrics, derive_seed, emit_report,
                       render_packing_table, run_benign_mod_experiment,
                       run_external_mutator_experiment, run_occlusion_experiment,
                       run_packing_experiment)

log = logging.getLogger("subterfuge")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

BANNER = """\
!!! This corpus is not marked synthetic and may contain live malware. !!!
Files are only read and rewritten, never executed, but outputs of mutation,
occlusion and packing runs are still malicious. Re-run with
--i-understand-live-malware to proceed."""

# failures that end a command with status 1
RUNTIME_ERRORS = (CorpusError, ProtocolError, DetectorError, MutationError, OcclusionError,
                  PeError, ModelFormatError, DegenerateCorpus, OSError)


class UsageError(Exception):
    pass


class ConfigError(UsageError):
    def __init__(self, section: str, key: str, message: str):
        super().__init__(f"[{section}] {key}: {message}")


# ------------------------------------------------------------------ helpers


def is_synthetic(path) -> bool:
    p = Path(path).resolve()
    base = p if p.is_dir() else p.parent
    return any((d / SYNTHETIC_MARKER_FILE).exists() for d in (base, base.parent))


def gate(path, args) -> None:
    if is_synthetic(path) or getattr(args, "i_understand_live_malware", False):
        return
    print(BANNER, file=sys.stderr)
    raise UsageError(f"{path}: refusing to touch a non-synthetic corpus without the safety flag")


def load_corpus(path) -> Corpus:
    return ingest(path)


def parse_detector(spec: str, index: int = 0, scan_timeout: float = 30.0) -> Detector:
    """``[id=]kind:arg`` with kind model, adapter, constant or marker."""
    ident, eq, rest = spec.partition("=")
    if not eq or ":" in ident:
        ident, rest = "", spec
    kind, colon, arg = rest.partition(":")
    if not colon or not arg:
        raise UsageError(f"bad detector spec {spec!r}; expected [id=]kind:arg")
    threshold = 0.5
    if kind == "model":
        if not Path(arg).is_file():
            raise UsageError(f"model file not found: {arg}")
        return NGramDetector.from_path(arg, id=ident or "ngram", threshold=threshold)
    if kind == "adapter":
        cfg = AdapterConfig(arg, scan_timeout=scan_timeout)
        return ExternalDetector(cfg, id=ident or f"adapter{index}", threshold=threshold)
    if kind == "constant":
        return ConstantDetector(float(arg), id=ident or "constant")
    if kind == "marker":
        marker = bytes.fromhex(arg)
        return FunctionDetector(lambda d, m=marker: 1.0 if m in bytes(d) else 0.0,
                                id=ident or "marker")
    raise UsageError(f"unknown detector kind {kind!r} in {spec!r}")


def detectors_from_args(args) -> List[Detector]:
    specs = list(args.detector or [])
    if getattr(args, "model", None):
        specs.insert(0, f"ngram=model:{args.model}")
    if getattr(args, "adapter", None):
        specs.append(f"adapter=adapter:{args.adapter}")
    if not specs:
        raise UsageError("give at least one detector (--model, --adapter or --detector)")
    dets = [parse_detector(s, i, getattr(args, "scan_timeout", 30.0)) for i, s in enumerate(specs)]
    ids = [d.id for d in dets]
    if len(set(ids)) != len(ids):
        raise UsageError(f"detector ids must be unique: {ids}")
    return dets


def close_all(dets: Sequence[Detector]) -> None:
    for d in dets:
        d.close()


def add_detector_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="n-gram model file")
    p.add_argument("--adapter", help="adapter command line")
    p.add_argument("--detector", action="append", metavar="[ID=]KIND:ARG",
                   help="model:PATH, adapter:CMD, constant:SCORE or marker:HEX (repeatable)")
    p.add_argument("--scan-timeout", type=float, default=30.0)


def add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--i-understand-live-malware", action="store_true",
                   help="allow corpora that are not marked synthetic")


# ------------------------------------------------------------------- corpus


def cmd_corpus(args) -> int:
    if args.action == "synth":
        out = Path(args.out)
        c = generate_synthetic_corpus(args.n, args.seed, out)
        print(f"wrote {len(c)} files to {out}")
        print(f"manifest {out / 'manifest.csv'}")
        print(f"digest {c.digest}")
        return EXIT_OK
    c = load_corpus(args.source) if args.action != "ingest" else ingest(args.source, args.on_conflict)
    if args.action == "ingest":
        result = c
    elif args.action == "sample":
        label = Label.parse(args.label) if args.label else None
        result = sample(c, args.n, args.seed, label)
    else:
        tr, te = split(c, args.test_fraction, args.seed)
        result = Corpus(tr.entries + te.entries, c.synthetic)
    out = Path(args.out)
    write_manifest(result, out)
    if result.synthetic and out.parent.resolve() != Path(args.source).resolve().parent:
        (out.parent / SYNTHETIC_MARKER_FILE).write_text("derived from a synthetic corpus\n")
    counts = result.counts()
    print(f"{len(result)} files ({counts['benign']} benign, {counts['malicious']} malicious)")
    print(f"digest {result.digest}")
    return EXIT_OK


# -------------------------------------------------------------------- train


def cmd_train(args) -> int:
    c = load_corpus(args.manifest)
    test = c.where(split=Split.TEST)
    if len(test):
        tr = c.where(split=Split.TRAIN)
    else:
        tr, test = split(c, args.test_fraction, args.seed)
    params = TrainParams(n=args.n, num_buckets=args.buckets, epochs=args.epochs,
                         learning_rate=args.learning_rate, l2=args.l2,
                         batch_size=args.batch_size, seed=args.seed)
    t0 = time.perf_counter()
    model = train([tr.load(e).data for e in tr], label_vector(tr), params)
    elapsed = time.perf_counter() - t0
    save_model(model, args.out)
    summary = {"params": asdict(params),
               "corpus_digest": c.digest, "train_files": len(tr), "test_files": len(test)}
    if len(test):
        X = feature_matrix([test.load(e).data for e in test], params.n, params.num_buckets)
        pred = (X @ model.weights + model.bias) >= 0.0
        truth = label_vector(test).astype(bool)
        counts = ConfusionCounts(tp=int((pred & truth).sum()), fp=int((pred & ~truth).sum()),
                                 tn=int((~pred & ~truth).sum()), fn=int((~pred & truth).sum()))
        m = compute_metrics(counts, allow_empty_class=True)
        summary["held_out"] = {"tp": counts.tp, "fp": counts.fp, "tn": counts.tn, "fn": counts.fn,
                               "accuracy_pct": round(m.accuracy_pct, 6)}
        print(f"held-out accuracy {m.accuracy_pct:.2f}% on {len(test)} files")
    summary_path = Path(str(args.out) + ".summary.json")
    summary_path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"trained in {elapsed:.1f}s; model {args.out}; summary {summary_path}")
    return EXIT_OK


# --------------------------------------------------------------------- scan


def _targets(target) -> List[RawBinary]:
    p = Path(target)
    if p.is_file() and p.suffix.lower() == ".csv":
        c = read_manifest(p)
        if not len(c):
            raise CorpusError(f"{p}: manifest lists no files")
        return c.binaries()
    if p.is_dir():
        c = ingest(p)
        if not len(c):
            raise CorpusError(f"{p}: no files")
        return c.binaries()
    return [RawBinary.from_path(p)]


def cmd_scan(args) -> int:
    gate(args.target, args)
    dets = detectors_from_args(args)
    if len(dets) != 1:
        raise UsageError("scan takes exactly one detector")
    det = dets[0]
    status = EXIT_OK
    try:
        for b in _targets(args.target):
            try:
                if isinstance(det, ExternalDetector) and b.origin:
                    r = external_scan(det, b.origin)
                else:
                    r = det.scan(b.data)
            except DetectorError as exc:
                print(f"{b.sha256},ERROR,{type(exc).__name__}: {exc}")
                status = EXIT_FAIL
                continue
            print(f"{b.sha256},{r.score!r},{r.decision.value}")
    finally:
        close_all(dets)
    return status


# -------------------------------------------------------------------- evade


def _meta(args, corpus: Corpus, dets, **extra) -> dict:
    return {"run_id": hashlib.sha256(json.dumps(
                {"cmd": args.command, "seed": args.seed, "digest": corpus.digest,
                 "detectors": [d.id for d in dets], **extra}, sort_keys=True).encode()).hexdigest()[:16],
            "seed": args.seed, "corpus_digest": corpus.digest,
            "detectors": [d.id for d in dets], **extra}


def cmd_evade(args) -> int:
    gate(args.manifest, args)
    c = load_corpus(args.manifest)
    benign = c.where(Label.BENIGN)
    if len(benign):
        raise ProtocolError(f"evade takes malicious files only; {len(benign)} benign file(s) given")
    if args.n:
        c = sample(c, args.n, args.seed)
    dets = detectors_from_args(args)
    try:
        curves, records = run_benign_mod_experiment(c, dets, args.max_steps, args.seed, args.workers)
    finally:
        close_all(dets)
    led = Ledger(_meta(args, c, dets, max_steps=args.max_steps))
    led.extend(records)
    emit_report(led, args.out)
    for d, cv in curves.items():
        print(f"{d}: already_fn={cv.already_fn} evaded={cv.evaded} survived={cv.survived} "
              f"errors={cv.errors} curve={list(cv.evaded_by)}")
    print(f"report in {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ occlude


def cmd_occlude(args) -> int:
    gate(args.target, args)
    binaries = _targets(args.target)
    mode = args.mode
    det = None
    if mode != "undirected":
        dets = detectors_from_args(args)
        if len(dets) != 1:
            raise UsageError("occlude searches against exactly one detector")
        det = dets[0]
    pool = None
    if mode == "targeted_adversarial":
        if not args.benign_pool:
            raise UsageError("--mode targeted_adversarial needs --benign-pool")
        pc = load_corpus(args.benign_pool).where(Label.BENIGN)
        pool = ByteSource.benign(pc.binaries(), args.seed)
    status = EXIT_OK
    try:
        for b in binaries:
            s = derive_seed(args.seed, "occlusion", mode, b.sha256)
            rec = {"sha256": b.sha256, "mode": mode, "size": len(b.data)}
            if mode == "undirected":
                data, lo, hi = undirected_occlusion_window(b.data, args.beta, s)
                rec.update(start=lo, end=hi, calls=0)
            else:
                source = ByteSource.random(s) if pool is None else ByteSource(pool.kind, s, pool.pool)
                cfg = OcclusionConfig(args.beta, TieBreak(args.tie_break), source)
                base = det.scan(b.data)
                out = occlusion_search(b.data, det, cfg, baseline_score=base.score)
                data = occlude_region(b.data, out.start, out.end, source, index=2 * len(out.trace))
                after = det.scan(data)
                rec.update(start=out.start, end=out.end, calls=out.calls,
                           baseline_score=base.score, occluded_score=after.score,
                           evaded=base.malicious and not after.malicious,
                           source_fallback=out.source_fallback)
            if args.write and len(binaries) == 1:
                Path(args.write).write_bytes(data)
                rec["written"] = str(args.write)
            elif args.out_dir:
                Path(args.out_dir).mkdir(parents=True, exist_ok=True)
                path = Path(args.out_dir) / f"{b.sha256}.occl.{mode}.bin"
                path.write_bytes(data)
                rec["written"] = str(path)
            print(json.dumps(rec, sort_keys=True))
    finally:
        if det is not None:
            det.close()
    return status


# ----------------------------------------------------------------- packeval


def cmd_packeval(args) -> int:
    gate(args.manifest, args)
    c = load_corpus(args.manifest)
    try:
        pack = ExternalCommand(args.pack_cmd, args.timeout)
    except ValueError as exc:
        raise UsageError(f"--pack-cmd: {exc}") from None
    pack.check_available()
    dets = detectors_from_args(args)
    try:
        rows, failed, records = run_packing_experiment(c, dets, pack, args.workers)
    finally:
        close_all(dets)
    print(render_packing_table(rows))
    print(f"files that failed to pack: {failed}")
    if args.out:
        led = Ledger(_meta(args, c, dets, pack_cmd=list(pack.template)))
        led.extend(records)
        emit_report(led, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------- run


TECHNIQUES = ("benign_mod", "occlusion", "packing", "mutator")


@dataclass
class DetectorSpec:
    id: str
    model: Optional[str] = None
    command: Optional[str] = None
    constant: Optional[float] = None
    marker: Optional[str] = None
    threshold: float = 0.5
    scan_timeout: float = 30.0

    def build(self) -> Detector:
        if self.model:
            return NGramDetector.from_path(self.model, id=self.id, threshold=self.threshold)
        if self.command:
            return ExternalDetector(AdapterConfig(self.command, scan_timeout=self.scan_timeout),
                                    id=self.id, threshold=self.threshold)
        if self.marker:
            m = bytes.fromhex(self.marker)
            return FunctionDetector(lambda d: 1.0 if m in bytes(d) else 0.0, self.id, self.threshold)
        return ConstantDetector(self.constant, self.id, self.threshold)


@dataclass
class RunConfig:
    corpus: str
    seed: int
    output: str
    workers: int = 1
    split: Optional[str] = None
    live_malware_ok: bool = False
    detectors: List[DetectorSpec] = field(default_factory=list)
    techniques: Dict[str, Dict[str, str]] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"corpus": self.corpus, "seed": self.seed, "split": self.split,
                "detectors": [vars(d) for d in self.detectors], "techniques": self.techniques}


def _get(sec, section, key, conv, required=False, default=None, check=None, why=""):
    if key not in sec:
        if required:
            raise ConfigError(section, key, "missing")
        return default
    raw = sec[key].strip()
    try:
        value = conv(raw)
    except ValueError:
        raise ConfigError(section, key, f"cannot read {raw!r} as {conv.__name__}") from None
    if check is not None and not check(value):
        raise ConfigError(section, key, why or f"invalid value {raw!r}")
    return value


def _bool(raw: str) -> bool:
    v = raw.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


_bool.__name__ = "bool"


def load_run_config(path) -> RunConfig:
    """Read and validate a run file; every problem names its section and key."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    if "run" not in cp:
        raise ConfigError("run", "*", "section missing")
    base = Path(path).resolve().parent
    resolve = lambda p: str(p if Path(p).is_absolute() else base / p)
    run = cp["run"]
    known = {"corpus", "seed", "output", "workers", "split", "live_malware_ok"}
    for key in run:
        if key not in known:
            raise ConfigError("run", key, "unknown key")
    corpus = _get(run, "run", "corpus", resolve, required=True,
                  check=lambda p: Path(p).exists(), why="path does not exist")
    cfg = RunConfig(
        corpus=corpus,
        seed=_get(run, "run", "seed", int, required=True, check=lambda s: s >= 0,
                  why="must be a non-negative integer"),
        output=_get(run, "run", "output", resolve, default=str(base / "run-output")),
        workers=_get(run, "run", "workers", int, default=1, check=lambda w: w >= 1, why="must be >= 1"),
        split=_get(run, "run", "split", str.lower, check=lambda s: s in ("train", "test"),
                   why="must be train or test"),
        live_malware_ok=_get(run, "run", "live_malware_ok", _bool, default=False),
    )
    for name in cp.sections():
        kind, _, ident = name.partition(" ")
        sec = cp[name]
        if name == "run":
            continue
        if kind == "detector":
            if not ident:
                raise ConfigError(name, "*", "detector sections are named [detector <id>]")
            spec = DetectorSpec(
                ident,
                model=_get(sec, name, "model", resolve, check=lambda p: Path(p).is_file(),
                           why="model file does not exist"),
                command=_get(sec, name, "command", str),
                constant=_get(sec, name, "constant", float, check=lambda v: 0 <= v <= 1,
                              why="must lie in [0, 1]"),
                marker=_get(sec, name, "marker", str, check=_is_hex, why="must be hex bytes"),
                threshold=_get(sec, name, "threshold", float, default=0.5,
                               check=lambda v: 0 <= v <= 1, why="must lie in [0, 1]"),
                scan_timeout=_get(sec, name, "scan_timeout", float, default=30.0,
                                  check=lambda v: v > 0, why="must be positive"),
            )
            given = [k for k in ("model", "command", "constant", "marker") if getattr(spec, k) is not None]
            if len(given) != 1:
                raise ConfigError(name, "model|command|constant|marker", "set exactly one")
            cfg.detectors.append(spec)
        elif kind == "technique":
            if ident not in TECHNIQUES:
                raise ConfigError(name, "*", f"unknown technique; choose from {', '.join(TECHNIQUES)}")
            cfg.techniques[ident] = dict(sec)
        else:
            raise ConfigError(name, "*", "unknown section")
    if not cfg.detectors:
        raise ConfigError("detector <id>", "*", "at least one detector section is required")
    ids = [d.id for d in cfg.detectors]
    t = cfg.techniques
    if "benign_mod" in t:
        s = "technique benign_mod"
        _get(t["benign_mod"], s, "max_steps", int, check=lambda v: v >= 1, why="must be >= 1")
        _get(t["benign_mod"], s, "n", int, check=lambda v: v >= 1, why="must be >= 1")
    if "occlusion" in t:
        s, sec = "technique occlusion", t["occlusion"]
        _get(sec, s, "search_detector", str, required=True, check=lambda v: v in ids,
             why=f"must name one of the detectors {ids}")
        _get(sec, s, "beta", int, check=lambda v: v >= 1, why="must be >= 1")
        _get(sec, s, "tie_break", str, check=lambda v: v in ("left", "right"), why="must be left or right")
        if "benign_pool" in sec:
            sec["benign_pool"] = _get(sec, s, "benign_pool", resolve, check=lambda p: Path(p).exists(),
                                      why="path does not exist")
    for tech in ("packing", "mutator"):
        if tech in t:
            s = f"technique {tech}"
            try:
                ExternalCommand(_get(t[tech], s, "command", str, required=True),
                                _get(t[tech], s, "timeout", float, default=120.0))
            except ValueError as exc:
                raise ConfigError(s, "command", str(exc)) from None
    return cfg


def _is_hex(v: str) -> bool:
    try:
        return len(bytes.fromhex(v)) > 0
    except ValueError:
        return False


def execute_run(cfg: RunConfig) -> Path:
    c = load_corpus(cfg.corpus)
    if cfg.split:
        c = c.where(split=Split(cfg.split))
    if not len(c):
        raise CorpusError("the configured corpus has no files")
    dets = [d.build() for d in cfg.detectors]
    t = cfg.techniques
    max_steps = int(t.get("benign_mod", {}).get("max_steps", MAX_CHAIN_STEPS))
    run_id = hashlib.sha256(json.dumps(cfg.as_dict(), sort_keys=True).encode()).hexdigest()[:16]
    led = Ledger({"run_id": run_id, "seed": cfg.seed, "corpus_digest": c.digest,
                  "detectors": [d.id for d in dets], "max_steps": max_steps,
                  "config": {"techniques": t, "split": cfg.split}})
    try:
        binaries = c.binaries()
        led.extend(baseline_records(binaries, dets, cfg.workers))
        malicious = c.where(Label.MALICIOUS)
        if "benign_mod" in t:
            n = t["benign_mod"].get("n")
            subset = sample(malicious, int(n), cfg.seed) if n else malicious
            _, recs = run_benign_mod_experiment(subset, dets, max_steps, cfg.seed, cfg.workers)
            led.extend(recs)
        if "occlusion" in t:
            sec = t["occlusion"]
            search = next(d for d in dets if d.id == sec["search_detector"])
            occ = OcclusionConfig(int(sec.get("beta", DEFAULT_BETA)), TieBreak(sec.get("tie_break", "left")))
            pool = None
            if sec.get("benign_pool"):
                pool = ByteSource.benign(load_corpus(sec["benign_pool"]).where(Label.BENIGN).binaries())
            _, recs = run_occlusion_experiment(malicious, search, dets, occ, cfg.seed, pool, cfg.workers)
            led.extend(recs)
        if "packing" in t:
            cmd = ExternalCommand(t["packing"]["command"], float(t["packing"].get("timeout", 120)))
            _, _, recs = run_packing_experiment(c, dets, cmd, cfg.workers)
            led.extend(recs)
        if "mutator" in t:
            cmd = ExternalCommand(t["mutator"]["command"], float(t["mutator"].get("timeout", 120)))
            _, _, recs = run_external_mutator_experiment(c.where(Label.BENIGN), dets, cmd, cfg.workers)
            led.extend(recs)
    finally:
        close_all(dets)
    emit_report(led, cfg.output)
    return Path(cfg.output)


def cmd_run(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    if args.out is not None:
        cfg.output = args.out
    if args.i_understand_live_malware:
        cfg.live_malware_ok = True
    if not cfg.live_malware_ok and not is_synthetic(cfg.corpus):
        print(BANNER, file=sys.stderr)
        raise UsageError(f"{cfg.corpus}: corpus is not marked synthetic")
    out = execute_run(cfg)
    print(f"report in {out}")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="subterfuge",
                                 description="Measure how static malware detectors hold up under evasion.")
    ap.add_argument("--version", action="version",
                    version=f"subterfuge {__version__} (model format {FORMAT_VERSION}, "
                            f"report format {REPORT_FORMAT_VERSION}, mutation pool {POOL_VERSION})")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus", help="build, sample, split or synthesize corpora")
    csub = p.add_subparsers(dest="action", required=True)
    q = csub.add_parser("ingest", help="hash benign/ and malicious/ under ROOT into a manifest")
    q.add_argument("source", metavar="ROOT")
    q.add_argument("--out", required=True)
    q.add_argument("--on-conflict", choices=["raise", "exclude"], default="raise")
    q = csub.add_parser("sample", help="uniform sample without replacement")
    q.add_argument("source", metavar="MANIFEST")
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--label", choices=["benign", "malicious"])
    q.add_argument("--out", required=True)
    q = csub.add_parser("split", help="stratified train/test split")
    q.add_argument("source", metavar="MANIFEST")
    q.add_argument("--test-fraction", type=float, default=0.2)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q = csub.add_parser("synth", help="write a synthetic marker corpus")
    q.add_argument("--n", type=int, required=True, help="files per class")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", default="synthetic-corpus")
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("train", help="train the byte n-gram model")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.2,
                   help="held-out share when the manifest has no test split")
    d = TrainParams()
    p.add_argument("--n", type=int, default=d.n)
    p.add_argument("--buckets", type=int, default=d.num_buckets)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--learning-rate", type=float, default=d.learning_rate)
    p.add_argument("--l2", type=float, default=d.l2)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("scan", help="score a file, directory or manifest")
    p.add_argument("target")
    add_detector_args(p)
    p.add_argument("--i-understand-live-malware", action="store_true")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("evade", help="random benign-modification chains")
    p.add_argument("manifest")
    add_detector_args(p)
    add_run_args(p)
    p.add_argument("--max-steps", type=int, default=MAX_CHAIN_STEPS)
    p.add_argument("--n", type=int, help="sample this many files first")
    p.add_argument("--out", default="evade-report")
    p.set_defaults(func=cmd_evade)

    p = sub.add_parser("occlude", help="occlusion search and attack")
    p.add_argument("target")
    add_detector_args(p)
    add_run_args(p)
    p.add_argument("--beta", type=int, default=DEFAULT_BETA)
    p.add_argument("--mode", choices=["targeted_random", "targeted_adversarial", "undirected"],
                   default="targeted_random")
    p.add_argument("--tie-break", choices=["left", "right"], default="left")
    p.add_argument("--benign-pool", help="manifest or corpus root for adversarial bytes")
    p.add_argument("--write", help="write the occluded file here (single target)")
    p.add_argument("--out-dir", help="write <sha256>.occl.<mode>.bin files here")
    p.set_defaults(func=cmd_occlude)

    p = sub.add_parser("packeval", help="detection before and after an external packer")
    p.add_argument("manifest")
    add_detector_args(p)
    add_run_args(p)
    p.add_argument("--pack-cmd", required=True, help='argv template, e.g. "upx -q -o {out} {in}"')
    p.add_argument("--timeout", type=float, default=120.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_packeval)

    p = sub.add_parser("run", help="full evaluation from a config file")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    p.add_argument("--i-understand-live-malware", action="store_true")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RUNTIME_ERRORS + (ValueError,)) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
