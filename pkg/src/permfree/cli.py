"""Command-line entry point: ``permfree <subcommand> ...``.

Exit codes: 0 ok, 1 usage, 2 config, 3 data, 4 numeric failure.  Failures
print one ``error category=<name> message=<text>`` line on stderr.
"""

import os

# Single-threaded BLAS is the reference mode for bit-reproducible runs.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from contextlib import contextmanager  # noqa: E402
from pathlib import Path  # noqa: E402

from . import __version__  # noqa: E402
from . import autodiff as ad  # noqa: E402
from .config import ConfigError, build_config, load_config  # noqa: E402
from .ctc import AlignmentInfeasible  # noqa: E402
from .decode import decode_mixture, dump_hidden, evaluate  # noqa: E402
from .layers import load_checkpoint, save_checkpoint  # noqa: E402
from .mixture import load_examples, write_corpus  # noqa: E402
from .model import ModelConfig  # noqa: E402
from .trainer import Example, TrainData, filter_feasible, train  # noqa: E402

log = logging.getLogger("permfree")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
MANIFEST_NAME = "run_manifest.json"
LOCK_NAME = ".permfree.lock"
SPLIT_FILES = ("train_single", "dev_single", "train_mixed", "dev_mixed")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Run artifacts
# ---------------------------------------------------------------------------


def git_blob_hash(data):
    """SHA-1 of ``b"blob <len>\\0" + data``, as ``git hash-object`` computes it."""
    return hashlib.sha1(b"blob %d\x00" % len(data) + data).hexdigest()


def hash_inputs(paths):
    """Per-file blob hashes plus one combined hash over the sorted entries."""
    entries = {}
    for p in paths:
        entries[str(p)] = git_blob_hash(Path(p).read_bytes())
    combined = hashlib.sha1("".join(f"{k}\x00{v}\n" for k, v in sorted(entries.items())).encode()).hexdigest()
    return {"files": entries, "combined": combined}


def write_run_manifest(out_dir, subcommand, cfg, seed, inputs, extra=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "permfree",
        "version": __version__,
        "subcommand": subcommand,
        "seed": seed,
        "config": cfg.to_dict() if cfg is not None else None,
        "inputs": hash_inputs(inputs),
        "extra": extra or {},
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


@contextmanager
def run_lock(run_dir):
    """Exclusive lockfile in ``run_dir``; a second writer fails immediately."""
    d = Path(run_dir)
    d.mkdir(parents=True, exist_ok=True)
    path = d / LOCK_NAME
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"run directory {d} is locked by another process ({path})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        path.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# Data helpers
# ---------------------------------------------------------------------------


def _manifest_inputs(manifest):
    base = Path(manifest).parent
    files = [Path(manifest)]
    with open(manifest) as fh:
        for line in fh:
            if line.strip():
                fp = Path(json.loads(line)["features"])
                files.append(fp if fp.is_absolute() else base / fp)
    return files


def _load(manifest, vocab):
    try:
        return [Example(f, refs, rec["id"]) for f, refs, rec in load_examples(manifest, vocab)]
    except FileNotFoundError as e:
        raise DataError(f"missing file: {e.filename}") from e
    except (KeyError, json.JSONDecodeError) as e:
        raise DataError(f"malformed manifest {manifest}: {e}") from e
    except ValueError as e:
        raise DataError(str(e)) from e


def load_train_data(cfg):
    d = Path(cfg.data.dir)
    vocab = cfg.model_config().vocab
    sets = {}
    for name in SPLIT_FILES:
        p = d / f"{name}.jsonl"
        if not p.is_file():
            raise DataError(f"manifest {p} not found (run gen-data first)")
        sets[name] = _load(p, vocab)
    return TrainData(sets["train_single"], sets["dev_single"], sets["train_mixed"], sets["dev_mixed"])


def _load_model(path):
    try:
        store, header = load_checkpoint(path)
    except FileNotFoundError as e:
        raise DataError(f"checkpoint {path} not found") from e
    except ValueError as e:
        raise DataError(str(e)) from e
    return store, ModelConfig.from_dict(header["config"])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    cfg = load_config(args.config)
    d = cfg.data
    for flag, key in (("seed", "seed"), ("n_reuse", "n_reuse"), ("snr_min", "snr_min"), ("snr_max", "snr_max")):
        v = getattr(args, flag)
        if v is not None:
            setattr(d, key, v)
    if args.out_dir is not None:
        d.dir = args.out_dir
    cfg = build_config(cfg.to_dict(), environ={})
    paths = write_corpus(cfg.corpus_spec(), cfg.data.dir)
    inputs = []
    for split in paths.values():
        inputs += [split["single"], split["mixed"]]
    fallbacks = {k: v["fallbacks"] for k, v in paths.items()}
    write_run_manifest(cfg.data.dir, "gen-data", cfg, cfg.data.seed, inputs, {"fallbacks": fallbacks})
    for k, v in paths.items():
        print(json.dumps({"split": k, "single": str(v["single"]), "mixed": str(v["mixed"]),
                          "fallbacks": v["fallbacks"]}))
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config, check_paths=True)
    schedule = cfg.schedule()
    model_cfg = cfg.model_config()
    data = load_train_data(cfg)
    sub = model_cfg.encoder.subsample_factor
    for name, xs in zip(SPLIT_FILES, (data.train_single, data.dev_single, data.train_mixed, data.dev_mixed)):
        if not xs:
            raise DataError(f"{name} is empty")
        if name.startswith("train") and not filter_feasible(xs, sub):
            raise DataError(f"{name}: every example is infeasible for CTC at subsampling {sub}")
    if args.dry_run:
        print(json.dumps({
            "ok": True,
            "examples": {n: len(x) for n, x in zip(SPLIT_FILES, (data.train_single, data.dev_single,
                                                                   data.train_mixed, data.dev_mixed))},
            "stages": [s.name for s in schedule.stages],
        }))
        return EXIT_OK
    if args.run_dir is None:
        raise UsageError("train needs --run-dir (or --dry-run)")
    inputs = []
    for name in SPLIT_FILES:
        inputs += _manifest_inputs(Path(cfg.data.dir) / f"{name}.jsonl")
    with run_lock(args.run_dir):
        write_run_manifest(args.run_dir, "train", cfg, schedule.seed, inputs)
        result = train(schedule, data, model_cfg, out_dir=args.run_dir)
        if schedule.stages:
            save_checkpoint(Path(args.run_dir) / "model.ckpt", result.store, result.cfg.to_dict(), {"final": True})
    print(json.dumps(result.metrics[-1] if result.metrics else {}, sort_keys=True))
    return EXIT_OK


def _decode_cfg(args, cfg):
    d = cfg.decode
    for flag in ("beam", "gamma", "max_len"):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(d, flag, v)
    return cfg.decode_config()


def cmd_decode(args):
    cfg = load_config(args.config)
    dcfg = _decode_cfg(args, cfg)
    store, mcfg = _load_model(args.checkpoint)
    examples = _load(args.manifest, mcfg.vocab)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for ex in examples:
            for u, h in enumerate(decode_mixture(store, mcfg, ex.features, dcfg)):
                if h.warning:
                    log.warning("%s output %d: %s", ex.id, u, h.warning)
                rec = {"id": ex.id, "output_index": u, "hypothesis": mcfg.vocab.decode(h.labels),
                       "att_score": h.att, "ctc_score": h.ctc, "combined": h.score}
                out.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    if args.out:
        write_run_manifest(Path(args.out).parent, "decode", cfg, None,
                           [args.checkpoint] + _manifest_inputs(args.manifest))
    return EXIT_OK


def cmd_eval(args):
    cfg = load_config(args.config)
    dcfg = _decode_cfg(args, cfg)
    store, mcfg = _load_model(args.checkpoint)
    examples = _load(args.manifest, mcfg.vocab)
    total, rows = evaluate(store, mcfg, [(e.features, e.refs) for e in examples], dcfg)
    report = {
        "corpus": total.as_dict(),
        "utterances": [dict(id=e.id, hypotheses=[mcfg.vocab.decode(h.labels) for h in hyps], **rep.as_dict())
                       for e, (hyps, rep) in zip(examples, rows)],
    }
    table = total.table(args.label)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "score_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        (out / "score_table.txt").write_text(table)
        write_run_manifest(out, "eval", cfg, None, [args.checkpoint] + _manifest_inputs(args.manifest))
    sys.stdout.write(table)
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradchecks import CHECKS, run_all

    names = args.only or list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise UsageError(f"unknown checks: {', '.join(unknown)}")
    results = run_all(args.seed, args.threshold, names)
    for name, (err, ok) in results.items():
        print(f"{'PASS' if ok else 'FAIL'} {name} rel_err={err:.3e}")
    if not all(ok for _, ok in results.values()):
        raise NumericFailure("gradient check above threshold: "
                             + ",".join(n for n, (_, ok) in results.items() if not ok))
    return EXIT_OK


def cmd_dump_hidden(args):
    store, mcfg = _load_model(args.checkpoint)
    examples = _load(args.manifest, mcfg.vocab)
    if args.id is not None:
        examples = [e for e in examples if e.id == args.id]
        if not examples:
            raise DataError(f"no example with id {args.id} in {args.manifest}")
    ex = examples[0]
    written = dump_hidden(store, mcfg, ex.features, args.out_dir, prefix=ex.id)
    for note in written["notes"]:
        log.warning(note)
    write_run_manifest(args.out_dir, "dump-hidden", None, None, [args.checkpoint] + _manifest_inputs(args.manifest),
                       {"id": ex.id})
    print(json.dumps({"raw": [str(p) for p in written["raw"]], "pca": [str(p) for p in written["pca"]],
                      "eigenvalues": written.get("eigenvalues")}))
    return EXIT_OK


def build_parser():
    p = _Parser(prog="permfree", description="Permutation-free multi-speaker recognition toolkit.")
    p.add_argument("--version", action="version", version=f"permfree {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render the synthetic corpus")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-reuse", type=int)
    g.add_argument("--snr-min", type=float)
    g.add_argument("--snr-max", type=float)
    g.add_argument("--out-dir")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the staged training schedule")
    t.add_argument("--config")
    t.add_argument("--run-dir")
    t.add_argument("--dry-run", action="store_true", help="validate config and data only")
    t.set_defaults(func=cmd_train)

    for name, func, hlp in (("decode", cmd_decode, "decode a manifest to JSON lines"),
                            ("eval", cmd_eval, "decode and score a manifest")):
        d = sub.add_parser(name, help=hlp)
        d.add_argument("--config")
        d.add_argument("--checkpoint", required=True)
        d.add_argument("--manifest", required=True)
        d.add_argument("--beam", type=int)
        d.add_argument("--gamma", type=float)
        d.add_argument("--max-len", type=int)
        if name == "decode":
            d.add_argument("--out", help="output file (default stdout)")
        else:
            d.add_argument("--out-dir")
            d.add_argument("--label", default="model")
        d.set_defaults(func=func)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--threshold", type=float, default=1e-4)
    c.add_argument("--only", nargs="*")
    c.set_defaults(func=cmd_gradcheck)

    h = sub.add_parser("dump-hidden", help="export G^u and a PCA projection as CSV")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--manifest", required=True)
    h.add_argument("--id")
    h.add_argument("--out-dir", required=True)
    h.set_defaults(func=cmd_dump_hidden)
    return p


def _fail(category, message, code):
    one_line = " ".join(str(message).split())
    print(f"error category={category} message={one_line}", file=sys.stderr)
    return code


def run_subcommand(argv=None):
    """Parse ``argv`` and run one subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        if not getattr(args, "func", None):
            raise UsageError("a subcommand is required")
        return args.func(args)
    except UsageError as e:
        return _fail("usage", e, EXIT_USAGE)
    except ConfigError as e:
        for problem in e.problems:
            log.error("config: %s", problem)
        return _fail("config", " | ".join(e.problems), EXIT_CONFIG)
    except (DataError, AlignmentInfeasible) as e:
        return _fail("data", e, EXIT_DATA)
    except (NumericFailure, ad.NumericError, FloatingPointError) as e:
        return _fail("numeric", e, EXIT_NUMERIC)


def main():
    sys.exit(run_subcommand())


if __name__ == "__main__":
    main()
