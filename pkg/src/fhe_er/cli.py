"""Command-line interface: keys, policy, enrollment, matching, benchmarks and evaluation.

Every command prints one JSON document on stdout and a short summary on
stderr.  A workspace directory holds ``params.json``, ``keys.bin``,
``policy.json`` (plus its encrypted threshold) and the three stores.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import __version__, he
from .compare import CompareConfig, ConfigError, DomainError
from .evaluate import SCHEMA_VERSION, run_experiment
from .fusion import BiographicRecord, ScoreNorm, hashed_ngram_features, tokenize_record
from .matcher import (ConflictError, FusionMode, MatchPolicy, PolicyError, Stores, StoreError,
                      batch_match, build_policy, enroll, identify, verify_1n, write_timing_csv)
from .synth import PopulationSpec, generate_population, identity_name, import_csv

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_PARAMS = 3
EXIT_CONFLICT = 4
EXIT_STORE = 5
EXIT_DEPTH = 6
EXIT_POLICY = 7
EXIT_INPUT = 8
EXIT_SELF_CHECK = 9
EXIT_EXISTS = 10

EXIT_CODES = """exit codes:
  0   command ran (decisions are reported in the output, not the exit code)
  1   unexpected internal error
  2   bad command-line usage
  3   invalid encryption parameters
  4   entity id already enrolled
  5   store, key or file format error (missing files, parameter mismatch)
  6   not enough multiplicative depth for the requested computation
  7   policy error (missing, or threshold too close to a score cluster)
  8   invalid input data (dimensions, values, records)
  9   a self-check exceeded its error bound
  10  output exists; pass --force to overwrite
"""

SELF_CHECK_BOUND = 2.0 ** -19
KEYGEN_CHECK_BOUND = 2.0 ** -20


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


@dataclasses.dataclass
class WorkspaceConfig:
    workspace: str = "."
    keys: str | None = None
    stores: str | None = None
    policy: str | None = None
    params: str | None = None
    ring_degree: int = 2 ** 13
    levels: int = he.DEFAULT_LEVELS
    threads: int = 1
    seed: int = 0

    def path(self, name: str) -> str:
        explicit = getattr(self, name)
        if explicit:
            return explicit
        default = {"keys": "keys.bin", "stores": "stores", "policy": "policy.json",
                   "params": "params.json"}[name]
        return os.path.join(self.workspace, default)


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    fields = {f.name: f.type for f in dataclasses.fields(WorkspaceConfig)}
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{n}: expected key=value", EXIT_USAGE)
            k, v = (s.strip() for s in line.split("=", 1))
            k = k.replace("-", "_")
            if k not in fields:
                raise CliError(f"{path}:{n}: unknown key {k!r}", EXIT_USAGE)
            out[k] = int(v) if k in ("ring_degree", "levels", "threads", "seed") else v
    return out


def _config(args) -> WorkspaceConfig:
    cfg = read_config(args.config) if args.config else {}
    for f in dataclasses.fields(WorkspaceConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            cfg[f.name] = v
    return WorkspaceConfig(**cfg)


def _emit(obj, summary: str):
    obj = {"schema_version": SCHEMA_VERSION, **obj}
    json.dump(obj, sys.stdout, indent=1, default=_json_default)
    sys.stdout.write("\n")
    print(summary, file=sys.stderr)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


# ---------------------------------------------------------------------------
# loaders


def _load_params(cfg: WorkspaceConfig) -> he.HeParams:
    path = cfg.path("params")
    if not os.path.exists(path):
        raise CliError(f"no parameters at {path}; run keygen first", EXIT_STORE)
    with open(path) as fh:
        return he.HeParams.from_dict(json.load(fh))


def _load_keys(cfg: WorkspaceConfig) -> he.KeySet:
    params = _load_params(cfg)
    path = cfg.path("keys")
    if not os.path.exists(path):
        raise CliError(f"no keys at {path}; run keygen first", EXIT_STORE)
    with open(path, "rb") as fh:
        return he.load_keyset(fh.read(), params)


def _load_policy(cfg: WorkspaceConfig, params: he.HeParams) -> MatchPolicy:
    path = cfg.path("policy")
    if not os.path.exists(path):
        raise CliError(f"no policy at {path}; run policy first", EXIT_POLICY)
    return MatchPolicy.load(path, params)


def read_vector(path) -> np.ndarray:
    """Floats separated by commas, whitespace or newlines."""
    with open(path) as fh:
        text = fh.read().replace(",", " ").split()
    try:
        v = np.array([float(t) for t in text])
    except ValueError as e:
        raise CliError(f"{path}: {e}", EXIT_INPUT) from None
    if v.size == 0 or not np.all(np.isfinite(v)):
        raise CliError(f"{path}: expected a nonempty vector of finite numbers", EXIT_INPUT)
    return v


def read_record(path) -> BiographicRecord:
    """One ``attribute=value`` pair per line, in order."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "=" not in line:
                raise CliError(f"{path}:{n}: expected attribute=value", EXIT_INPUT)
            a, v = line.split("=", 1)
            pairs.append((a.strip(), v.strip()))
    try:
        return BiographicRecord(tuple(pairs))
    except ValueError as e:
        raise CliError(f"{path}: {e}", EXIT_INPUT) from None


def _query(args, policy: MatchPolicy) -> tuple[np.ndarray, np.ndarray]:
    bm = read_vector(args.bm_file)
    if args.bg_record:
        bg = hashed_ngram_features(tokenize_record(read_record(args.bg_record)), policy.dims[1])
    else:
        bg = read_vector(args.bg_file)
    if bm.size != policy.dims[0] or bg.size != policy.dims[1]:
        raise CliError(f"template dimensions {bm.size}/{bg.size} do not match the policy's "
                       f"{policy.dims[0]}/{policy.dims[1]}", EXIT_INPUT)
    return bm, bg


def _writable(path, force: bool):
    if os.path.exists(path) and not force:
        raise CliError(f"{path} exists; pass --force to overwrite", EXIT_EXISTS)


# ---------------------------------------------------------------------------
# commands


def cmd_keygen(args, cfg: WorkspaceConfig):
    params = he.make_params(cfg.ring_degree, cfg.levels)
    os.makedirs(cfg.workspace, exist_ok=True)
    kpath, ppath = cfg.path("keys"), cfg.path("params")
    for p in (kpath, ppath):
        _writable(p, args.force)
    keys = he.keygen(params, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    x = rng.uniform(-1, 1, params.slots)
    err = float(np.max(np.abs(he.decrypt(he.encrypt(x, keys.public(), rng=rng), keys) - x)))
    for path, data, mode in ((ppath, json.dumps(params.to_dict(), indent=1), "w"),
                             (kpath, he.dump_keyset(keys), "wb")):
        tmp = path + ".tmp"
        with open(tmp, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    out = {"params_digest": params.digest.hex(), "ring_degree": params.ring_degree,
           "levels": params.levels, "keys": kpath, "params": ppath,
           "self_test_max_error": err, "self_test_passed": err < KEYGEN_CHECK_BOUND}
    _emit(out, f"keys written to {kpath} (digest {params.digest.hex()[:16]}, "
               f"roundtrip error {err:.3g})")
    return EXIT_OK if err < KEYGEN_CHECK_BOUND else EXIT_SELF_CHECK


def cmd_policy(args, cfg: WorkspaceConfig):
    keys = _load_keys(cfg)
    path = cfg.path("policy")
    _writable(path, args.force)
    if args.train_csv:
        train = import_csv(args.train_csv)
    else:
        train = generate_population(PopulationSpec(n_identities=args.n_identities,
                                                   seed=cfg.seed))
    cc = CompareConfig(margin=args.margin) if args.margin else CompareConfig()
    policy = build_policy(train.bm, train.bg, train.identity, FusionMode(args.mode), keys,
                          compare_config=cc, score_norm=ScoreNorm(args.score_norm),
                          threshold=args.threshold, train_record=train.record,
                          rng=np.random.default_rng([cfg.seed, 3]))
    policy.save(path)
    _emit({"policy": path, **policy.to_dict()},
          f"{args.mode} policy written to {path} (threshold {policy.threshold:.4f})")
    return EXIT_OK


def cmd_enroll(args, cfg: WorkspaceConfig):
    keys = _load_keys(cfg)
    policy = _load_policy(cfg, keys.params)
    bm, bg = _query(args, policy)
    root = cfg.path("stores")
    stores = Stores.open(root, keys.params)
    rng = np.random.default_rng() if args.seed is None else np.random.default_rng(args.seed)
    enroll(args.id, bm, bg, policy, keys, stores, rng=rng)
    stores.save(root)
    out = {"id": args.id, "stores": root, "enrolled": len(stores)}
    if args.self_check:
        nbm, nbg = policy.normalize(bm, bg)
        want = (nbm, nbg, np.concatenate([nbm, nbg]))
        err = max(float(np.max(np.abs(he.decrypt(s.ciphertext(args.id, keys.params), keys,
                                                 n=w.size) - w)))
                  for s, w in zip(stores.all(), want))
        out.update(self_check_max_error=err, self_check_passed=err < SELF_CHECK_BOUND)
    _emit(out, f"enrolled {args.id} ({len(stores)} ids in {root})")
    if args.self_check and not out["self_check_passed"]:
        return EXIT_SELF_CHECK
    return EXIT_OK


def cmd_list(args, cfg: WorkspaceConfig):
    root = cfg.path("stores")
    out = {}
    for m in ("biometric", "biographic", "fused"):
        mpath = os.path.join(root, m, "manifest.json")
        if os.path.exists(mpath):
            with open(mpath) as fh:
                out[m] = json.load(fh)["ids"]
        else:
            out[m] = []
    _emit({"stores": root, "ids": out}, f"{len(out['biometric'])} ids enrolled")
    return EXIT_OK


def cmd_verify(args, cfg: WorkspaceConfig):
    keys = _load_keys(cfg)
    policy = _load_policy(cfg, keys.params)
    bm, bg = _query(args, policy)
    stores = Stores.open(cfg.path("stores"), keys.params)
    decisions = verify_1n(bm, bg, policy, keys, stores, seed=args.seed)
    acc = [d.entity_id for d in decisions if d.accept]
    _emit({"threshold": policy.threshold, "decisions": [d.to_dict() for d in decisions]},
          f"{len(acc)} of {len(decisions)} entries accepted" + (f": {', '.join(acc[:10])}"
                                                                if acc else ""))
    return EXIT_OK


def cmd_identify(args, cfg: WorkspaceConfig):
    keys = _load_keys(cfg)
    policy = _load_policy(cfg, keys.params)
    bm, bg = _query(args, policy)
    stores = Stores.open(cfg.path("stores"), keys.params)
    if len(stores) == 0:
        _emit({"ranked": []}, "gallery is empty")
        return EXIT_OK
    k = min(args.k, len(stores))
    ranked = identify(bm, bg, policy, keys, stores, k, seed=args.seed)
    _emit({"k": k, "ranked": ranked}, f"rank 1: {ranked[0]}")
    return EXIT_OK


def _thread_list(text: str) -> list[int]:
    try:
        ts = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CliError(f"bad thread list {text!r}", EXIT_USAGE) from None
    if not ts or min(ts) < 1:
        raise CliError("thread counts must be positive integers", EXIT_USAGE)
    return ts


def cmd_bench(args, cfg: WorkspaceConfig):
    threads = _thread_list(args.thread_list)
    keys = _load_keys(cfg)
    spec = PopulationSpec(n_identities=max(args.gallery, 2), records_per_identity=(2, 2),
                          seed=cfg.seed)
    pop = generate_population(spec)
    gal, prb = pop.gallery_probe_split()
    train = generate_population(spec.with_seed(cfg.seed + 1))
    policy = build_policy(train.bm, train.bg, train.identity, FusionMode(args.mode), keys,
                          train_record=train.record, rng=np.random.default_rng([cfg.seed, 4]))
    stores = Stores.empty(keys.params)
    rng = np.random.default_rng([cfg.seed, 5])
    for i in range(args.gallery):
        enroll(identity_name(gal.identity[i]), gal.bm[i], gal.bg[i], policy, keys, stores, rng=rng)
    queries = [(prb.bm[i % len(prb)], prb.bg[i % len(prb)]) for i in range(args.queries)]
    # warm the packed-gallery cache so every run measures matching only
    batch_match(queries[:1], policy, keys, stores, 1, seed=cfg.seed, unit_size=args.unit_size)
    reports, ref, identical = [], None, True
    for t in threads:
        dec, rep = batch_match(queries, policy, keys, stores, t, seed=cfg.seed,
                               unit_size=args.unit_size)
        bits = [[d.accept for d in row] for row in dec]
        ref = bits if ref is None else ref
        identical &= bits == ref
        reports.append(rep)
        print(f"threads={t}: {rep.elapsed_ms:.0f} ms, {rep.pairs_per_sec:.1f} pairs/s",
              file=sys.stderr)
    if args.csv:
        write_timing_csv(reports, args.csv)
    base = reports[0].elapsed_ms
    rows = [{**r.row(), "speedup": base / r.elapsed_ms if r.elapsed_ms else None,
             "latency_ms": r.latency_summary()} for r in reports]
    _emit({"mode": args.mode, "queries": args.queries, "gallery": args.gallery,
           "cpu_count": os.cpu_count(), "decisions_identical": identical, "runs": rows},
          f"benchmark done; decisions identical across thread counts: {identical}")
    return EXIT_OK


def cmd_eval(args, cfg: WorkspaceConfig):
    if args.spec != "default":
        raise CliError(f"unknown spec {args.spec!r}", EXIT_USAGE)
    spec = PopulationSpec(n_identities=args.n_identities, seed=cfg.seed)
    keys = _load_keys(cfg) if args.encrypted else None
    t0 = time.perf_counter()
    exp = run_experiment(spec, keys=keys, encrypted=args.encrypted, max_probes=args.max_probes,
                         thread_count=cfg.threads, seed=cfg.seed)
    if args.out:
        exp.save(args.out)
    out = exp.to_dict()
    out["elapsed_s"] = time.perf_counter() - t0
    lines = [f"{r.name:28s} EER {100 * r.eer:6.2f}%" for r in exp.reports.values()]
    _emit(out, "\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_query_args(p, with_id: bool = False):
    if with_id:
        p.add_argument("--id", required=True, help="entity id (letters, digits, '_', '.', '-')")
    p.add_argument("--bm-file", required=True, help="biometric template: floats separated by "
                                                    "commas or whitespace")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--bg-file", help="biographic template vector, same format as --bm-file")
    g.add_argument("--bg-record", help="biographic record, one attribute=value per line; mapped "
                                       "to a vector by hashed character n-grams")
    p.add_argument("--store-dir", dest="stores", help="store root (default WORKSPACE/stores)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file with workspace settings")
    common.add_argument("--workspace", "-w", help="workspace directory (default .)")
    common.add_argument("--keys", help="key file (default WORKSPACE/keys.bin)")
    common.add_argument("--policy", help="policy file (default WORKSPACE/policy.json)")

    ap = argparse.ArgumentParser(
        prog="fhe-er", description="Encrypted multimodal entity resolution.",
        epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--version", action="version",
                    version=f"%(prog)s {__version__} (output schema {SCHEMA_VERSION})")
    sub = ap.add_subparsers(dest="command", required=True)
    kw = {"parents": [common], "epilog": EXIT_CODES,
          "formatter_class": argparse.RawDescriptionHelpFormatter}

    p = sub.add_parser("keygen", help="generate parameters and keys", **kw)
    p.add_argument("--ring-degree", type=int, help="ring degree N (default 8192)")
    p.add_argument("--levels", type=int, help=f"rescaling levels (default {he.DEFAULT_LEVELS})")
    p.add_argument("--seed", type=int, help="key generation seed")
    p.add_argument("--out", dest="workspace", help="output directory (same as --workspace)")
    p.add_argument("--force", action="store_true", help="overwrite existing key files")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("policy", help="fit normalization and the threshold on training data",
                       **kw)
    p.add_argument("--mode", choices=[m.value for m in FusionMode], default="score_level")
    p.add_argument("--train-csv", help="training population CSV (default: synthetic)")
    p.add_argument("--n-identities", type=int, default=100, help="synthetic training size")
    p.add_argument("--score-norm", choices=[s.value for s in ScoreNorm], default="distance")
    p.add_argument("--threshold", type=float, help="fixed threshold instead of the EER point")
    p.add_argument("--margin", type=float, help="comparator margin (default 2^-5)")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true", help="overwrite an existing policy")
    p.set_defaults(func=cmd_policy)

    p = sub.add_parser("enroll", help="encrypt and store one entity", **kw)
    _add_query_args(p, with_id=True)
    p.add_argument("--seed", type=int, help="encryption randomness seed (default: fresh)")
    p.add_argument("--self-check", action="store_true",
                   help="decrypt the new entries and report the roundtrip error")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("list", help="list enrolled ids", **kw)
    p.add_argument("--store-dir", dest="stores")
    p.set_defaults(func=cmd_list)

    p = sub.add_parser("verify", help="1:N encrypted threshold decisions for a query", **kw)
    _add_query_args(p)
    p.add_argument("--seed", type=int, help="query encryption seed (default: fresh)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("identify", help="rank the gallery for a query", **kw)
    _add_query_args(p)
    p.add_argument("-k", type=int, default=5, help="ranks to report")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("bench", help="time batch matching across thread counts", **kw)
    p.add_argument("--threads", dest="thread_list", default="1,2,4,8",
                   help="comma-separated thread counts")
    p.add_argument("--queries", type=int, default=64)
    p.add_argument("--gallery", type=int, default=64)
    p.add_argument("--mode", choices=[m.value for m in FusionMode], default="score_level")
    p.add_argument("--unit-size", type=int, default=16,
                   help="(query, packed gallery) pairs per work unit")
    p.add_argument("--csv", help="write the timing CSV here")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="run every arm on a synthetic population", **kw)
    p.add_argument("--spec", default="default", help="population spec (only 'default')")
    p.add_argument("--n-identities", type=int, default=100)
    p.add_argument("--encrypted", action="store_true", help="also run the encrypted arms")
    p.add_argument("--max-probes", type=int, help="cap the number of probe records")
    p.add_argument("--threads", type=int, help="worker threads for the encrypted arms")
    p.add_argument("--out", help="directory for report.json and curve CSVs")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args, _config(args))
    except CliError as e:
        code, msg = e.code, str(e)
    except he.ParameterError as e:
        code, msg = EXIT_PARAMS, f"parameter error: {e}"
    except ConflictError as e:
        code, msg = EXIT_CONFLICT, f"conflict: {e}"
    except (StoreError, he.FormatError, he.IncompatibleError, he.MissingKeyError) as e:
        code, msg = EXIT_STORE, f"store error: {e}"
    except he.DepthError as e:
        code, msg = EXIT_DEPTH, f"depth error: {e}"
    except (PolicyError, ConfigError) as e:
        code, msg = EXIT_POLICY, f"policy error: {e}"
    except (ValueError, DomainError, he.EncodingError) as e:
        code, msg = EXIT_INPUT, f"input error: {e}"
    except FileNotFoundError as e:
        code, msg = EXIT_STORE, f"missing file: {e}"
    print(f"fhe-er: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
