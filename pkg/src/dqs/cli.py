"""``dqs`` command line: dataset generation, training, ranking, pruning and sensing.

Every command writes ``<out>.manifest.json`` recording its configuration,
seed and the sha256 of each artifact it produced.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import DatasetError, ToolboxConfig, generate, read_jsonl, write_jsonl
from .golden import GHZ4_TEXT, check_case, golden_cases
from .graph import encode_setup
from .optics import SetupError, format_setup, parse_setup, postselect, run_setup
from .pipeline import PipelineConfig, PipelineError, pipeline_end_to_end
from .search import prune_setup, rank_candidates, validate
from .sensing import HAMILTONIANS, OBSERVABLES, hamiltonian, observable, qfi_pure, run_sensing, \
    simulated_channel
from .surrogate import SurrogateModel, TrainConfig, evaluate, new_model, predict, train

log = logging.getLogger("dqs")


class ValidationFailure(Exception):
    """Raised when a command ran but its checks did not pass (exit 1)."""


# ---------------------------------------------------------------- helpers

def _sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "parser")}


def config_hash(args) -> str:
    return hashlib.sha256(json.dumps(_config(args), sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(args, artifacts: list[str], extra: dict | None = None) -> Path:
    base = Path(args.out or f"dqs-{args.command}")
    path = base.with_name(base.name + ".manifest.json")
    manifest = {
        "command": args.command, "version": __version__, "seed": args.seed,
        "threads": args.threads, "config": _config(args), "config_hash": config_hash(args),
        "artifacts": {str(p): _sha256(p) for p in artifacts},
    }
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=1, default=str) + "\n")
    return path


def _write_text(path, text: str) -> str:
    Path(path).write_text(text)
    return str(path)


def _read_setup(path: str, q: int) -> "OpticalSetup":  # noqa: F821
    return parse_setup(Path(path).read_text(), q=q)


def _need(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        args.parser.error(f"missing required option(s): {', '.join(missing)}")


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    _need(args, "photons", "count", "out")
    tb = ToolboxConfig(args.photons, args.q, l_min=args.lmin, l_max=args.lmax)
    records, stats = generate(tb, args.count, args.seed, args.h, label=not args.unlabeled,
                              dedup=not args.no_dedup, threads=args.threads)
    write_jsonl(args.out, records)
    write_manifest(args, [args.out], {"stats": stats})
    log.info("wrote %d records to %s", len(records), args.out)
    return 0


def cmd_train(args) -> int:
    _need(args, "data", "out")
    records = read_jsonl(args.data)
    if any(r.qfi is None for r in records):
        raise ValidationFailure(f"{args.data} contains unlabeled records")
    val = read_jsonl(args.val) if args.val else None
    n, q = records[0].setup.n_photons, records[0].setup.q
    model = new_model(n, q, args.latent, args.layers, args.heads, seed=args.seed)
    cfg = TrainConfig(lr=args.lr, weight_decay=args.wd, epochs=args.epochs, batch_size=args.batch,
                      seed=args.seed, val_fraction=args.val_fraction,
                      decoupled_decay=args.decoupled, schedule=args.schedule,
                      augment_paths=args.augment_paths)
    progress = lambda s: log.info("epoch %d train_mse %.6f val_mse %s val_spearman %s", s.epoch,
                                  s.train_mse, s.val_mse, s.val_spearman)
    model, history = train(model, records, cfg, val, progress=progress)
    model.save(args.out)
    hist = f"{args.out}.history.csv"
    with open(hist, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mse", "val_mse", "val_spearman"])
        for h in history:
            w.writerow([h.epoch, h.train_mse, h.val_mse, h.val_spearman])
    write_manifest(args, [args.out, hist])
    return 0


def cmd_eval(args) -> int:
    _need(args, "model", "data")
    result = evaluate(SurrogateModel.load(args.model), read_jsonl(args.data))
    text = json.dumps(result, indent=1)
    print(text)
    if args.out:
        write_manifest(args, [_write_text(args.out, text + "\n")])
    return 0


def cmd_rank(args) -> int:
    _need(args, "model", "data", "out")
    pool = read_jsonl(args.data)
    ranked = rank_candidates(SurrogateModel.load(args.model), pool, min(args.k, len(pool)))
    if args.validate:
        ranked = validate(ranked, hamiltonian(args.h, pool[0].setup.n_photons))
    _write_text(args.out, ranked.to_csv())
    extra = {"pool_size": ranked.pool_size, "duplicates": ranked.duplicates,
             "regret": ranked.regret}
    write_manifest(args, [args.out], extra)
    sys.stdout.write(ranked.to_csv())
    return 0


def cmd_prune(args) -> int:
    _need(args, "setup")
    setup = _read_setup(args.setup, args.q)
    H = hamiltonian(args.h, setup.n_photons)
    pruned = prune_setup(setup, H, args.trials, np.random.default_rng(args.seed))
    text = format_setup(pruned)
    print(text)
    if args.out:
        write_manifest(args, [_write_text(args.out, text + "\n")],
                       {"length_before": len(setup.sequence), "length_after": len(pruned.sequence)})
    return 0


def cmd_sense(args) -> int:
    _need(args, "setup")
    setup = _read_setup(args.setup, args.q)
    probe = postselect(run_setup(setup))
    if probe.success_prob <= 0:
        raise ValidationFailure("setup never yields one photon per path")
    n = setup.n_photons
    # the estimator only ever sees the query handle
    channel = simulated_channel(probe, hamiltonian(args.h, n), observable(args.obs, n))
    report = run_sensing(channel, n, args.degree, args.shots, args.seed, args.grid)
    out = Path(args.out or "sense")
    payload = report.to_dict()
    payload["config_hash"] = config_hash(args)
    js = _write_text(out.with_name(out.name + ".json"), json.dumps(payload, indent=1) + "\n")
    cs = _write_text(out.with_name(out.name + ".csv"), report.to_csv())
    write_manifest(args, [js, cs])
    print(f"min sensitivity {report.min_sensitivity!r}  SQL {report.sql!r}  HL {report.hl!r}")
    return 0


def cmd_export_latent(args) -> int:
    _need(args, "model", "data", "out")
    model = SurrogateModel.load(args.model)
    records = read_jsonl(args.data)
    pred, z = predict(model, [encode_setup(r.setup) for r in records])
    scale = records[0].setup.n_photons ** 2 if records else 1
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "qfi_true", "qfi_pred"] + [f"z{i + 1}" for i in range(z.shape[1])])
        for r, p, row in zip(records, pred, z):
            w.writerow([r.id, "" if r.qfi is None else r.qfi, p * scale] + list(row))
    write_manifest(args, [args.out])
    return 0


def cmd_golden(args) -> int:
    results = [check_case(c) for c in golden_cases()]
    ghz = postselect(run_setup(parse_setup(GHZ4_TEXT)))
    ghz_qfi = qfi_pure(ghz, hamiltonian("sumZ", 4))
    lines = [f"{r.name:<11} fidelity {r.fidelity:.12f}  qfi {r.qfi:.9f} (expected {r.expected_qfi:g})"
             f"  {'ok' if r.ok() else 'FAIL'}" for r in results]
    ghz_ok = abs(ghz_qfi - 16) <= 1e-9
    lines.append(f"{'ghz4':<11} qfi {ghz_qfi:.9f} (expected 16)  {'ok' if ghz_ok else 'FAIL'}")
    print("\n".join(lines))
    if args.out:
        data = [{"name": r.name, "fidelity": r.fidelity, "qfi": r.qfi,
                 "expected_qfi": r.expected_qfi, "ok": r.ok()} for r in results]
        data.append({"name": "ghz4", "qfi": ghz_qfi, "expected_qfi": 16.0, "ok": ghz_ok})
        write_manifest(args, [_write_text(args.out, json.dumps(data, indent=1) + "\n")])
    if not (ghz_ok and all(r.ok() for r in results)):
        raise ValidationFailure("golden sequences do not reproduce the reference states")
    return 0


def cmd_pipeline(args) -> int:
    tcfg = TrainConfig(lr=args.lr, weight_decay=args.wd, epochs=args.epochs,
                       batch_size=args.batch, val_fraction=0.0)
    cfg = PipelineConfig(args.photons, args.q, args.lmin, args.lmax, args.train_count,
                         args.pool_count, args.k, args.h, args.obs, args.shots, args.seed,
                         args.threads, args.latent, args.layers, args.heads, tcfg)
    summary = pipeline_end_to_end(cfg)
    text = json.dumps(summary.to_dict(), indent=1)
    print(text)
    out = args.out = args.out or "pipeline.json"
    write_manifest(args, [_write_text(out, text + "\n")])
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--out", default=None, help="primary output path")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dqs", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, func, help):
        sp = sub.add_parser(name, parents=[common], help=help)
        sp.set_defaults(func=func, parser=sp)
        return sp

    def toolbox(sp):
        sp.add_argument("--photons", type=int, default=4)
        sp.add_argument("--q", type=int, default=4)
        sp.add_argument("--lmin", type=int, default=1)
        sp.add_argument("--lmax", type=int, default=15)

    def ham(sp):
        sp.add_argument("--h", default="sumZ", choices=sorted(HAMILTONIANS))

    def model_shape(sp):
        sp.add_argument("--latent", type=int, default=64)
        sp.add_argument("--layers", type=int, default=5)
        sp.add_argument("--heads", type=int, default=4)

    def optim(sp, epochs=50):
        sp.add_argument("--lr", type=float, default=1e-4)
        sp.add_argument("--wd", type=float, default=1e-5)
        sp.add_argument("--epochs", type=int, default=epochs)
        sp.add_argument("--batch", type=int, default=64)

    sp = cmd("gen", cmd_gen, "sample (and label) random setups into JSONL")
    toolbox(sp)
    sp.add_argument("--count", type=int)
    ham(sp)
    sp.add_argument("--unlabeled", action="store_true")
    sp.add_argument("--no-dedup", action="store_true")

    sp = cmd("train", cmd_train, "fit the surrogate on a labeled JSONL file")
    sp.add_argument("--data")
    sp.add_argument("--val", help="separate validation JSONL")
    sp.add_argument("--val-fraction", type=float, default=0.2)
    sp.add_argument("--decoupled", action="store_true", help="decoupled weight decay")
    sp.add_argument("--schedule", default="constant", choices=["constant", "cosine"])
    sp.add_argument("--augment-paths", action="store_true",
                    help="train on random label-preserving path relabelings")
    model_shape(sp)
    optim(sp)

    sp = cmd("eval", cmd_eval, "MSE and Spearman of a model on labeled data")
    sp.add_argument("--model")
    sp.add_argument("--data")

    sp = cmd("rank", cmd_rank, "rank a pool by predicted QFI and write the top-K CSV")
    sp.add_argument("--model")
    sp.add_argument("--data")
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--validate", action="store_true", help="attach oracle QFIs")
    ham(sp)

    sp = cmd("prune", cmd_prune, "drop devices that do not change the QFI")
    sp.add_argument("--setup", help="setup text file")
    sp.add_argument("--q", type=int, default=4)
    sp.add_argument("--trials", type=int, default=None)
    ham(sp)

    sp = cmd("sense", cmd_sense, "interpolate the response of a probe behind a black-box channel")
    sp.add_argument("--setup", help="setup text file")
    sp.add_argument("--q", type=int, default=4)
    ham(sp)
    sp.add_argument("--obs", default="prodX", choices=sorted(OBSERVABLES))
    sp.add_argument("--shots", type=int, default=None)
    sp.add_argument("--degree", type=int, default=None)
    sp.add_argument("--grid", type=int, default=512)

    sp = cmd("export-latent", cmd_export_latent, "write per-setup latent vectors as CSV")
    sp.add_argument("--model")
    sp.add_argument("--data")

    cmd("golden", cmd_golden, "check the reference sequences against their known states")

    sp = cmd("pipeline", cmd_pipeline, "gen -> train -> rank -> validate -> sense")
    toolbox(sp)
    sp.add_argument("--train-count", type=int, default=5000)
    sp.add_argument("--pool-count", type=int, default=10000)
    sp.add_argument("--k", type=int, default=5)
    ham(sp)
    sp.add_argument("--obs", default="prodX", choices=sorted(OBSERVABLES))
    sp.add_argument("--shots", type=int, default=None)
    model_shape(sp)
    optim(sp)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        env = os.environ.get("DQS_THREADS")
        if env:
            if not env.isdigit():
                args.parser.error(f"DQS_THREADS must be a positive integer, got {env!r}")
            args.threads = int(env)
        if args.threads < 1:
            args.parser.error("--threads must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    except (ValidationFailure, DatasetError, SetupError, PipelineError) as exc:
        print(f"dqs {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
