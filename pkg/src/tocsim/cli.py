"""tocsim command line: ``run``, ``table``, ``curves``, ``verify``, ``gen-data``."""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, parse_config, render_values
from .data import save_raw
from .errors import ConfigError, TocsimError
from .infotheory import run_sweep
from .report import MANIFEST, atomic_write, emit_curves, render_table, run_filename, write_records
from .trainer import REGIMES, run_pretrain, run_regime

log = logging.getLogger("tocsim")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _run_unit(cfg: ExperimentConfig, seed: int, channel) -> list[dict]:
    """Every regime for one (seed, channel); SSL regimes share one stage I."""
    train, test = cfg.data.load(seed)
    tcfg = replace(cfg.train, channel=channel, seed=seed)
    regimes = [REGIMES[name] for name in cfg.regimes]
    pretrained = run_pretrain(train, tcfg) if any(r.pretrain for r in regimes) else None
    entries = []
    for regime in regimes:
        start = time.perf_counter()
        records = run_regime(regime, train, tcfg, test, pretrained if regime.pretrain else None)
        path = cfg.output_dir / run_filename(regime.name, channel.label, seed)
        write_records(path, records)
        log.info("%s %s seed=%d: %d rounds in %.1fs", regime.name, channel.label, seed, records[-1].round, time.perf_counter() - start)
        entries.append(
            {
                "regime": regime.name,
                "channel": channel.label,
                "kind": channel.kind,
                "snr_db": channel.snr_db,
                "seed": seed,
                "file": path.name,
                "rounds": records[-1].round,
                "sha256": _sha256(path),
            }
        )
    return entries


def _run_unit_star(args):
    return _run_unit(*args)


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> list[Path]:
    """Run the full (seed x channel x regime) grid; returns the CSV paths.

    The manifest is written once, by this coordinating process, after every
    run has finished.
    """
    out = cfg.output_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"{out} is not writable: {exc.strerror}", key="output_dir") from exc
    log.info("resolved configuration (hash %s):\n%s", cfg.config_hash[:12], render_values(cfg.values))
    units = [(cfg, seed, channel) for seed, channel in cfg.runs()]
    if threads > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_unit_star, units))
    else:
        results = [_run_unit(*u) for u in units]
    entries = [e for batch in results for e in batch]
    manifest = {
        "tool": "tocsim",
        "version": __version__,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        "config_hash": cfg.config_hash,
        "config": cfg.values,
        "thresholds": list(cfg.thresholds),
        "runs": entries,
    }
    atomic_write(out / MANIFEST, json.dumps(manifest, indent=2, default=_json_default) + "\n")
    return [out / e["file"] for e in entries]


def _json_default(value):
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialise {type(value).__name__}")


def _split(values) -> list[str]:
    return [part.strip() for v in values for part in v.split(",") if part.strip()]


def _snr(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"expected a number, got {text!r}", key="channel.snr_db") from None


def overrides_from_args(args) -> dict:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
        overrides["seeds"] = [args.seed]
    if getattr(args, "out", None):
        overrides["output_dir"] = str(args.out)
    if getattr(args, "snr", None):
        overrides["channel.snr_db"] = [_snr(s) for s in _split(args.snr)]
    if getattr(args, "channel", None):
        overrides["channel.kind"] = _split(args.channel)
    if getattr(args, "regime", None):
        overrides["regimes"] = _split(args.regime)
    return overrides


def _thresholds(args, directory: Path | None):
    if args.thresholds:
        try:
            return [float(t) for t in _split([args.thresholds])]
        except ValueError:
            raise ConfigError(f"not a list of numbers: {args.thresholds!r}", key="thresholds") from None
    if directory is not None and (directory / MANIFEST).exists():
        return json.loads((directory / MANIFEST).read_text())["thresholds"]
    return list(parse_config(args.config).thresholds)


def cmd_run(args) -> int:
    cfg = parse_config(args.config, overrides_from_args(args))
    paths = run_experiment(cfg, threads=args.threads)
    print(f"wrote {len(paths)} run files and {MANIFEST} to {cfg.output_dir}")
    return 0


def cmd_table(args) -> int:
    sources = args.inputs or [args.out or parse_config(args.config).output_dir]
    first = Path(sources[0])
    thresholds = _thresholds(args, first if first.is_dir() else None)
    table = render_table(sources, thresholds, max_rounds=args.max_rounds)
    sys.stdout.write(table.to_text())
    if args.csv:
        atomic_write(Path(args.csv), table.to_csv())
    return 0


def cmd_curves(args) -> int:
    sources = args.inputs or [args.out or parse_config(args.config).output_dir]
    out_dir = Path(args.dest or (sources[0] if Path(sources[0]).is_dir() else "."))
    for path in emit_curves(sources, out_dir):
        print(path)
    return 0


def cmd_verify(args) -> int:
    seed = 0 if args.seed is None else args.seed
    start = time.perf_counter()
    result = run_sweep(seed=seed)
    for name in result.counts:
        status = "ok" if not result.failures[name] else f"FAILED x{result.failures[name]}"
        print(f"{name:16s} {result.counts[name]:4d} instances  worst slack {result.worst[name]: .3e}  {status}")
    print(f"{'passed' if result.passed else 'FAILED'} in {time.perf_counter() - start:.1f}s")
    if result.failing_instances and args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        dump = [{"check": name, "instance": repr(inst)} for name, inst in result.failing_instances]
        atomic_write(out / "verify_failures.json", json.dumps(dump, indent=2) + "\n")
    return 0 if result.passed else 1


def cmd_gen_data(args) -> int:
    cfg = parse_config(args.config, overrides_from_args(args))
    data = cfg.data
    if data.source != "blobs":
        raise ConfigError("gen-data draws synthetic blobs", key="data.source")
    seed = cfg.seeds[0] if data.seed is None else data.seed
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    train, test = data.load(seed)
    save_raw(train, out / "train.tocd")
    written = [out / "train.tocd"]
    if test is not None:
        save_raw(test, out / "test.tocd")
        written.append(out / "test.tocd")
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tocsim", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data_flags=True):
        p.add_argument("--config", type=Path, help="TOML file with dotted keys")
        p.add_argument("--seed", type=int, help="single experiment seed (replaces 'seeds')")
        p.add_argument("--out", type=Path, help="output directory")
        if data_flags:
            p.add_argument("--snr", action="append", help="SNR in dB; comma list or repeated")
            p.add_argument("--channel", action="append", help="AWGN or Rayleigh; comma list or repeated")
            p.add_argument("--regime", action="append", help="regime name; comma list or repeated")
        p.add_argument("--threads", type=int, default=1, help="worker processes for independent runs")

    p = sub.add_parser("run", help="train every regime on every channel and write CSV logs")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("table", help="rounds-to-threshold table from run CSVs")
    common(p, data_flags=False)
    p.add_argument("inputs", nargs="*", help="run CSVs or output directories (default: --out)")
    p.add_argument("--thresholds", help="comma list; default from the manifest or config")
    p.add_argument("--max-rounds", type=int, help="round budget; cells at the budget are not ranked")
    p.add_argument("--csv", help="also write the table as CSV here")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("curves", help="per-channel accuracy-versus-round series")
    common(p, data_flags=False)
    p.add_argument("inputs", nargs="*", help="run CSVs or output directories (default: --out)")
    p.add_argument("--dest", help="directory for the curve files (default: the run directory)")
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("verify", help="exact-MI sweep of the identities and the bound chain")
    common(p, data_flags=False)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen-data", help="write a synthetic dataset in the raw TOCD format")
    common(p, data_flags=False)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except TocsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
