"""Command-line entry point.

    matchsim baseline --seed 7 --out runs/b1
    matchsim train    --config train.yaml --out runs/t1
    matchsim eval     --checkpoint runs/t1/checkpoint.bin --out runs/e1
    matchsim replay   runs/e1

Exit status: 0 success, 2 usage or config error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__, nn
from .a3c import (
    Hyperparams,
    episode_seed,
    load_checkpoint,
    save_checkpoint,
    train,
    write_trace_csv,
)
from .env import EVENT_COLUMNS, MATCH_COLUMNS, ConfigError, WorldConfig
from .harness import (
    SUMMARY_FORMAT_VERSION,
    config_digest,
    replay_run,
    run_baseline,
    run_mixed,
    write_json,
)

log = logging.getLogger("matchsim")

MODES = ("baseline", "train", "eval", "replay")
TOP_LEVEL_KEYS = {"mode", "seed", "trials", "output_dir", "checkpoint", "view_ranges", "deterministic",
                  "world", "hyperparams"}
# Keys that must be present in the config file for a mode, as dotted paths.
REQUIRED_KEYS = {"train": ("hyperparams.episodes",)}


@dataclass
class RunConfig:
    mode: str
    world: WorldConfig = field(default_factory=WorldConfig)
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    trials: int = 5
    output_dir: Path | None = None
    checkpoint: Path | None = None
    seed: int = 0
    view_ranges: tuple[float, ...] = (5.0, 15.0, 25.0)
    deterministic: bool = False

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.view_ranges:
            raise ConfigError("view_ranges must not be empty")
        if self.mode == "eval" and self.checkpoint is None:
            raise ConfigError("eval needs a checkpoint (--checkpoint or config key 'checkpoint')")
        self.world.validate()
        for vr in self.view_ranges:
            replace(self.world, view_range=float(vr)).validate()
        self.hyperparams.validate()

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "world": self.world.to_dict(),
            "hyperparams": self.hyperparams.to_dict(),
            "trials": self.trials,
            "output_dir": str(self.output_dir) if self.output_dir else None,
            "checkpoint": str(self.checkpoint) if self.checkpoint else None,
            "seed": self.seed,
            "view_ranges": list(self.view_ranges),
            "deterministic": self.deterministic,
        }


def load_config_file(path: Path) -> dict:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping at the top level")
    return data


def _has(data: dict, dotted: str) -> bool:
    node = data
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return False
        node = node[part]
    return True


def resolve_config(mode: str, data: dict, args: argparse.Namespace) -> RunConfig:
    unknown = sorted(set(data) - TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    if data.get("mode", mode) != mode:
        raise ConfigError(f"config is for mode {data['mode']!r}, not {mode!r}")
    missing = [k for k in REQUIRED_KEYS.get(mode, ()) if not _has(data, k)]
    if missing:
        raise ConfigError(f"missing required config keys for {mode}: {', '.join(missing)}")
    try:
        cfg = RunConfig(
            mode=mode,
            world=WorldConfig.from_dict(data.get("world") or {}),
            hyperparams=Hyperparams.from_dict(data.get("hyperparams") or {}),
            trials=int(data.get("trials", 5)),
            output_dir=Path(data["output_dir"]) if data.get("output_dir") else None,
            checkpoint=Path(data["checkpoint"]) if data.get("checkpoint") else None,
            seed=int(data.get("seed", 0)),
            view_ranges=tuple(float(v) for v in data.get("view_ranges", (5, 15, 25))),
            deterministic=bool(data.get("deterministic", False)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config value: {exc}") from exc
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.output_dir = Path(args.out)
    if getattr(args, "checkpoint", None) is not None:
        cfg.checkpoint = Path(args.checkpoint)
    if getattr(args, "trials", None) is not None:
        cfg.trials = args.trials
    if getattr(args, "workers", None) is not None:
        cfg.hyperparams = replace(cfg.hyperparams, workers=args.workers)
    if getattr(args, "deterministic", False):
        cfg.deterministic = True
    if cfg.deterministic:
        cfg.hyperparams = replace(cfg.hyperparams, workers=1)
    cfg.validate()
    if cfg.output_dir is None:
        cfg.output_dir = Path("runs") / f"{mode}-{config_digest(cfg.to_dict())}"
    return cfg


def _metadata(cfg: RunConfig, argv: list[str], seeds: dict, status: str, elapsed: float, **extra) -> dict:
    resolved = cfg.to_dict()
    return {
        "run_id": f"{cfg.mode}-{config_digest(resolved)}",
        "mode": cfg.mode,
        "argv": argv,
        "config": resolved,
        "seeds": seeds,
        "format_versions": {
            "summary": SUMMARY_FORMAT_VERSION,
            "checkpoint": nn.CHECKPOINT_VERSION,
            "events_csv": list(EVENT_COLUMNS),
            "pairs_csv": list(MATCH_COLUMNS),
        },
        "software": {"matchsim": __version__, "python": platform.python_version(), "numpy": np.__version__},
        "status": status,
        "elapsed_seconds": round(elapsed, 3),
        **extra,
    }


# ---------------------------------------------------------------- commands


def _cmd_baseline(cfg: RunConfig) -> tuple[dict, dict]:
    out = run_baseline(cfg.view_ranges, cfg.trials, cfg.seed, cfg.world, cfg.output_dir)
    for vr, agg in out.aggregates["per_view_range"].items():
        print(f"view {vr:>4}: mean avg abs diff {agg['mean_avg_abs_diff']:.3f}  "
              f"full matches {agg['full_match_fraction']:.0%}")
    return {"seed": cfg.seed, "trial_seeds": out.trial_seeds}, {}


def _cmd_train(cfg: RunConfig) -> tuple[dict, dict]:
    hp = cfg.hyperparams
    res = train(cfg.world, hp, cfg.seed, deterministic=cfg.deterministic)
    ckpt = cfg.checkpoint or cfg.output_dir / "checkpoint.bin"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, res.store.params, res.store.adam, version=res.store.version, hp=hp,
                    extra={"seed": cfg.seed, "world": cfg.world.to_dict()})
    write_trace_csv(cfg.output_dir / "trace.csv", res.trace)
    tail = res.trace[-max(1, len(res.trace) // 10):] if res.trace else []
    egr = [r["egr_avg_diff"] for r in tail if r["egr_avg_diff"] is not None]
    summary = {
        "format_version": SUMMARY_FORMAT_VERSION,
        "mode": "train",
        "episodes": len(res.trace),
        "updates": res.store.version,
        "checkpoint": str(ckpt),
        "final_egr_avg_diff": float(np.mean(egr)) if egr else None,
    }
    write_json(cfg.output_dir / "summary.json", summary)
    print(f"trained {len(res.trace)} episodes, {res.store.version} updates -> {ckpt}")
    seeds = {"seed": cfg.seed, "init": episode_seed(cfg.seed, 0xA77),
             "workers": [episode_seed(cfg.seed, 0xB0, w) for w in range(1 if cfg.deterministic else hp.workers)]}
    return seeds, {"checkpoint": str(ckpt)}


def _cmd_eval(cfg: RunConfig) -> tuple[dict, dict]:
    if not cfg.checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {cfg.checkpoint}")
    params, _, manifest = load_checkpoint(cfg.checkpoint)
    out = run_mixed(cfg.world, params, cfg.trials, cfg.seed, cfg.output_dir)
    a = out.aggregates
    print(f"{cfg.trials} trials: avg abs diff {a['mean_avg_abs_diff']:.3f} (std {a['mean_std_abs_diff']:.3f}), "
          f"E.Gr {_fmt(a['mean_egr_avg_diff'])}, C.Gr {_fmt(a['mean_cgr_avg_diff'])}")
    return {"seed": cfg.seed, "trial_seeds": out.trial_seeds}, {"checkpoint_version": manifest.get("version")}


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.3f}"


def _cmd_replay(run_dir: Path, out_dir: Path) -> tuple[dict, int]:
    report = replay_run(run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "replay.json", {"source": str(run_dir), "trials": report.trials,
                                         "ok": report.ok, "mismatches": report.mismatches})
    for m in report.mismatches:
        print(m, file=sys.stderr)
    print(f"replayed {report.trials} trials: {'identical' if report.ok else 'MISMATCH'}")
    return {"ok": report.ok}, 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="matchsim", description="Assortative matching simulator and trainer.")
    sub = p.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        sp = sub.add_parser(mode)
        if mode == "replay":
            sp.add_argument("run_dir", type=Path, help="directory written by baseline or eval")
            sp.add_argument("--out", help="where to write the replay report (default RUN_DIR/replay)")
            continue
        sp.add_argument("--config", type=Path, help="JSON or YAML file with RunConfig keys")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--checkpoint", help="checkpoint to write (train) or read (eval)")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--deterministic", action="store_true", help="single worker, fully reproducible")
        if mode != "train":
            sp.add_argument("--trials", type=int)
    return p


def cli_main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    if args.mode == "replay":
        out_dir = Path(args.out) if args.out else args.run_dir / "replay"
        t0 = time.perf_counter()
        try:
            info, code = _cmd_replay(args.run_dir, out_dir)
        except (OSError, KeyError, ValueError) as exc:
            print(f"error: cannot replay {args.run_dir}: {exc}", file=sys.stderr)
            return 1
        write_json(out_dir / "metadata.json", {
            "mode": "replay", "argv": argv, "source": str(args.run_dir),
            "format_versions": {"summary": SUMMARY_FORMAT_VERSION},
            "software": {"matchsim": __version__, "python": platform.python_version(), "numpy": np.__version__},
            "status": "ok" if code == 0 else "mismatch", "elapsed_seconds": round(time.perf_counter() - t0, 3),
            **info,
        })
        return code

    try:
        data = load_config_file(args.config) if args.config else {}
        cfg = resolve_config(args.mode, data, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    command = {"baseline": _cmd_baseline, "train": _cmd_train, "eval": _cmd_eval}[args.mode]
    t0 = time.perf_counter()
    write_json(cfg.output_dir / "metadata.json", _metadata(cfg, argv, {"seed": cfg.seed}, "running", 0.0))
    try:
        seeds, extra = command(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        write_json(cfg.output_dir / "metadata.json",
                   _metadata(cfg, argv, {"seed": cfg.seed}, "config_error", time.perf_counter() - t0, error=str(exc)))
        return 2
    except Exception as exc:  # noqa: BLE001 - reported and mapped to exit 1
        log.debug("run failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        write_json(cfg.output_dir / "metadata.json",
                   _metadata(cfg, argv, {"seed": cfg.seed}, "error", time.perf_counter() - t0, error=str(exc)))
        return 1
    meta = _metadata(cfg, argv, seeds, "ok", time.perf_counter() - t0, **extra)
    summary_path = cfg.output_dir / "summary.json"
    summary = json.loads(summary_path.read_text())
    summary.update(run_id=meta["run_id"], config=meta["config"])
    write_json(summary_path, summary)
    write_json(cfg.output_dir / "metadata.json", meta)
    return 0


def main() -> None:
    sys.exit(cli_main())
