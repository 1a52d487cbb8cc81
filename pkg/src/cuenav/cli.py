"""Command line entry point: ``cuenav <command> [--config F] [--seed N] [--set K=V ...] [--out DIR]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import evaluate as ev
from . import simloop
from .augment import GroundTexture, make_ood_proxy
from .rng import substream
from .training import (LineDataset, RunConfig, evaluate_head, evaluate_masks, load_bundle, load_stage1,
                       make_pool, merge_curves, split_dataset, train_stage1, train_stage2, validation_images)
from .worldgen import CollectConfig, collect_dataset, generate_world, spiral_world

log = logging.getLogger("cuenav")

COMMANDS = ("gen-data", "train", "eval-mask", "sweep", "eval-waypoint", "simulate", "ablate", "report")


@dataclass
class ExperimentConfig:
    """Every key of the run config file. Paths are relative to ``out`` unless absolute."""
    seed: int = 0
    out: str = "out"
    # data generation
    data_dir: str = "data"
    n_worlds: int = 100
    samples_per_world: int = 20
    resolution: int = 64
    fov_deg: float = 60.0
    height: float = 1.0
    length: float = 2.0
    curvature_min: float = 0.0
    curvature_max: float = 1.2
    half_width: float = 0.05
    # a single training run (train / eval-* / simulate)
    name: str = "run"
    backgrounds: str = "none"
    brightness: float = 0.0
    hue: float = 0.0
    blur: bool = False
    deep_supervision: bool = False
    triplet: bool = False
    head: str = "waypoint"
    # training schedule
    epochs1: int = 30
    epochs2: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    base_channels: int = 16
    tl_weight: float = 1.0
    tl_batch: int = 4
    pool_size: int = 256
    beta: float = 0.9
    checkpoint_every: int = 0
    # evaluation
    ood_samples: int = 32
    episodes: int = 10
    control_hz: int = 30
    network_hz: int = 8
    dynamics: str = "train-sim"
    policy: str = "model"         # model | oracle-waypoint | oracle-velocity
    world: str = "random"         # random | spiral
    traces: bool = True
    stage: int = 2

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.out) / p

    def run_config(self, **overrides) -> RunConfig:
        keys = {f.name for f in fields(RunConfig)} & {f.name for f in fields(self)}
        d = {k: getattr(self, k) for k in keys}
        d["dataset"] = str(self.path(self.data_dir))
        d.update(overrides)
        return RunConfig.from_dict(d)

    def collect_config(self) -> CollectConfig:
        return CollectConfig(n_worlds=self.n_worlds, samples_per_world=self.samples_per_world,
                             resolution=self.resolution, fov_deg=self.fov_deg, height=self.height,
                             length=self.length, curvature_range=(self.curvature_min, self.curvature_max),
                             half_width=self.half_width, seed=self.seed)


def _coerce(field_type: str, raw: str):
    value = yaml.safe_load(raw)
    if field_type == "float" and isinstance(value, int):
        return float(value)
    if field_type == "str":
        return str(raw)
    return value


def load_config(path=None, overrides=(), seed=None, out=None) -> ExperimentConfig:
    data = {}
    if path:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: config must be a mapping of keys to values")
        data.update(loaded)
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        if k not in types:
            raise ValueError(f"unknown config key {k!r}")
        data[k] = _coerce(types[k], v)
    unknown = sorted(set(data) - set(types))
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["out"] = out
    for k, v in list(data.items()):
        if types[k] == "float" and isinstance(v, int) and not isinstance(v, bool):
            data[k] = float(v)
    return ExperimentConfig(**data)


# ---------------------------------------------------------------------------
# experiment grid

TABLE1 = {
    "Vanilla": ("vanilla", {}),
    "Places BG": ("places_bg", {"backgrounds": "scene"}),
    "DTD BG": ("dtd_bg", {"backgrounds": "texture"}),
    "DTD and places BG": ("dtd_places_bg", {"backgrounds": "texture+scene"}),
    "Brightness FG": ("brightness_fg", {"backgrounds": "scene", "brightness": 0.5}),
    "Hue FG": ("hue_fg", {"backgrounds": "scene", "hue": 0.5}),
    "Blur FG": ("blur_fg", {"backgrounds": "scene", "blur": True}),
    "DS": ("ds", {"backgrounds": "scene", "brightness": 0.5, "deep_supervision": True}),
    "DS with TL": ("ds_tl", {"backgrounds": "scene", "brightness": 0.5, "deep_supervision": True, "triplet": True}),
}
# Table II rows reuse the stage-1 encoders of Table I runs
TABLE2 = {
    "Baseline": ("brightness_fg", "waypoint"),
    "DS": ("ds", "waypoint"),
    "DS + TL": ("ds_tl", "waypoint"),
    "DS + TL + W/O Abs": ("ds_tl", "velocity"),
}
RUN_SWITCHES = ("backgrounds", "brightness", "hue", "blur", "deep_supervision", "triplet", "head")


def grid_run_config(cfg: ExperimentConfig, name: str, switches: dict, head: str = "waypoint") -> RunConfig:
    base = {k: RunConfig.__dataclass_fields__[k].default for k in RUN_SWITCHES}
    base.update(switches)
    base["head"] = head
    return cfg.run_config(name=name, **base)


def stage2_name(run: str, head: str) -> str:
    return run if head == "waypoint" else f"{run}_velocity"


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: ExperimentConfig) -> dict:
    out = cfg.path(cfg.data_dir)
    cc = cfg.collect_config()
    manifest_path = out / "dataset.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("config") == json.loads(json.dumps(asdict(cc))):
            log.info("dataset at %s is up to date", out)
            return manifest
    log.info("generating %d worlds x %d samples into %s", cc.n_worlds, cc.samples_per_world, out)
    return collect_dataset(cc.n_worlds, cc.samples_per_world, out, config=cc)


def _stage1_current(run_dir: Path, rc: RunConfig) -> bool:
    try:
        saved = RunConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    except (FileNotFoundError, ValueError):
        return False
    return (run_dir / "stage1.ckpt").exists() and saved.stage1_key() == rc.stage1_key()


def _stage2_current(run_dir: Path, rc: RunConfig) -> bool:
    try:
        saved = RunConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    except (FileNotFoundError, ValueError):
        return False
    return (run_dir / "stage2.ckpt").exists() and asdict(saved) == asdict(rc)


def train_run(rc: RunConfig, run_dir, stage1_from=None, stages=(1, 2), dataset=None) -> dict:
    run_dir = Path(run_dir)
    info = {}
    ds = dataset if dataset is not None else LineDataset.load(rc.dataset)
    if 1 in stages and stage1_from is None:
        if _stage1_current(run_dir, rc):
            log.info("%s: stage 1 up to date", rc.name)
        else:
            info["stage1"] = train_stage1(rc, run_dir, ds)["cpu_seconds"]
    if 2 in stages:
        ckpt = Path(stage1_from or run_dir) / "stage1.ckpt"
        if _stage2_current(run_dir, rc):
            log.info("%s: stage 2 up to date", rc.name)
        else:
            info["stage2"] = train_stage2(rc, ckpt, run_dir, ds)["cpu_seconds"]
    (run_dir).mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(asdict(rc), indent=2, sort_keys=True))
    merge_curves(run_dir)
    return info


def cmd_train(cfg: ExperimentConfig) -> dict:
    cmd_gen_data(cfg)
    rc = cfg.run_config()
    return train_run(rc, cfg.path("runs") / rc.name)


def ood_split(cfg: ExperimentConfig):
    return make_ood_proxy(cfg.ood_samples, seed=int(substream(cfg.seed, "ood-proxy").integers(2 ** 31)),
                          resolution=cfg.resolution, fov_deg=cfg.fov_deg, length=cfg.length,
                          curvature_range=(cfg.curvature_min, cfg.curvature_max))


def mask_metrics(cfg: ExperimentConfig, name: str, dataset=None, ood=None) -> dict:
    """IoU at 0.5 on validation and OOD proxy plus the threshold sweep; writes metrics/<name>/."""
    run_dir = cfg.path("runs") / name
    rc = RunConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    bundle = load_stage1(rc, run_dir / "stage1.ckpt")
    ds = dataset if dataset is not None else LineDataset.load(rc.dataset)
    _, val = split_dataset(ds)
    val_images = validation_images(val, rc, make_pool(rc))
    ood_images, ood_masks = ood if ood is not None else ood_split(cfg)
    _, _, val_probs = evaluate_masks(bundle, val_images, val.masks, rc.beta)
    _, _, ood_probs = evaluate_masks(bundle, ood_images, ood_masks, rc.beta)
    val_rep = ev.iou_report(val_probs, val.masks, 0.5, "validation")
    ood_rep = ev.iou_report(ood_probs, ood_masks, 0.5, "ood")
    mdir = cfg.path("metrics") / name
    ev.write_iou_csv([val_rep, ood_rep], mdir / "iou.csv")
    sweep = {"validation": ev.threshold_sweep(val_probs, val.masks), "ood": ev.threshold_sweep(ood_probs, ood_masks)}
    ev.write_sweep(sweep, mdir / "sweep.csv", mdir / "sweep.png")
    best_t, best = ev.best_threshold(sweep["ood"])
    return {"val_iou": val_rep.mean, "val_iou_std": val_rep.std, "ood_iou": ood_rep.mean, "ood_iou_std": ood_rep.std,
            "ood_best_iou": best, "ood_best_threshold": best_t, "sweep": sweep}


def cmd_eval_mask(cfg: ExperimentConfig) -> dict:
    m = mask_metrics(cfg, cfg.name)
    print(f"{cfg.name}: validation IoU {100 * m['val_iou']:.2f} ({100 * m['val_iou_std']:.2f}), "
          f"OOD IoU {100 * m['ood_iou']:.2f} ({100 * m['ood_iou_std']:.2f})")
    return m


def cmd_sweep(cfg: ExperimentConfig) -> dict:
    m = mask_metrics(cfg, cfg.name)
    for split, curve in m["sweep"].items():
        print(split, " ".join(f"{t:.1f}:{100 * v:.1f}" for t, v in curve.items()))
    return m


def closed_loop_worlds(cfg: ExperimentConfig) -> list:
    if cfg.world == "spiral":
        return [spiral_world(half_width=cfg.half_width) for _ in range(cfg.episodes)]
    return [generate_world(int(substream(cfg.seed, "closed-loop", i).integers(2 ** 31)),
                           (cfg.curvature_min, cfg.curvature_max), cfg.length, half_width=cfg.half_width)
            for i in range(cfg.episodes)]


def ground_for(rc: RunConfig | None, world_seed) -> GroundTexture | None:
    """Closed-loop backgrounds follow the run's training distribution (white when trained on white)."""
    if rc is None or rc.backgrounds == "none":
        return None
    family = rc.backgrounds.split("+")[0]
    if family not in ("texture", "scene"):
        return None
    return GroundTexture.generate(family, seed=int(world_seed or 0))


def closed_loop(cfg: ExperimentConfig, bundle, rc: RunConfig | None, profile: str, tag: str,
                policy=None) -> tuple[list, dict]:
    from .worldgen import CameraModel
    camera = CameraModel(height=cfg.height, fov=math.radians(cfg.fov_deg), resolution=cfg.resolution)
    policy = policy or simloop.ModelPolicy(bundle)
    worlds = closed_loop_worlds(cfg)
    results = []
    for i, world in enumerate(worlds):
        ep_seed = int(substream(cfg.seed, "episode", i).integers(2 ** 31))
        results.append(simloop.run_episode(world, policy, profile, ep_seed, camera=camera,
                                           control_hz=cfg.control_hz, network_hz=cfg.network_hz,
                                           ground=ground_for(rc, world.seed if world.seed is not None else i)))
    sdir = cfg.path("sim") / tag / profile
    simloop.write_summary(results, sdir / "summary.csv")
    if cfg.traces:
        for i, r in enumerate(results):
            simloop.write_trace(r, sdir / f"episode_{i:02d}.jsonl")
        simloop.plot_trajectories(worlds[0], results[:1], sdir / "trajectory.png", labels=[tag])
    return results, simloop.summarize(results)


def cmd_simulate(cfg: ExperimentConfig) -> dict:
    if cfg.policy == "model":
        bundle, rc = load_bundle(cfg.path("runs") / cfg.name, stage=2)
        policy, tag = None, cfg.name
    elif cfg.policy in ("oracle-waypoint", "oracle-velocity"):
        bundle, rc = None, None
        policy, tag = simloop.OraclePolicy(cfg.policy.split("-")[1]), cfg.policy
    else:
        raise ValueError(f"unknown policy {cfg.policy!r}")
    _, summary = closed_loop(cfg, bundle, rc, cfg.dynamics, tag, policy)
    print(f"{tag} [{cfg.dynamics}]: {summary['successes']}/{summary['episodes']} success, "
          f"online RMSE {summary['online_rmse']:.4f}, cross-track RMSE {summary['cross_track_rmse']:.4f}")
    return summary


def waypoint_metrics(cfg: ExperimentConfig, name: str, dataset=None) -> dict:
    """Offline RMSE on validation plus closed-loop runs in both dynamics profiles; writes rmse.csv."""
    run_dir = cfg.path("runs") / name
    bundle, rc = load_bundle(run_dir, stage=2)
    ds = dataset if dataset is not None else LineDataset.load(rc.dataset)
    _, val = split_dataset(ds)
    targets = val.targets(rc.head)
    _, rmse, preds = evaluate_head(bundle, validation_images(val, rc, make_pool(rc)), targets)
    errs = ev.per_sample_error(preds, targets)
    _, sim_in = closed_loop(cfg, bundle, rc, "train-sim", name)
    _, sim_dep = closed_loop(cfg, bundle, rc, "deploy-proxy", name)
    m = {
        "head": rc.head,
        "val_rmse": rmse, "val_rmse_std": float(np.std(errs)),
        "online_rmse": sim_in["online_rmse"], "successes": sim_in["successes"],
        "episodes": sim_in["episodes"], "cross_track": sim_in["cross_track_rmse"],
        "deploy_online_rmse": sim_dep["online_rmse"], "deploy_successes": sim_dep["successes"],
        "deploy_cross_track": sim_dep["cross_track_rmse"],
    }
    mdir = cfg.path("metrics") / name
    mdir.mkdir(parents=True, exist_ok=True)
    with open(mdir / "rmse.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in m.items():
            w.writerow([k, f"{v:.6f}" if isinstance(v, float) else v])
    return m


def cmd_eval_waypoint(cfg: ExperimentConfig) -> dict:
    m = waypoint_metrics(cfg, cfg.name)
    print(f"{cfg.name}: offline RMSE {m['val_rmse']:.4f}, online RMSE {m['online_rmse']:.4f}, "
          f"success {m['successes']}/{m['episodes']}, deploy success {m['deploy_successes']}/{m['episodes']}")
    return m


def _read_metrics(path: Path) -> dict:
    if not path.exists():
        return {}
    out = {}
    with open(path) as fh:
        for row in csv.DictReader(fh):
            if "metric" in row:
                v = row["value"]
                try:
                    out[row["metric"]] = int(v) if v.isdigit() else float(v)
                except ValueError:
                    out[row["metric"]] = v
    return out


def _mask_summary(mdir: Path) -> dict:
    m = {}
    iou = mdir / "iou.csv"
    if iou.exists():
        with open(iou) as fh:
            for row in csv.DictReader(fh):
                if row["index"] in ("mean", "std"):
                    key = {"validation": "val_iou", "ood": "ood_iou"}[row["split"]]
                    m[key if row["index"] == "mean" else key + "_std"] = float(row["iou"])
    sweep = mdir / "sweep.csv"
    if sweep.exists():
        with open(sweep) as fh:
            rows = list(csv.DictReader(fh))
        if rows and "ood_iou" in rows[0]:
            best = max(rows, key=lambda r: (float(r["ood_iou"]), -float(r["threshold"])))
            m["ood_best_iou"] = float(best["ood_iou"])
            m["ood_best_threshold"] = float(best["threshold"])
    return m


def cmd_report(cfg: ExperimentConfig) -> dict:
    metrics = cfg.path("metrics")
    # rows of runs that produced nothing stay in the table, marked absent
    t1 = {row: _mask_summary(metrics / run) for row, (run, _) in TABLE1.items()}
    t2 = {row: _read_metrics(metrics / stage2_name(run, head) / "rmse.csv") for row, (run, head) in TABLE2.items()}
    tables = cfg.path("tables")
    text1 = ev.report(t1, tables, "table1")
    text2 = ev.report(t2, tables, "table2")
    print(text1)
    print(text2)
    return {"table1": t1, "table2": t2}


def _train_cell(args):
    rc_dict, run_dir, stage1_from, stages = args
    rc = RunConfig.from_dict(rc_dict)
    return train_run(rc, run_dir, stage1_from, stages)


def cmd_ablate(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    cmd_gen_data(cfg)
    runs = cfg.path("runs")
    failures = []
    cells = [(asdict(grid_run_config(cfg, run, sw)), str(runs / run), None, (1,)) for run, sw in TABLE1.values()]
    for ok, err, cell in _execute(cells, jobs):
        if not ok:
            failures.append((cell[0]["name"], err))
    stage2_cells = []
    for run, head in TABLE2.values():
        sw = dict(TABLE1[[k for k, v in TABLE1.items() if v[0] == run][0]][1])
        name = stage2_name(run, head)
        rc = grid_run_config(cfg, name, sw, head)
        stage2_cells.append((asdict(rc), str(runs / name), str(runs / run), (2,)))
    for ok, err, cell in _execute(stage2_cells, jobs):
        if not ok:
            failures.append((cell[0]["name"], err))
    failed = {f[0] for f in failures}
    ds = LineDataset.load(cfg.path(cfg.data_dir))
    ood = ood_split(cfg)
    for run, _ in TABLE1.values():
        if run not in failed:
            try:
                mask_metrics(cfg, run, ds, ood)
            except Exception as exc:  # noqa: BLE001 - the grid records the failure and continues
                failures.append((run, repr(exc)))
    for run, head in TABLE2.values():
        name = stage2_name(run, head)
        if name not in failed:
            try:
                waypoint_metrics(cfg, name, ds)
            except Exception as exc:  # noqa: BLE001
                failures.append((name, repr(exc)))
    result = cmd_report(cfg)
    result["failures"] = failures
    for name, err in failures:
        print(f"failed: {name}: {err}", file=sys.stderr)
    return result


def _execute(cells, jobs: int):
    if jobs <= 1:
        for cell in cells:
            try:
                _train_cell(cell)
                yield True, None, cell
            except Exception as exc:  # noqa: BLE001
                log.exception("grid cell %s failed", cell[0]["name"])
                yield False, repr(exc), cell
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [(pool.submit(_train_cell, c), c) for c in cells]
        for fut, cell in futures:
            try:
                fut.result()
                yield True, None, cell
            except Exception as exc:  # noqa: BLE001
                yield False, repr(exc), cell


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cuenav", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key-value YAML config file")
    p.add_argument("--seed", type=int, help="root seed for every random substream")
    p.add_argument("--set", action="append", default=[], metavar="K=V", help="override a config key (repeatable)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel grid cells (ablate only)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed, args.out)
    except (ValueError, OSError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out) / "config.resolved.yaml").write_text(yaml.safe_dump(asdict(cfg), sort_keys=True))
    handlers = {
        "gen-data": cmd_gen_data, "train": cmd_train, "eval-mask": cmd_eval_mask, "sweep": cmd_sweep,
        "eval-waypoint": cmd_eval_waypoint, "simulate": cmd_simulate, "report": cmd_report,
    }
    try:
        if args.command == "ablate":
            result = cmd_ablate(cfg, args.jobs)
            return 1 if result["failures"] else 0
        handlers[args.command](cfg)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
