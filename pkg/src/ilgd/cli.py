"""Command-line orchestration: train, sample, evaluate, testbed, ablate.

Every run is driven by one JSON config file; unknown keys are rejected by
name so configs stay archivable and diffable.  Every artifact embeds the
fully resolved config and the code version, and no artifact contains a
timestamp, so re-running a config reproduces its outputs byte for byte.
Binary PPM (P6) is the canonical image format; PNG is a convenience
export.  The ILGD_WORKERS environment variable fans (layout, seed) jobs
out across processes; outputs are identical for any worker count.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import multiprocessing
import os
import sys

import numpy as np

from . import __version__
from .dataset import (BACKGROUNDS, COLORS, SHAPES, LayoutSpec, SceneObject,
                      SceneSpec, VOCAB, generate_scene)
from .evaluation import (GroundTruth, ap_at_50, count_matches, image_statistics,
                         oracle_detect)
from .guidance import METHODS, GuidanceConfig
from .samplers import (SamplerConfig, annealed_langevin, continuous_alpha_bar,
                       continuous_sigma, ode_solve, sample)
from .schedules import NoiseSchedule
from .testbed import GaussianMixture, flow_affine_map, tv_distance
from .training import TrainConfig, load_checkpoint, train


class ConfigError(ValueError):
    """A config file problem the user must fix; exits with status 2."""


# ---------------------------------------------------------------------------
# config plumbing


def _load_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg


def _check_keys(cfg: dict, allowed, required, where: str) -> None:
    for key in sorted(set(cfg) - set(allowed)):
        raise ConfigError(f"unknown config key '{key}' for {where}")
    for key in required:
        if key not in cfg:
            raise ConfigError(f"missing required config key '{key}' "
                              f"for {where}")


def _dataclass_from(cls, d: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    _check_keys(d, names, (), where)
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}")


def _guidance_from(cfg: dict) -> GuidanceConfig:
    d = dict(cfg.get("guidance", {}))
    if "seed" in d:
        raise ConfigError("per-run seeds come from the top-level 'seeds' "
                          "list, not from guidance.seed")
    return _dataclass_from(GuidanceConfig, d, "guidance config")


def _sampler_from(cfg: dict) -> SamplerConfig:
    d = dict(cfg.get("sampler", {}))
    d.setdefault("seed", 0)
    return _dataclass_from(SamplerConfig, d, "sampler config")


def _scene_from_dict(d: dict, where: str) -> SceneSpec:
    _check_keys(d, ("background", "objects"), ("background", "objects"),
                where)
    if d["background"] not in BACKGROUNDS:
        raise ConfigError(f"{where}: unknown background {d['background']!r}")
    objects = []
    for k, o in enumerate(d["objects"]):
        ow = f"{where}.objects[{k}]"
        _check_keys(o, ("color", "shape", "box"), ("color", "shape", "box"),
                    ow)
        if o["color"] not in COLORS:
            raise ConfigError(f"{ow}: unknown color {o['color']!r}")
        if o["shape"] not in SHAPES:
            raise ConfigError(f"{ow}: unknown shape {o['shape']!r}")
        try:
            box = tuple(float(v) for v in o["box"])
        except (TypeError, ValueError):
            raise ConfigError(f"{ow}: box must be [x0, y0, x1, y1]")
        if len(box) != 4:
            raise ConfigError(f"{ow}: box must be [x0, y0, x1, y1]")
        objects.append(SceneObject(o["color"], o["shape"], box))
    return SceneSpec(d["background"], tuple(objects))


def _scenes_from_config(cfg: dict, where: str) -> list[tuple[str, SceneSpec]]:
    out = []
    for seed in cfg.get("scene_seeds", []):
        out.append((f"scene{int(seed)}", generate_scene(int(seed))))
    for k, d in enumerate(cfg.get("scenes", [])):
        out.append((f"inline{k}", _scene_from_dict(d, f"scenes[{k}]")))
    if not out:
        raise ConfigError(f"missing required config key 'scene_seeds' or "
                          f"'scenes' for {where}")
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _dump(obj, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# image files


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(img), 0.0, 1.0) * 255.0).astype(
        np.uint8)


def write_ppm(path: str, img: np.ndarray) -> None:
    """Binary P6 at maxval 255: the canonical, bit-exact output format."""
    u8 = to_u8(img)
    h, w, c = u8.shape
    if c != 3:
        raise ValueError("write_ppm: image must be (H, W, 3)")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(u8.tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read a binary P6 file back to float RGB in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields = data.split(maxsplit=4)
    if len(fields) < 5 or fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError(f"{path} is not an 8-bit binary PPM")
    w, h = int(fields[1]), int(fields[2])
    raw = fields[4][: w * h * 3]
    if len(raw) != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    u8 = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return u8.astype(np.float64) / 255.0


def write_png(path: str, img: np.ndarray) -> None:
    from PIL import Image
    Image.fromarray(to_u8(img), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# sampling runs


def _truth_rows(scene: SceneSpec) -> list[dict]:
    return [{"color": o.color, "shape": o.shape, "box": list(o.box)}
            for o in scene.objects]


_WORKER_STATE: dict = {}


def _run_job(job: tuple) -> dict:
    out_dir, layout_id, scene, seed, gcfg, scfg, png = job
    st = _WORKER_STATE
    layout = LayoutSpec.from_scene(scene)
    scfg = dataclasses.replace(scfg, seed=int(seed))
    res = sample(st["weights"], st["schedule"], layout, gcfg, scfg,
                 trained_p_uncond=st["p_uncond"])
    stem = f"{gcfg.method}_{layout_id}_seed{seed}"
    write_ppm(os.path.join(out_dir, stem + ".ppm"), res.image)
    if png:
        write_png(os.path.join(out_dir, stem + ".png"), res.image)
    _dump({"image": stem + ".ppm", "config": res.config,
           "version": __version__, "steps": res.steps},
          os.path.join(out_dir, stem + ".trace.json"))
    return {"image": stem + ".ppm", "layout_id": layout_id,
            "seed": int(seed), "method": gcfg.method,
            "background": scene.background, "truths": _truth_rows(scene)}


def _load_state(checkpoint: str) -> dict:
    ckpt = load_checkpoint(checkpoint)
    if tuple(ckpt.vocab) != tuple(VOCAB.tokens):
        raise ConfigError(
            f"checkpoint vocabulary {list(ckpt.vocab)} does not match this "
            f"build's vocabulary; refusing to sample")
    return {"weights": ckpt.weights, "schedule": ckpt.schedule,
            "p_uncond": ckpt.config.p_uncond}


def _workers() -> int:
    try:
        n = int(os.environ.get("ILGD_WORKERS", "1"))
    except ValueError:
        raise ConfigError("ILGD_WORKERS must be an integer")
    return max(1, n)


def _run_matrix(out_dir: str, state: dict, scenes, seeds, gcfg, scfg,
                png: bool) -> list[dict]:
    """Run one (layout, seed) sampling matrix; rows come back sorted."""
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(out_dir, lid, scene, seed, gcfg, scfg, png)
            for lid, scene in scenes for seed in seeds]
    global _WORKER_STATE
    _WORKER_STATE = state
    n = _workers()
    if n == 1 or len(jobs) == 1:
        rows = [_run_job(j) for j in jobs]
    else:
        # fork inherits _WORKER_STATE; map preserves job order
        with multiprocessing.get_context("fork").Pool(min(n, len(jobs))) \
                as pool:
            rows = pool.map(_run_job, jobs)
    return sorted(rows, key=lambda r: (r["method"], r["layout_id"],
                                       r["seed"]))


def _write_manifest(path: str, config: dict, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        head = {"kind": "run", "config": config, "version": __version__}
        fh.write(json.dumps(_jsonable(head), sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(_jsonable({"kind": "image", **row}),
                                sort_keys=True) + "\n")


SAMPLE_KEYS = ("out_dir", "checkpoint", "scene_seeds", "scenes", "seeds",
               "guidance", "sampler", "png")


def run_sample(cfg: dict) -> dict:
    _check_keys(cfg, SAMPLE_KEYS, ("out_dir", "checkpoint"), "sample")
    scenes = _scenes_from_config(cfg, "sample")
    seeds = [int(s) for s in cfg.get("seeds", [0])]
    gcfg = _guidance_from(cfg)
    scfg = _sampler_from(cfg)
    png = bool(cfg.get("png", False))
    state = _load_state(cfg["checkpoint"])
    resolved = {"subcommand": "sample", "out_dir": cfg["out_dir"],
                "checkpoint": cfg["checkpoint"],
                "scene_seeds": [int(s) for s in cfg.get("scene_seeds", [])],
                "scenes": cfg.get("scenes", []), "seeds": seeds,
                "guidance": dataclasses.asdict(gcfg),
                "sampler": dataclasses.asdict(scfg), "png": png}
    rows = _run_matrix(cfg["out_dir"], state, scenes, seeds, gcfg, scfg, png)
    _write_manifest(os.path.join(cfg["out_dir"], "manifest.jsonl"),
                    resolved, rows)
    return {"config": resolved, "images": [r["image"] for r in rows]}


# ---------------------------------------------------------------------------
# training runs


def run_train(cfg: dict) -> dict:
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    _check_keys(cfg, sorted(fields | {"out_dir", "resume"}), ("out_dir",),
                "train")
    resume = bool(cfg.get("resume", True))
    tc = _dataclass_from(
        TrainConfig, {k: v for k, v in cfg.items()
                      if k not in ("out_dir", "resume")}, "train config")
    ckpt = train(tc, cfg["out_dir"], resume=resume)
    return {"out_dir": cfg["out_dir"], "step": ckpt.step,
            "config": dataclasses.asdict(tc), "version": __version__}


# ---------------------------------------------------------------------------
# evaluation runs


EVALUATE_KEYS = ("image_dir", "manifest", "out", "iou_threshold",
                 "confidence_threshold")


def _read_manifest(path: str) -> list[dict]:
    rows = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rows.append(json.loads(line))
    except FileNotFoundError:
        raise ConfigError(f"manifest not found: {path}")
    return [r for r in rows if r.get("kind", "image") == "image"]


def run_evaluate(cfg: dict) -> dict:
    _check_keys(cfg, EVALUATE_KEYS, ("image_dir", "manifest", "out"),
                "evaluate")
    iou_thr = float(cfg.get("iou_threshold", 0.5))
    conf_thr = float(cfg.get("confidence_threshold", 0.0))
    rows = _read_manifest(cfg["manifest"])
    image_dir = cfg["image_dir"]

    listed = {r["image"] for r in rows}
    present = {f for f in os.listdir(image_dir) if f.endswith(".ppm")} \
        if os.path.isdir(image_dir) else set()
    missing = sorted(listed - present)
    unlisted = sorted(present - listed)

    per_image = []
    dets_all, truths_all = [], []
    for row in sorted(rows, key=lambda r: r["image"]):
        if row["image"] in missing:
            continue
        img = read_ppm(os.path.join(image_dir, row["image"]))
        dets = oracle_detect(img)
        truths = [GroundTruth(t["color"], t["shape"], tuple(t["box"]))
                  for t in row.get("truths", [])]
        tp, fp, fn = count_matches(dets, truths, iou_thr, conf_thr)
        stats = image_statistics(img)
        per_image.append({"image": row["image"], "method": row.get("method"),
                          "tp": tp, "fp": fp, "fn": fn,
                          "n_detections": len(dets), "n_truths": len(truths),
                          **stats})
        dets_all.append(dets)
        truths_all.append(truths)

    n_truth = sum(len(t) for t in truths_all)
    if n_truth:
        ap, table = ap_at_50(dets_all, truths_all, iou_threshold=iou_thr)
    else:
        ap, table = 0.0, []
    report = {
        "version": __version__,
        "config": {"subcommand": "evaluate", "image_dir": image_dir,
                   "manifest": cfg["manifest"], "out": cfg["out"],
                   "iou_threshold": iou_thr,
                   "confidence_threshold": conf_thr},
        "n_images": len(per_image), "n_truths": n_truth,
        "ap_at_50": ap, "precision_recall": table,
        "mean_contrast": (sum(p["rms_contrast"] for p in per_image)
                          / len(per_image)) if per_image else 0.0,
        "mean_saturation": (sum(p["mean_saturation"] for p in per_image)
                            / len(per_image)) if per_image else 0.0,
        "per_image": per_image,
        "unmatched": {"missing_images": missing,
                      "unlisted_images": unlisted},
    }
    _dump(report, cfg["out"])
    return report


# ---------------------------------------------------------------------------
# analytic-testbed battery


TESTBED_KEYS = ("out", "eta", "n_chains", "flip_score_sign")


def _battery_tilt(eta: float, n_chains: int, sign: float) -> dict:
    """Langevin chains against the exactly known tilted target."""
    base = GaussianMixture.single([0.0], [0.25])
    target_mean = -eta * 0.25
    rng = np.random.default_rng(202)
    x0 = 0.5 * rng.standard_normal(n_chains)
    score = lambda x, s: sign * (base.score(x) - eta)  # noqa: E731
    x = annealed_langevin(score, x0, [0.5], rng, n_steps=100,
                          delta_scale=0.1)
    tilted = lambda xs: base.density(xs) * np.exp(-eta * xs)  # noqa: E731
    tv = tv_distance(x, tilted, target_mean - 2.0, target_mean + 2.0)
    mean_ok = abs(float(x.mean()) - target_mean) < 0.05
    tv_ok = tv < 0.08
    return {"name": "langevin-tilted-target", "pass": bool(mean_ok and tv_ok),
            "details": {"eta": eta, "target_mean": target_mean,
                        "chain_mean": float(x.mean()),
                        "chain_std": float(x.std()), "tv": tv}}


def _battery_flow(sign: float) -> dict:
    """Flow integration against the exact affine transition map."""
    start = GaussianMixture.single([1.5], [0.25])
    T = 1000
    pts = np.array([0.3, -1.2, 2.0, 0.0])

    def eps_fn(z, t, i):
        u = t / T
        return sign * (-continuous_sigma(u)
                       * start.diffuse(continuous_alpha_bar(u)).score(z))

    scale = lambda u: math.sqrt(continuous_alpha_bar(u))  # noqa: E731
    slope, intercept = flow_affine_map(start, 1.0, 1.0 / T,
                                       continuous_sigma, scale)
    exact = slope * pts + intercept
    errs = []
    for n in (25, 50):
        out = ode_solve(eps_fn, pts, np.linspace(T, 1.0, n + 1), T,
                        kind="heun")
        errs.append(float(np.abs(out - exact).max() / np.abs(exact).max()))
    ratio = errs[0] / errs[1]
    ok = errs[1] < 0.02 and 3.0 < ratio < 5.0
    return {"name": "flow-exact-endpoint", "pass": bool(ok),
            "details": {"rel_err_25": errs[0], "rel_err_50": errs[1],
                        "halving_ratio": ratio}}


def _battery_marginal(n_chains: int) -> dict:
    """Step-by-step forward noising agrees with the closed-form marginal."""
    sched = NoiseSchedule.linear()
    start = GaussianMixture.single([1.5], [0.25])
    rng = np.random.default_rng(303)
    x = start.sample(rng, n_chains)[:, 0]
    for t in range(1, sched.T + 1):
        x = math.sqrt(sched.alphas[t]) * x \
            + math.sqrt(sched.betas[t]) * rng.standard_normal(n_chains)
    closed = start.diffuse(float(sched.alpha_bars[sched.T]))
    se_mean = math.sqrt(closed.variance()[0] / n_chains)
    mean_gap = abs(float(x.mean()) - closed.mean()[0])
    var_gap = abs(float(x.var()) - closed.variance()[0])
    se_var = closed.variance()[0] * math.sqrt(2.0 / (n_chains - 1))
    ok = mean_gap < 4 * se_mean and var_gap < 4 * se_var
    return {"name": "chain-vs-marginal", "pass": bool(ok),
            "details": {"mean_gap": mean_gap, "mean_limit": 4 * se_mean,
                        "var_gap": var_gap, "var_limit": 4 * se_var}}


def _battery_null_tilt(n_chains: int, sign: float) -> dict:
    """With no tilt the chains must reproduce the base density."""
    base = GaussianMixture.single([0.0], [0.25])
    rng = np.random.default_rng(404)
    x0 = 0.5 * rng.standard_normal(n_chains)
    score = lambda x, s: sign * base.score(x)  # noqa: E731
    x = annealed_langevin(score, x0, [0.5], rng, n_steps=100,
                          delta_scale=0.1)
    tv = tv_distance(x, base.density, -2.0, 2.0)
    return {"name": "langevin-null-tilt", "pass": bool(tv < 0.05),
            "details": {"tv": tv}}


def run_testbed(cfg: dict) -> dict:
    _check_keys(cfg, TESTBED_KEYS, ("out",), "testbed")
    eta = float(cfg.get("eta", 2.0))
    n_chains = int(cfg.get("n_chains", 20000))
    sign = -1.0 if cfg.get("flip_score_sign", False) else 1.0
    checks = [_battery_marginal(n_chains), _battery_flow(sign),
              _battery_tilt(eta, n_chains, sign),
              _battery_null_tilt(n_chains, sign)]
    report = {"version": __version__,
              "config": {"subcommand": "testbed", "out": cfg["out"],
                         "eta": eta, "n_chains": n_chains,
                         "flip_score_sign": sign < 0},
              "checks": checks,
              "pass": all(c["pass"] for c in checks)}
    _dump(report, cfg["out"])
    return report


# ---------------------------------------------------------------------------
# ablation matrix


ABLATE_KEYS = ("out_dir", "checkpoint", "scene_seeds", "scenes", "seeds",
               "methods", "overrides", "guidance", "sampler", "png")


def run_ablate(cfg: dict) -> dict:
    _check_keys(cfg, ABLATE_KEYS, ("out_dir", "checkpoint"), "ablate")
    scenes = _scenes_from_config(cfg, "ablate")
    seeds = [int(s) for s in cfg.get("seeds", [0])]
    methods = list(cfg.get("methods", METHODS))
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method '{m}' for ablate")
    overrides = dict(cfg.get("overrides", {}))
    for m in overrides:
        if m not in methods:
            raise ConfigError(f"override for unknown method '{m}'")
    base_g = dict(cfg.get("guidance", {}))
    if "method" in base_g:
        raise ConfigError("ablate sets guidance.method per matrix entry; "
                          "use the 'methods' list")
    scfg = _sampler_from(cfg)
    png = bool(cfg.get("png", False))
    state = _load_state(cfg["checkpoint"])

    resolved = {"subcommand": "ablate", "out_dir": cfg["out_dir"],
                "checkpoint": cfg["checkpoint"],
                "scene_seeds": [int(s) for s in cfg.get("scene_seeds", [])],
                "scenes": cfg.get("scenes", []), "seeds": seeds,
                "methods": methods, "overrides": overrides,
                "guidance": base_g, "sampler": dataclasses.asdict(scfg),
                "png": png}

    summary = {}
    for method in methods:
        gdict = {**base_g, **overrides.get(method, {}), "method": method}
        gcfg = _dataclass_from(GuidanceConfig, gdict,
                               f"guidance config for {method}")
        mdir = os.path.join(cfg["out_dir"], method)
        rows = _run_matrix(mdir, state, scenes, seeds, gcfg, scfg, png)
        _write_manifest(os.path.join(mdir, "manifest.jsonl"),
                        {**resolved, "method": method}, rows)
        dets_all, truths_all, stats = [], [], []
        for row in rows:
            img = read_ppm(os.path.join(mdir, row["image"]))
            dets_all.append(oracle_detect(img))
            truths_all.append([GroundTruth(t["color"], t["shape"],
                                           tuple(t["box"]))
                               for t in row["truths"]])
            stats.append(image_statistics(img))
        n_truth = sum(len(t) for t in truths_all)
        ap = ap_at_50(dets_all, truths_all)[0] if n_truth else 0.0
        summary[method] = {
            "ap_at_50": ap, "n_images": len(rows),
            "guidance": dataclasses.asdict(gcfg),
            "mean_contrast": sum(s["rms_contrast"] for s in stats)
            / max(len(stats), 1),
            "mean_saturation": sum(s["mean_saturation"] for s in stats)
            / max(len(stats), 1)}

    report = {"version": __version__, "config": resolved,
              "methods": summary}
    _dump(report, os.path.join(cfg["out_dir"], "ablation_report.json"))
    return report


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ilgd",
        description="Layout-guided toy diffusion: train, sample, evaluate, "
                    "testbed, ablate.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, blurb in (
            ("train", "fit the denoiser and write checkpoints"),
            ("sample", "draw guided samples for layouts"),
            ("evaluate", "score generated images against a manifest"),
            ("testbed", "run the analytic sampler checks"),
            ("ablate", "run the guidance-method matrix")):
        p = sub.add_parser(name, help=blurb)
        p.add_argument("--config", required=True,
                       help="path to the JSON run config")
    args = parser.parse_args(argv)
    runner = {"train": run_train, "sample": run_sample,
              "evaluate": run_evaluate, "testbed": run_testbed,
              "ablate": run_ablate}[args.subcommand]
    try:
        result = runner(_load_json(args.config))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.subcommand == "testbed" and not result["pass"]:
        failed = [c["name"] for c in result["checks"] if not c["pass"]]
        print(f"testbed checks failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
