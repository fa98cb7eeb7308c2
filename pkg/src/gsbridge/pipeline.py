"""File-based pipeline stages from synthetic scenes to evaluated reconstructions.

Every stage reads its inputs from earlier stage directories under one output
root, writes artifacts plus ``manifest.json`` (inputs and outputs with their
SHA-256, config hash, seed) into its own directory, and records wall time
separately in ``timing.json`` so the artifact tree itself stays reproducible.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np

from .bridge import (
    CHURN_STEP_RATIO,
    GUIDANCE,
    BridgeBatch,
    BridgeSchedule,
    DenoiserNet,
    LatentScaler,
    NetScore,
    occupancy_binarize,
    sample_reverse_sde,
    train_bridge,
)
from .core import (
    GaussianSet,
    Image,
    LatentGrid,
    LossWeights,
    SmplMesh,
    SparseVoxelTensor,
    devoxelize,
    is_power_of_two,
    voxelize,
)
from .io import (
    SCENE_KINDS,
    camera_from_dict,
    camera_to_dict,
    orbit_cameras,
    read_checkpoint,
    read_config,
    read_depth_png,
    read_latent,
    read_obj,
    read_ply,
    read_png,
    read_tensor,
    surface_mesh,
    synth_scene,
    write_checkpoint,
    write_depth_png,
    write_latent,
    write_obj,
    write_ply,
    write_png,
    write_tensor,
)
from .metrics import chamfer, estimate_normals, normal_error, p2s
from .render import psnr, rasterize, ssim
from .unify import (
    DepthUNet,
    SmplUNet,
    backproject_depth,
    color_smpl_by_projection,
    depth_targets,
    depth_unet_input,
    predict_gaussians,
    smpl_unet_input,
    train_attribute_unet,
)
from .vae import (
    Refiner,
    SparseVAE,
    VaeConfig,
    VaeSample,
    mean_latent,
    reconstruct,
    train_refiner,
    train_vae,
)

STAGES = ("synth", "voxelize", "train-unify", "train-vae", "encode", "train-bridge",
          "sample", "decode", "render", "eval")
# Directory written by each stage.
STAGE_DIRS = {
    "synth": "synth", "voxelize": "voxelize", "train-unify": "unify", "train-vae": "vae",
    "encode": "encode", "train-bridge": "bridge", "sample": "sample", "decode": "decode",
    "render": "render", "eval": "eval",
}
MODALITIES = ("gt", "depth", "smpl")
NORMAL_NEIGHBOURS = 8


class ConfigError(ValueError):
    """Schema violation; the message names the offending field."""


class PipelineError(RuntimeError):
    """A stage cannot run, typically because an upstream artifact is missing."""


# -- configuration ----------------------------------------------------------------------


def _pos_int(v):
    return isinstance(v, int) and not isinstance(v, bool) and v > 0, "a positive integer"


def _nonneg_int(v):
    return isinstance(v, int) and not isinstance(v, bool) and v >= 0, "a non-negative integer"


def _any_int(v):
    return isinstance(v, int) and not isinstance(v, bool), "an integer"


def _pos_float(v):
    return _is_number(v) and v > 0, "a positive number"


def _nonneg_float(v):
    return _is_number(v) and v >= 0, "a non-negative number"


def _unit_float(v):
    return _is_number(v) and 0 <= v <= 1, "a number in [0, 1]"


def _resolution(v):
    return isinstance(v, int) and not isinstance(v, bool) and v >= 8 and is_power_of_two(v), \
        "a power of two >= 8"


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


SCHEMA = {
    "seed": _any_int,
    "resolution": _resolution,
    "synth": {"views": _pos_int, "image_size": _pos_int},
    "unify": {"steps": _pos_int, "lr": _pos_float, "width": _pos_int},
    "vae": {"steps": _pos_int, "lr": _pos_float, "warmup": _nonneg_int, "latent_channels": _pos_int,
            "refine_steps": _nonneg_int, "refine_lr": _pos_float},
    "bridge": {"steps": _pos_int, "lr": _pos_float, "width": _pos_int, "batch_size": _pos_int},
    "sample": {"steps": _pos_int, "churn_ratio": _unit_float, "guidance": _nonneg_float},
}

_BASE = {
    "seed": 0,
    "resolution": 64,
    "scenes": [{"kind": "sphere", "seed": 0}],
    "synth": {"views": 4, "image_size": 32},
    "unify": {"steps": 300, "lr": 1e-2, "width": 16},
    "vae": {"steps": 3000, "lr": 2e-3, "warmup": 100, "latent_channels": 4,
            "refine_steps": 0, "refine_lr": 1e-3},
    "bridge": {"steps": 3000, "lr": 1e-3, "width": 16, "batch_size": 4},
    "sample": {"steps": 100, "churn_ratio": CHURN_STEP_RATIO, "guidance": GUIDANCE},
}


def _preset(**sections):
    cfg = copy.deepcopy(_BASE)
    for key, value in sections.items():
        if isinstance(value, dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


PRESETS = {
    # One coarse sphere with short schedules: an end-to-end smoke run in about a minute.
    "desk-sphere": _preset(
        resolution=32,
        synth={"views": 3, "image_size": 24},
        unify={"steps": 40},
        vae={"steps": 120, "warmup": 30, "latent_channels": 2},
        bridge={"steps": 60, "width": 8, "batch_size": 1},
        sample={"steps": 20},
    ),
    # Four training scenes at R = 64, r = 8, F = 4.
    "desk-4": _preset(
        scenes=[{"kind": "sphere", "seed": 0}, {"kind": "box", "seed": 1},
                {"kind": "capsule-person", "seed": 2}, {"kind": "sphere", "seed": 3}],
        bridge={"steps": 2000},
    ),
}
DEFAULT_PRESET = "desk-sphere"


def validate_config(cfg: dict) -> dict:
    """Check every field against ``SCHEMA``; returns ``cfg`` or raises ``ConfigError``."""
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    allowed = set(SCHEMA) | {"scenes"}
    for key in cfg:
        if key not in allowed:
            raise ConfigError(f"{key}: unknown field (expected one of {sorted(allowed)})")
    for key in allowed:
        if key not in cfg:
            raise ConfigError(f"{key}: missing")
    for key, rule in SCHEMA.items():
        if isinstance(rule, dict):
            section = cfg[key]
            if not isinstance(section, dict):
                raise ConfigError(f"{key}: expected an object")
            for field in section:
                if field not in rule:
                    raise ConfigError(f"{key}.{field}: unknown field (expected one of {sorted(rule)})")
            for field, check in rule.items():
                if field not in section:
                    raise ConfigError(f"{key}.{field}: missing")
                ok, what = check(section[field])
                if not ok:
                    raise ConfigError(f"{key}.{field}: expected {what}, got {section[field]!r}")
        else:
            ok, what = rule(cfg[key])
            if not ok:
                raise ConfigError(f"{key}: expected {what}, got {cfg[key]!r}")
    scenes = cfg["scenes"]
    if not isinstance(scenes, list) or not scenes:
        raise ConfigError("scenes: expected a non-empty list")
    for i, sc in enumerate(scenes):
        if not isinstance(sc, dict) or set(sc) != {"kind", "seed"}:
            raise ConfigError(f"scenes[{i}]: expected an object with exactly 'kind' and 'seed'")
        if sc["kind"] not in SCENE_KINDS:
            raise ConfigError(f"scenes[{i}].kind: expected one of {list(SCENE_KINDS)}, got {sc['kind']!r}")
        if not _any_int(sc["seed"])[0]:
            raise ConfigError(f"scenes[{i}].seed: expected an integer, got {sc['seed']!r}")
    return cfg


def merge_config(base: dict, override: dict) -> dict:
    """Recursive update; sections in ``override`` may be partial."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def preset_config(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"preset: unknown preset {name!r} (choose from {sorted(PRESETS)})")
    return copy.deepcopy(PRESETS[name])


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# -- run bookkeeping -------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _float_list(values) -> list[float]:
    return [float(v) for v in values]


class Run:
    """One output root; tracks the files a stage reads and writes."""

    def __init__(self, out, cfg: dict):
        self.out = Path(out)
        self.cfg = validate_config(cfg)

    @property
    def seed(self) -> int:
        return self.cfg["seed"]

    def scene_names(self) -> list[str]:
        return [f"scene{i}_{sc['kind']}" for i, sc in enumerate(self.cfg["scenes"])]

    def stage_dir(self, stage: str) -> Path:
        return self.out / STAGE_DIRS[stage]

    def rng(self, stage: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, STAGES.index(stage)])

    def need(self, stage: str, rel: str, inputs: list) -> Path:
        """Path of an upstream artifact; raises naming the subcommand that produces it."""
        path = self.stage_dir(stage) / rel
        if not path.exists():
            raise PipelineError(f"missing {path}: run `gsbridge {stage} --out {self.out}` first")
        inputs.append(path)
        return path


def _finish(run: Run, stage: str, inputs: list, outputs: list, started: float, extra: dict | None = None):
    d = run.stage_dir(stage)

    def rel(p):
        return str(Path(p).relative_to(run.out))

    manifest = {
        "stage": stage,
        "seed": run.seed,
        "config_hash": config_hash(run.cfg),
        "config": run.cfg,
        "inputs": {rel(p): _sha256(Path(p)) for p in sorted(set(inputs))},
        "outputs": {rel(p): _sha256(Path(p)) for p in sorted(set(outputs))},
    }
    if extra:
        manifest.update(extra)
    _write_json(d / "manifest.json", manifest)
    _write_json(d / "timing.json", {"wall_time_s": round(time.perf_counter() - started, 3)})
    return manifest


def _begin(run: Run, stage: str) -> tuple[Path, float]:
    d = run.stage_dir(stage)
    d.mkdir(parents=True, exist_ok=True)
    return d, time.perf_counter()


# -- stages -------------------------------------------------------------------------------------


def stage_synth(run: Run) -> dict:
    """Ground-truth Gaussians and surface, proxy body mesh, training views and one held-out view per scene."""
    d, t0 = _begin(run, "synth")
    cfg = run.cfg
    views = cfg["synth"]["views"]
    outputs = []
    for name, sc in zip(run.scene_names(), cfg["scenes"]):
        sd = d / name
        sd.mkdir(exist_ok=True)
        scene = synth_scene(sc["kind"], views + 1, sc["seed"] + 1000 * run.seed,
                            cfg["resolution"], cfg["synth"]["image_size"])
        write_ply(sd / "gt.ply", scene.gaussians)
        write_obj(sd / "proxy.obj", scene.mesh)
        write_obj(sd / "surface.obj", surface_mesh(sc["kind"]))
        cams = []
        for j, v in enumerate(scene.views):
            write_png(sd / f"view{j}.png", v.image)
            write_depth_png(sd / f"view{j}_depth.png", v.depth)
            cams.append(camera_to_dict(v.camera))
            outputs += [sd / f"view{j}.png", sd / f"view{j}_depth.png"]
        _write_json(sd / "cameras.json", {"cameras": cams, "train": list(range(views)), "heldout": views})
        outputs += [sd / "gt.ply", sd / "proxy.obj", sd / "surface.obj", sd / "cameras.json"]
    _write_json(run.out / "config.json", cfg)
    return _finish(run, "synth", [], outputs + [run.out / "config.json"], t0)


def _cameras(run: Run, name: str, inputs: list):
    meta = read_config(run.need("synth", f"{name}/cameras.json", inputs))
    return [camera_from_dict(c) for c in meta["cameras"]], meta["train"], meta["heldout"]


def _views(run: Run, name: str, indices, inputs: list):
    cams, _, _ = _cameras(run, name, inputs)
    return [(cams[j], read_png(run.need("synth", f"{name}/view{j}.png", inputs))) for j in indices]


def stage_voxelize(run: Run) -> dict:
    d, t0 = _begin(run, "voxelize")
    inputs, outputs = [], []
    for name in run.scene_names():
        gt = read_ply(run.need("synth", f"{name}/gt.ply", inputs))
        x = voxelize(gt, run.cfg["resolution"])
        write_tensor(d / f"{name}.jgat", _tensor_matrix(x))
        outputs.append(d / f"{name}.jgat")
    return _finish(run, "voxelize", inputs, outputs, t0)


def _tensor_matrix(x: SparseVoxelTensor) -> np.ndarray:
    return np.concatenate([x.coords.astype(np.float64), x.feats], axis=1)


def _tensor_from_matrix(m: np.ndarray, resolution: int) -> SparseVoxelTensor:
    return SparseVoxelTensor(np.rint(m[:, :3]).astype(np.int64), m[:, 3:], resolution)


def _load_gt_tensor(run: Run, name: str, inputs: list) -> SparseVoxelTensor:
    return _tensor_from_matrix(read_tensor(run.need("voxelize", f"{name}.jgat", inputs)), run.cfg["resolution"])


def _unify_inputs(run: Run, name: str, inputs: list):
    """Depth-path and body-mesh-path sparse inputs from the first training view."""
    res = run.cfg["resolution"]
    cams, train, _ = _cameras(run, name, inputs)
    j = train[0]
    rgb = read_png(run.need("synth", f"{name}/view{j}.png", inputs))
    depth = read_depth_png(run.need("synth", f"{name}/view{j}_depth.png", inputs))
    cloud = backproject_depth(depth, rgb, cams[j])
    dx, dpts = depth_unet_input(cloud, res)
    mesh = read_obj(run.need("synth", f"{name}/proxy.obj", inputs))
    colored, _ = color_smpl_by_projection(mesh, rgb, depth, cams[j], resolution=res)
    sx, spts = smpl_unet_input(colored, res)
    return (dx, dpts), (sx, spts)


def stage_train_unify(run: Run) -> dict:
    """Fit the depth and body-mesh attribute U-Nets, then write each scene's unified Gaussians."""
    d, t0 = _begin(run, "train-unify")
    ucfg = run.cfg["unify"]
    inputs, outputs = [], []
    depth_samples, smpl_samples, xs = [], [], []
    for name in run.scene_names():
        gt = read_ply(run.need("synth", f"{name}/gt.ply", inputs))
        (dx, dpts), (sx, spts) = _unify_inputs(run, name, inputs)
        depth_samples.append((dx, depth_targets(dx, dpts, gt)))
        smpl_samples.append((sx, depth_targets(sx, spts, gt)))
        xs.append((dx, sx))
    rng = run.rng("train-unify")
    nets = {"depth": DepthUNet(rng, ucfg["width"]), "smpl": SmplUNet(rng, ucfg["width"])}
    history = {}
    for key, samples in (("depth", depth_samples), ("smpl", smpl_samples)):
        history[key] = _float_list(train_attribute_unet(nets[key], samples, ucfg["steps"], ucfg["lr"]))
        write_checkpoint(d / f"{key}_unet.ckpt", nets[key].state_dict(),
                         {"width": ucfg["width"], "iteration": ucfg["steps"], "seed": run.seed})
        outputs += [d / f"{key}_unet.ckpt", d / f"{key}_unet.ckpt.json"]
    for name, (dx, sx) in zip(run.scene_names(), xs):
        for key, x in (("depth", dx), ("smpl", sx)):
            write_ply(d / f"{name}_{key}.ply", predict_gaussians(nets[key], x))
            outputs.append(d / f"{name}_{key}.ply")
    _write_json(d / "history.json", history)
    outputs.append(d / "history.json")
    return _finish(run, "train-unify", inputs, outputs, t0)


def _vae_config(run: Run) -> VaeConfig:
    v = run.cfg["vae"]
    return VaeConfig(resolution=run.cfg["resolution"], latent_channels=v["latent_channels"],
                     warmup=v["warmup"], weights=LossWeights())


def stage_train_vae(run: Run) -> dict:
    """Train the sparse VAE on every scene (and optionally the refiner on its reconstructions)."""
    d, t0 = _begin(run, "train-vae")
    v = run.cfg["vae"]
    inputs, outputs = [], []
    samples = []
    for name in run.scene_names():
        x = _load_gt_tensor(run, name, inputs)
        _, train, _ = _cameras(run, name, inputs)
        samples.append(VaeSample(x, _views(run, name, train, inputs)))
    cfg = _vae_config(run)
    model = SparseVAE(cfg, run.rng("train-vae"))
    hist = train_vae(model, samples, v["steps"], lr=v["lr"], seed=run.seed)
    meta = {"resolution": cfg.resolution, "latent_channels": cfg.latent_channels, "warmup": cfg.warmup,
            "iteration": v["steps"], "seed": run.seed}
    write_checkpoint(d / "vae.ckpt", model.state_dict(), meta)
    outputs += [d / "vae.ckpt", d / "vae.ckpt.json"]
    history = {key: [float(getattr(r, key)) for r in hist] for key in ("total", "kl", "occ", "attr", "render")}
    if v["refine_steps"]:
        refiner = Refiner(run.rng("train-vae"))
        pairs = [(reconstruct(model, s.x), s.x, s.views) for s in samples]
        history["refine"] = _float_list(train_refiner(refiner, pairs, v["refine_steps"], cfg.weights,
                                                      lr=v["refine_lr"]))
        write_checkpoint(d / "refiner.ckpt", refiner.state_dict(),
                         {"iteration": v["refine_steps"], "seed": run.seed})
        outputs += [d / "refiner.ckpt", d / "refiner.ckpt.json"]
    _write_json(d / "history.json", history)
    outputs.append(d / "history.json")
    return _finish(run, "train-vae", inputs, outputs, t0)


def load_vae(run: Run, inputs: list) -> tuple[SparseVAE, Refiner | None]:
    arrays, meta = read_checkpoint(run.need("train-vae", "vae.ckpt", inputs))
    cfg = VaeConfig(resolution=meta["resolution"], latent_channels=meta["latent_channels"], warmup=meta["warmup"])
    model = SparseVAE(cfg, np.random.default_rng(0))
    model.load_state_dict(arrays)
    refiner = None
    if (run.stage_dir("train-vae") / "refiner.ckpt").exists():
        arrays, _ = read_checkpoint(run.need("train-vae", "refiner.ckpt", inputs))
        refiner = Refiner(np.random.default_rng(0))
        refiner.load_state_dict(arrays)
    return model, refiner


def stage_encode(run: Run) -> dict:
    """Mean latents of the GT, depth-derived and body-mesh-derived Gaussians per scene."""
    d, t0 = _begin(run, "encode")
    inputs, outputs = [], []
    model, _ = load_vae(run, inputs)
    res = run.cfg["resolution"]
    for name in run.scene_names():
        sets = {
            "gt": _load_gt_tensor(run, name, inputs),
            "depth": voxelize(read_ply(run.need("train-unify", f"{name}_depth.ply", inputs)), res),
            "smpl": voxelize(read_ply(run.need("train-unify", f"{name}_smpl.ply", inputs)), res),
        }
        for key, x in sets.items():
            write_latent(d / f"{name}_{key}.jgat", mean_latent(model.encode(x)))
            outputs.append(d / f"{name}_{key}.jgat")
    return _finish(run, "encode", inputs, outputs, t0)


def _latents(run: Run, name: str, inputs: list) -> dict[str, LatentGrid]:
    return {k: read_latent(run.need("encode", f"{name}_{k}.jgat", inputs)) for k in MODALITIES}


def stage_train_bridge(run: Run) -> dict:
    """Standardise latents and train the denoiser that bridges depth latents to GT latents."""
    d, t0 = _begin(run, "train-bridge")
    b = run.cfg["bridge"]
    inputs, outputs = [], []
    lat = [_latents(run, name, inputs) for name in run.scene_names()]
    scaler = LatentScaler.fit([g["gt"] for g in lat])
    data = [BridgeBatch(scaler.encode(g["gt"])[None], scaler.encode(g["depth"])[None],
                        scaler.encode(g["smpl"])[None]) for g in lat]
    sched = BridgeSchedule()
    channels = data[0].x0.shape[-1]
    net = DenoiserNet(channels, run.rng("train-bridge"), width=b["width"])
    hist = train_bridge(net, data, sched, b["steps"], lr=b["lr"], seed=run.seed, batch_size=b["batch_size"])
    arrays = dict(net.state_dict())
    arrays["scaler.mean"], arrays["scaler.std"] = scaler.mean, scaler.std
    meta = {"channels": channels, "width": b["width"], "schedule": sched.to_dict(),
            "iteration": b["steps"], "seed": run.seed}
    write_checkpoint(d / "bridge.ckpt", arrays, meta)
    _write_json(d / "history.json", {"loss": _float_list(hist)})
    outputs += [d / "bridge.ckpt", d / "bridge.ckpt.json", d / "history.json"]
    return _finish(run, "train-bridge", inputs, outputs, t0)


def load_bridge(run: Run, inputs: list) -> tuple[DenoiserNet, LatentScaler, BridgeSchedule]:
    arrays, meta = read_checkpoint(run.need("train-bridge", "bridge.ckpt", inputs))
    scaler = LatentScaler(arrays.pop("scaler.mean"), arrays.pop("scaler.std"))
    net = DenoiserNet(meta["channels"], np.random.default_rng(0), width=meta["width"])
    net.load_state_dict(arrays)
    return net, scaler, BridgeSchedule.from_dict(meta["schedule"])


def stage_sample(run: Run) -> dict:
    """Reverse bridge SDE from each scene's depth latent, conditioned on its body-mesh latent."""
    d, t0 = _begin(run, "sample")
    s = run.cfg["sample"]
    inputs, outputs = [], []
    net, scaler, sched = load_bridge(run, inputs)
    score = NetScore(net, sched)
    for i, name in enumerate(run.scene_names()):
        lat = _latents(run, name, inputs)
        y = scaler.encode(lat["depth"])[None]
        cond = scaler.encode(lat["smpl"])[None]
        state = sample_reverse_sde(score, y, cond, sched, churn_ratio=s["churn_ratio"], guidance=s["guidance"],
                                   seed=1000 * run.seed + i, steps=s["steps"])
        write_tensor(d / f"{name}.jgat", state[0])
        outputs.append(d / f"{name}.jgat")
    _write_json(d / "sampler.json", {"steps": s["steps"], "churn_step_ratio": s["churn_ratio"],
                                     "guidance": s["guidance"], "schedule": sched.to_dict(), "seed": run.seed})
    outputs.append(d / "sampler.json")
    return _finish(run, "sample", inputs, outputs, t0)


def decode_state(model: SparseVAE, refiner: Refiner | None, scaler: LatentScaler,
                 state: np.ndarray) -> tuple[GaussianSet, bool]:
    """Binarise occupancy, undo standardisation, decode; returns ``(gaussians, empty)``."""
    grid, empty = occupancy_binarize(state)
    if empty:
        return GaussianSet.empty(), True
    feats = scaler.decode(state).features * grid.occupancy[..., None]
    x = model.decode(LatentGrid(feats, grid.occupancy)).tensor
    if x.is_empty:
        return GaussianSet.empty(), True
    if refiner is not None:
        x = refiner.forward(x)
    return devoxelize(x), False


def stage_decode(run: Run) -> dict:
    d, t0 = _begin(run, "decode")
    inputs, outputs = [], []
    model, refiner = load_vae(run, inputs)
    _, scaler, _ = load_bridge(run, inputs)
    empty = {}
    for name in run.scene_names():
        state = read_tensor(run.need("sample", f"{name}.jgat", inputs))
        g, empty[name] = decode_state(model, refiner, scaler, state)
        write_ply(d / f"{name}.ply", g)
        outputs.append(d / f"{name}.ply")
    return _finish(run, "decode", inputs, outputs, t0, {"empty": empty})


def stage_render(run: Run) -> dict:
    """Render each decoded scene from its held-out camera."""
    d, t0 = _begin(run, "render")
    inputs, outputs = [], []
    for name in run.scene_names():
        g = read_ply(run.need("decode", f"{name}.ply", inputs))
        cams, _, held = _cameras(run, name, inputs)
        img = render_image(g, cams[held])
        write_png(d / f"{name}_heldout.png", img)
        outputs.append(d / f"{name}_heldout.png")
    return _finish(run, "render", inputs, outputs, t0)


def render_image(g: GaussianSet, cam) -> Image:
    if len(g) == 0:
        return Image(np.ones((cam.height, cam.width, 3)))
    return Image(np.clip(rasterize(g, cam, keep_cache=False).image, 0.0, 1.0))


def point_metrics(pred: GaussianSet, gt: GaussianSet, surface: SmplMesh | None = None) -> dict:
    """Chamfer distance, distance to ``surface`` and normal error of the Gaussian centres.

    Every value is None when ``pred`` is empty; ``p2s`` is None without a surface.
    """
    if len(pred) == 0:
        return {"cd": None, "p2s": None, "normal_deg": None, "count": 0}
    out = {"cd": chamfer(pred.positions, gt.positions), "count": len(pred),
           "p2s": None if surface is None else p2s(pred.positions, surface.vertices, surface.faces)}
    k = min(NORMAL_NEIGHBOURS, len(pred) - 1, len(gt) - 1)
    if k >= 3:
        pn, _ = estimate_normals(pred.positions, k)
        gn, _ = estimate_normals(gt.positions, k)
        out["normal_deg"] = normal_error(pred.positions, pn, gt.positions, gn)
    else:
        out["normal_deg"] = None
    return out


def image_metrics(pred, gt) -> dict:
    return {"psnr": psnr(pred.pixels, gt.pixels), "ssim": ssim(pred.pixels, gt.pixels)}


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def stage_eval(run: Run, report: bool = True) -> dict:
    """Per-scene and mean metrics in ``metrics.json``, plus report figures."""
    d, t0 = _begin(run, "eval")
    inputs, outputs = [], []
    scenes = {}
    images = {}
    for name in run.scene_names():
        pred = read_ply(run.need("decode", f"{name}.ply", inputs))
        gt = read_ply(run.need("synth", f"{name}/gt.ply", inputs))
        surface = read_obj(run.need("synth", f"{name}/surface.obj", inputs))
        _, _, held = _cameras(run, name, inputs)
        pred_img = read_png(run.need("render", f"{name}_heldout.png", inputs))
        gt_img = read_png(run.need("synth", f"{name}/view{held}.png", inputs))
        scenes[name] = {**point_metrics(pred, gt, surface), **image_metrics(pred_img, gt_img)}
        images[name] = (gt_img.pixels, pred_img.pixels)
    keys = ("cd", "p2s", "normal_deg", "psnr", "ssim")
    metrics = {"scenes": scenes, "mean": {k: _mean(s[k] for s in scenes.values()) for k in keys}}
    _write_json(d / "metrics.json", metrics)
    outputs.append(d / "metrics.json")
    if report:
        from .report import write_report

        histories = {}
        for stage in ("train-unify", "train-vae", "train-bridge"):
            p = run.stage_dir(stage) / "history.json"
            if p.exists():
                inputs.append(p)
                histories[stage] = json.loads(p.read_text())
        outputs += write_report(d / "report", metrics, images, histories)
    _finish(run, "eval", inputs, outputs, t0)
    return metrics


STAGE_FUNCS = {
    "synth": stage_synth, "voxelize": stage_voxelize, "train-unify": stage_train_unify,
    "train-vae": stage_train_vae, "encode": stage_encode, "train-bridge": stage_train_bridge,
    "sample": stage_sample, "decode": stage_decode, "render": stage_render, "eval": stage_eval,
}


def run_all(run: Run, log=None) -> dict:
    """Every stage in order; returns the eval metrics."""
    result = None
    for stage in STAGES:
        if log is not None:
            log(f"[{stage}]")
        result = STAGE_FUNCS[stage](run)
    return result


def compare_pair(pred_ply, gt_ply, out, camera=None, mesh_obj=None) -> dict:
    """Metrics between two PLY files, rendered from ``camera`` (a default orbit view otherwise).

    ``mesh_obj`` is an optional reference surface for the point-to-surface distance.
    """
    pred, gt = read_ply(pred_ply), read_ply(gt_ply)
    surface = read_obj(mesh_obj) if mesh_obj is not None else None
    cam = camera if camera is not None else orbit_cameras(1, 0)[0]
    metrics = {**point_metrics(pred, gt, surface), **image_metrics(render_image(pred, cam), render_image(gt, cam))}
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", metrics)
    return metrics


__all__ = [
    "ConfigError", "DEFAULT_PRESET", "PRESETS", "PipelineError", "Run", "SCHEMA",
    "STAGES", "STAGE_DIRS", "STAGE_FUNCS", "compare_pair", "config_hash", "decode_state", "image_metrics",
    "load_bridge", "load_vae", "merge_config", "point_metrics", "preset_config", "render_image", "run_all",
    "validate_config",
]
