"""Experiment drivers behind the command-line interface.

Each driver writes into one run directory and finishes by writing
``manifest.json`` (resolved config, its SHA-256, software versions and the
SHA-256 of every output file).  Nothing time-dependent is recorded, so reruns
with the same seed reproduce the directory bit for bit.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .encoding import (
    DEFAULT_SCALE,
    DEFAULT_TEMPERATURE,
    EncoderSpec,
    EncodingConfig,
    FAMILIES,
    make_encoder,
    sample_basis_anisotropic,
    sample_basis_isotropic,
    gaussian_kernel,
)
from .mlp import TrainConfig, predict_r2, save_checkpoint, train, write_history
from .sampling import RngStream, random_scale_vector
from .shapes import build_dataset, save_dataset
from .similarity import GridSpec, compute_map, radial_mismatch, write_csv, write_pgm
from .stats import bootstrap_metric, format_table, rank_encoders, summaries_to_csv, welch_t_test

TARGETS = ("min_fd", "max_fd")
JOBS_ENV = "ANISOFEAT_JOBS"

# stream labels under the root seed
_DATA_STREAM, _BOOT_STREAM, _SEARCH_STREAM = 1, 3, 4

DEFAULT_CONFIG = {
    "seed": 42,
    "out": "runs/anisofeat",
    "jobs": 1,
    "encoders": list(FAMILIES),
    "encoder": {"dims": 192, "temperature": DEFAULT_TEMPERATURE, "scale": DEFAULT_SCALE, "scales": None},
    "dataset": {
        "n": 1000,
        "anisotropy": [3, 5],
        "axis": 0,
        "grid": [32, 32, 32],
        "split": [0.7, 0.15, 0.15],
        "n_directions": 2000,
        "save": True,
    },
    "training": {
        "epochs": 200,
        "batch_size": 64,
        "learning_rate": 1e-3,
        "hidden": 256,
        "position_unit": None,
    },
    "evaluation": {"n_boot": 100, "alpha": 0.05},
    "search": {"n_trials": 50, "low": 0.05, "high": 5.0, "epoch_fraction": 0.75, "anisotropy": 5},
}

_POS_NUM = {"type": "number", "exclusiveMinimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "out": {"type": "string", "minLength": 1},
        "jobs": _POS_INT,
        "encoders": {
            "type": "array",
            "items": {"enum": list(FAMILIES)},
            "minItems": 1,
            "uniqueItems": True,
        },
        "encoder": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dims": {"type": "integer", "minimum": 2, "multipleOf": 2},
                "temperature": _POS_NUM,
                "scale": _POS_NUM,
                "scales": {"anyOf": [{"type": "null"}, {"type": "array", "items": _POS_NUM, "minItems": 3, "maxItems": 3}]},
            },
        },
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": {"type": "integer", "minimum": 10},
                "anisotropy": {"type": "array", "items": _POS_INT, "minItems": 1},
                "axis": {"enum": [0, 1, 2]},
                "grid": {"type": "array", "items": {"type": "integer", "minimum": 8, "maximum": 64}, "minItems": 3, "maxItems": 3},
                "split": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3},
                "n_directions": {"type": "integer", "minimum": 500},
                "save": {"type": "boolean"},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": _POS_INT,
                "batch_size": _POS_INT,
                "learning_rate": _POS_NUM,
                "hidden": _POS_INT,
                "position_unit": {"anyOf": [{"type": "null"}, _POS_NUM]},
            },
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"n_boot": {"type": "integer", "minimum": 2}, "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
        },
        "search": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_trials": _POS_INT,
                "low": _POS_NUM,
                "high": _POS_NUM,
                "epoch_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "anisotropy": _POS_INT,
            },
        },
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    s = cfg.get("search", {})
    if "low" in s and "high" in s and s["low"] > s["high"]:
        raise ConfigError("search.low must not exceed search.high")
    if "split" in cfg.get("dataset", {}) and not math.isclose(sum(cfg["dataset"]["split"]), 1.0, abs_tol=1e-9):
        raise ConfigError("dataset.split must sum to 1")


def resolve_config(user: dict | None = None, overrides: dict | None = None) -> dict:
    """Validate the user document, then layer defaults < user < overrides."""
    user = user or {}
    validate_config(user)
    cfg = _merge(DEFAULT_CONFIG, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def load_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None


# execution details that must not change results
_RUNTIME_KEYS = ("jobs", "out")


def recorded_config(cfg: dict) -> dict:
    """The config as written to disk: everything except runtime-only keys."""
    return {k: v for k, v in cfg.items() if k not in _RUNTIME_KEYS}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: dict) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "config": recorded_config(cfg),
        "config_sha256": config_hash(recorded_config(cfg)),
        "software": {
            "anisofeat": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _pool_map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(min(jobs, len(items))) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


# -- similarity maps ----------------------------------------------------------


def parse_grid(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"grid must look like 14x14, got {text!r}") from None
    if not shape or any(s < 1 for s in shape):
        raise ConfigError(f"invalid grid {text!r}")
    return shape


def cmd_simmap(
    out,
    grid: str = "14x14",
    encoder: str = "afpe",
    scales=None,
    temperature: float = DEFAULT_TEMPERATURE,
    scale: float = DEFAULT_SCALE,
    dims: int = 256,
    seed: int = 42,
) -> dict:
    """Similarity map relative to the central patch, as PGM and CSV."""
    shape = parse_grid(grid)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = EncodingConfig(dims, len(shape), seed)
    enc = make_encoder(encoder, cfg, temperature=temperature, scale=scale, scales=scales, grid_shape=shape)
    smap = compute_map(enc, GridSpec(shape))
    written = write_pgm(smap.normalized(), out / "simmap.pgm")
    write_csv(smap, out / "simmap.csv")
    record = {
        "grid": list(shape),
        "encoder": encoder,
        "scales": None if scales is None else [float(s) for s in scales],
        "temperature": temperature,
        "scale": scale,
        "dims": dims,
        "seed": seed,
    }
    write_manifest(out, "simmap", record)
    return {"map": smap, "pgm": written, "csv": out / "simmap.csv"}


# -- kernel checks ------------------------------------------------------------


def _offsets(shape, reference, radius: float) -> np.ndarray:
    idx = np.indices(shape).reshape(len(shape), -1).T - np.asarray(reference)
    return idx[np.linalg.norm(idx, axis=1) <= radius]


def kernel_deviation(scales, half_dims: int = 8192, grid=(14, 14), radius: float = 5.0, seed: int = 42) -> float:
    """Max |normalised Monte Carlo similarity - Gaussian kernel| over offsets within ``radius``."""
    cfg = EncodingConfig(2 * half_dims, len(grid), seed)
    s = np.atleast_1d(np.asarray(scales, dtype=np.float64))
    basis = sample_basis_isotropic(float(s[0]), cfg) if s.size == 1 else sample_basis_anisotropic(s, cfg)
    from .encoding import FourierEncoder

    smap = compute_map(FourierEncoder(basis, "afpe"), GridSpec(grid))
    ref = smap.grid.reference
    deltas = _offsets(grid, ref, radius)
    mc = np.array([smap.at_offset(d) for d in deltas]) / half_dims
    full = np.broadcast_to(s, (len(grid),)) if s.size == 1 else s
    return float(np.max(np.abs(mc - gaussian_kernel(deltas, full))))


def directional_profile(scales, half_dims: int = 8192, ks=range(1, 6), seed: int = 42):
    """Normalised Monte Carlo similarity at (k, 0) and (0, k) from the origin."""
    cfg = EncodingConfig(2 * half_dims, 2, seed)
    from .encoding import fourier_encode

    basis = sample_basis_anisotropic(scales, cfg)
    ks = np.asarray(list(ks), dtype=np.float64)
    e0 = fourier_encode(np.zeros(2), basis)
    rows = fourier_encode(np.stack([ks, 0 * ks], 1), basis) @ e0 / half_dims
    cols = fourier_encode(np.stack([0 * ks, ks], 1), basis) @ e0 / half_dims
    return rows, cols


def cmd_kernel_check(
    half_dims: int = 8192,
    iso_scales=(0.5, 1.0),
    aniso_scales=(0.497, 1.125),
    elongation_scales=(0.0497, 0.1125),
    grid=(14, 14),
    radius: float = 5.0,
    seed: int = 42,
    spe_dims: int = 256,
) -> tuple[bool, list[str]]:
    """Run the kernel-limit, elongation, generalisation and separability checks.

    Returns (all passed, report lines).
    """
    for s in list(iso_scales) + list(aniso_scales) + list(elongation_scales):
        if not s > 0:
            raise ConfigError(f"scales must be positive, got {s}")
    tol = 4.0 / math.sqrt(half_dims)
    lines, ok = [], True

    def record(name: str, passed: bool, detail: str) -> None:
        nonlocal ok
        ok &= bool(passed)
        lines.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")

    for s in iso_scales:
        dev = kernel_deviation(s, half_dims, grid, radius, seed)
        record(f"isotropic kernel s={s}", dev <= tol, f"max deviation {dev:.4f} (tol {tol:.4f})")
    dev = kernel_deviation(aniso_scales, half_dims, grid, radius, seed)
    record(f"anisotropic kernel s={tuple(aniso_scales)}", dev <= tol, f"max deviation {dev:.4f} (tol {tol:.4f})")

    rows, cols = directional_profile(elongation_scales, half_dims, seed=seed)
    rows_slower = bool(elongation_scales[0] < elongation_scales[1])
    passed = bool(np.all(rows > cols)) if rows_slower else bool(np.all(cols > rows))
    record(
        f"directional decay s={tuple(elongation_scales)}",
        passed,
        "rows " + " ".join(f"{v:.3f}" for v in rows) + " | cols " + " ".join(f"{v:.3f}" for v in cols),
    )

    c = float(iso_scales[0])
    cfg = EncodingConfig(2 * half_dims, len(grid), seed)
    same = np.array_equal(
        sample_basis_isotropic(c, cfg).matrix, sample_basis_anisotropic([c] * len(grid), cfg).matrix
    )
    record("equal scales reproduce isotropic basis", same, "bitwise" if same else "differs")

    spe = make_encoder("spe", EncodingConfig(spe_dims, 2, seed))
    p = np.array([[0.0, 0.0], [3.0, -2.0]])
    enc = spe(p)
    block = spe_dims // 2
    total = enc[0] @ enc[1]
    split = enc[0, :block] @ enc[1, :block] + enc[0, block:] @ enc[1, block:]
    record("sinusoidal separability", abs(total - split) <= 1e-9 * spe_dims, f"|diff| {abs(total - split):.2e}")
    mism = radial_mismatch(spe)
    record(
        "sinusoidal diagonal vs radial",
        bool(np.max(mism) > 1e-3 * spe_dims / 2),
        "max mismatch " + f"{np.max(mism):.3f} (k=1..7)",
    )
    return ok, lines


# -- Feret benchmark ----------------------------------------------------------


def _encoder_spec(cfg: dict, family: str, scales=None) -> EncoderSpec:
    e = cfg["encoder"]
    return EncoderSpec(
        family,
        dims=e["dims"],
        temperature=e["temperature"],
        scale=e["scale"],
        scales=scales if scales is not None else e["scales"],
        seed=cfg["seed"],
    )


def _train_config(cfg: dict, spec: EncoderSpec, epochs: int | None = None) -> TrainConfig:
    t = cfg["training"]
    return TrainConfig(
        spec,
        epochs=epochs or t["epochs"],
        batch_size=t["batch_size"],
        learning_rate=t["learning_rate"],
        hidden=t["hidden"],
        seed=cfg["seed"],
        position_unit=t["position_unit"],
    )


def _bench_job(args):
    dataset, tcfg, run_dir = args
    res = train(dataset, tcfg)
    preds = res.model.predict(dataset.test)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        write_history(run_dir / "history.csv", res.history)
        save_checkpoint(run_dir / "checkpoint.bin", res.model.tensors())
    return preds, res.best_epoch


def _dataset_for(cfg: dict, factor: int):
    d = cfg["dataset"]
    return build_dataset(
        RngStream(cfg["seed"]).split(_DATA_STREAM),
        d["n"],
        factor,
        d["axis"],
        d["split"],
        d["grid"],
        d["n_directions"],
        jobs=cfg["jobs"],
    )


def cmd_feret_bench(cfg: dict) -> dict:
    """Train every configured encoder on each anisotropy level and compare
    bootstrapped test R^2 for both Feret diameters."""
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(recorded_config(cfg), indent=2, sort_keys=True) + "\n")
    ev = cfg["evaluation"]
    rows, prow, text = [], [], []
    results: dict = {}
    for factor in cfg["dataset"]["anisotropy"]:
        ds = _dataset_for(cfg, factor)
        fdir = out / f"aniso_{factor}"
        if cfg["dataset"]["save"]:
            save_dataset(ds, fdir / "dataset")
        jobs = [
            (ds, _train_config(cfg, _encoder_spec(cfg, fam)), fdir / fam) for fam in cfg["encoders"]
        ]
        outputs = _pool_map(_bench_job, jobs, cfg["jobs"])
        y = np.array([s.target.as_array() for s in ds.test])
        per_target: dict = {t: {} for t in TARGETS}
        boot_root = RngStream(cfg["seed"]).split(_BOOT_STREAM).split(factor)
        for fam, (pred, _) in zip(cfg["encoders"], outputs):
            for j, tname in enumerate(TARGETS):
                # same resamples for every encoder
                stream = boot_root.split(j)
                per_target[tname][fam] = bootstrap_metric(pred[:, j], y[:, j], n_boot=ev["n_boot"], stream=stream, name=tname)
        columns = {}
        for tname in TARGETS:
            ranked = rank_encoders(per_target[tname], True, ev["alpha"])
            columns[tname] = ranked
            for e in ranked:
                s = per_target[tname][e.name]
                rows.append(
                    {
                        "anisotropy": factor,
                        "encoder": e.name,
                        "target": tname,
                        "r2_mean": f"{e.mean:.17g}",
                        "r2_std": f"{e.std:.17g}",
                        "n_boot": s.n_boot,
                        "n_undefined": s.n_undefined,
                        "flag": e.flag,
                        "p_vs_best": f"{e.p_vs_best:.17g}",
                    }
                )
            fams = cfg["encoders"]
            for i, a in enumerate(fams):
                for b in fams[i + 1 :]:
                    tt = welch_t_test(per_target[tname][a].samples, per_target[tname][b].samples)
                    prow.append(
                        {
                            "anisotropy": factor,
                            "target": tname,
                            "a": a,
                            "b": b,
                            "t": f"{tt.statistic:.17g}",
                            "p": f"{tt.pvalue:.17g}",
                            "df": f"{tt.df:.17g}",
                        }
                    )
        text.append(f"anisotropy {factor} (test R^2, mean±std over {ev['n_boot']} bootstrap runs)\n")
        text.append(format_table(columns, list(cfg["encoders"])))
        text.append("\n")
        results[factor] = per_target
    (out / "results.csv").write_text(summaries_to_csv(rows))
    (out / "pvalues.csv").write_text(summaries_to_csv(prow))
    (out / "report.txt").write_text("".join(text))
    write_manifest(out, "feret-bench", cfg)
    return results


# -- scale search -------------------------------------------------------------


def _search_job(args):
    dataset, tcfg = args
    res = train(dataset, tcfg)
    r2 = predict_r2(res.model, dataset.val)
    return r2


def cmd_scale_search(cfg: dict) -> dict:
    """Random log-uniform search over per-axis AFPE scales with shortened training.

    The isotropic default (s = 1.0) is trained under the same protocol as a
    reference point.
    """
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(recorded_config(cfg), indent=2, sort_keys=True) + "\n")
    s = cfg["search"]
    epochs = max(1, int(round(s["epoch_fraction"] * cfg["training"]["epochs"])))
    ds = _dataset_for(cfg, s["anisotropy"])
    stream = RngStream(cfg["seed"]).split(_SEARCH_STREAM)
    trials = [random_scale_vector(stream, 3, s["low"], s["high"]) for _ in range(s["n_trials"])]
    jobs = [(ds, _train_config(cfg, _encoder_spec(cfg, "afpe", [float(v) for v in sc]), epochs)) for sc in trials]
    jobs.append((ds, _train_config(cfg, _encoder_spec(cfg, "ifpe"), epochs)))
    scores = _pool_map(_search_job, jobs, cfg["jobs"])
    baseline = scores.pop()
    means = [float(np.mean(r)) for r in scores]
    best = int(np.argmax(means))
    lines = ["trial,s0,s1,s2,val_r2_min_fd,val_r2_max_fd,val_r2_mean"]
    for i, (sc, r2, m) in enumerate(zip(trials, scores, means)):
        lines.append(f"{i},{sc[0]:.17g},{sc[1]:.17g},{sc[2]:.17g},{r2[0]:.17g},{r2[1]:.17g},{m:.17g}")
    (out / "trials.csv").write_text("\n".join(lines) + "\n")
    summary = {
        "best_trial": best,
        "best_scales": [float(v) for v in trials[best]],
        "best_val_r2": means[best],
        "baseline": {"family": "ifpe", "scale": cfg["encoder"]["scale"], "val_r2": float(np.mean(baseline))},
        "epochs": epochs,
        "anisotropy": s["anisotropy"],
    }
    (out / "best.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "scale-search", cfg)
    return summary
