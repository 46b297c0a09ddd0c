"""``dapa-lab`` command line.

Every command works inside one run directory (``--out``). It writes the
fully materialized config next to its outputs and refuses to overwrite
existing artifacts unless ``--force`` is given.

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, write_provenance
from .body import build_template, default_tree, export_obj, forward_kinematics, lbs
from .checkpoint import (Checkpoint, CheckpointError, file_digest, load_checkpoint, load_prior, save_checkpoint,
                         save_prior)
from .datagen import DomainSpec, SchemaError, default_specs, load_dataset, sample_domain, save_dataset
from .experiment import PriorSettings, prior_corpus
from .metrics import pck_curve, write_pck_csv, write_report_csv
from .objective import LossWeights
from .prior import encode, train_prior
from .regressor import init_mean_params, init_regressor, predict_bodies
from .trainer import (ADAPT_MODES, TrainConfig, TrainState, TrainingDivergedError, adapt, evaluate, new_state,
                      pretrain, write_log_csv)

log = logging.getLogger("dapa_lab")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
DOMAINS = ("source", "target_train", "target_test")
PCK_ALPHAS = tuple(round(0.05 * i, 2) for i in range(1, 11))


class ConfigError(ValueError):
    pass


class MissingPrerequisite(FileNotFoundError):
    pass


# -- config -------------------------------------------------------------------

def _domain_defaults() -> dict:
    out = {}
    for name, spec in default_specs(0).items():
        d = asdict(spec)
        d.pop("name")
        d.pop("seed")
        out[name] = d
    return out


def default_config() -> dict:
    train_keys = ("steps", "batch_size", "learning_rate", "eval_interval")
    pre = {k: v for k, v in asdict(TrainConfig(phase="pretrain", steps=3000, learning_rate=1e-3)).items()
           if k in train_keys}
    ada = {k: v for k, v in asdict(TrainConfig()).items() if k in train_keys}
    ada["mode"] = "dapa"
    aug = asdict(AugmentConfig())
    for k in ("mode", "seed"):
        aug.pop(k)
    aug["render_noise"] = "target"
    return {"seed": 0, "domains": _domain_defaults(), "prior": asdict(PriorSettings()),
            "pretrain": pre, "adapt": ada, "augment": aug, "weights": asdict(LossWeights()),
            "paths": {"data_dir": "data", "prior": "prior.ckpt", "pretrain": "pretrain.ckpt"}}


# values that may legitimately replace a default of a different shape
_FREE_KEYS = {"render_noise", "cluster_weights"}


def _merge(base: dict, user: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in user.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict) and k not in _FREE_KEYS:
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k!r} must be an object")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(path: str | None, seed: int | None = None, mode: str | None = None) -> dict:
    user = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON at line {exc.lineno} ({exc.msg})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{p}: top level must be an object")
    cfg = _merge(default_config(), user, "")
    if seed is not None:
        cfg["seed"] = seed
    if mode is not None:
        cfg["adapt"]["mode"] = mode.replace("-", "_")
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    try:
        domain_specs(cfg)
        PriorSettings(**cfg["prior"])
        LossWeights(**cfg["weights"])
        train_config(cfg, "pretrain")
        train_config(cfg, "adapt")
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def domain_specs(cfg: dict) -> dict:
    return {name: DomainSpec(name=name, seed=cfg["seed"], **cfg["domains"][name]) for name in DOMAINS}


def train_config(cfg: dict, phase: str) -> TrainConfig:
    sec = dict(cfg[phase])
    if phase == "pretrain":
        return TrainConfig(phase="pretrain", weights=LossWeights(**cfg["weights"]), seed=cfg["seed"], **sec)
    aug = dict(cfg["augment"])
    if aug.get("render_noise") == "target":
        aug["render_noise"] = dict(cfg["domains"]["target_train"]["noise"])
    augment = AugmentConfig(seed=cfg["seed"], **aug)
    return TrainConfig(phase="adapt", weights=LossWeights(**cfg["weights"]), augment=augment,
                       seed=cfg["seed"], **sec)


def _echo(path: Path, cfg: dict, extra: dict | None = None) -> None:
    doc = dict(cfg)
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not serializable: {type(x).__name__}")


# -- helpers --------------------------------------------------------------------

def _need(path: Path, producer: str, out: Path) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"missing {path}; run `dapa-lab {producer} --out {out}` first")
    return path


def _fresh(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ConfigError(f"{path} already exists; pass --force to overwrite")


def _load_regressor(path: Path, tree):
    ckpt = load_checkpoint(path)
    if ckpt.tree_fingerprint and ckpt.tree_fingerprint != tree.fingerprint():
        raise ConfigError(f"{path} was trained on a different skeleton "
                          f"({ckpt.tree_fingerprint} vs {tree.fingerprint()})")
    return ckpt


def _check_dataset(ds, tree, obs_dim: int | None, path) -> None:
    if not len(ds):
        return
    k = ds.keypoints().shape[1]
    if k != tree.n_joints:
        raise ConfigError(f"{path}: {k} keypoints per sample, checkpoint skeleton has {tree.n_joints}")
    if obs_dim is not None and ds.observations().shape[1] != obs_dim:
        raise ConfigError(f"{path}: observation width {ds.observations().shape[1]} != regressor input {obs_dim}")


def _run_name(path: Path) -> str:
    return path.parent.name if path.stem == "adapt" else path.stem


# -- commands -------------------------------------------------------------------

def cmd_gen_data(cfg: dict, out: Path, force: bool, **_) -> None:
    data_dir = out / cfg["paths"]["data_dir"]
    if data_dir.exists() and any(data_dir.iterdir()) and not force:
        raise ConfigError(f"{data_dir} is not empty; pass --force to overwrite")
    data_dir.mkdir(parents=True, exist_ok=True)
    tree = default_tree()
    prints = {}
    for name, spec in domain_specs(cfg).items():
        ds = sample_domain(spec, tree)
        save_dataset(ds, data_dir / f"{name}.jsonl", domain=name)
        prints[name] = {"fingerprint": spec.fingerprint(), "count": len(ds)}
        log.info("wrote %s (%d samples)", name, len(ds))
    (data_dir / "fingerprint.json").write_text(json.dumps(prints, indent=2, sort_keys=True) + "\n")
    _echo(out / "config.json", cfg)


def cmd_train_prior(cfg: dict, out: Path, force: bool, **_) -> None:
    path = out / cfg["paths"]["prior"]
    _fresh(path, force)
    out.mkdir(parents=True, exist_ok=True)
    settings = PriorSettings(**cfg["prior"])
    tree = default_tree()
    prior, history = train_prior(prior_corpus(tree, settings), settings.latent_dim, settings.hidden,
                                 settings.kl_weight, settings.n_steps, settings.batch_size,
                                 settings.learning_rate, settings.seed)
    save_prior(path, prior, {"settings": asdict(settings), "tree_fingerprint": tree.fingerprint()})
    with open(out / "prior_log.csv", "w") as fh:
        fh.write("step,loss,recon,kl\n")
        for i, (a, b, c) in enumerate(zip(history["loss"], history["recon"], history["kl"])):
            fh.write(f"{i},{a!r},{b!r},{c!r}\n")
    _echo(out / "config.json", cfg)


def cmd_pretrain(cfg: dict, out: Path, force: bool, **_) -> None:
    path = out / cfg["paths"]["pretrain"]
    _fresh(path, force)
    src_path = _need(out / cfg["paths"]["data_dir"] / "source.jsonl", "gen-data", out)
    tree = default_tree()
    source = load_dataset(src_path)
    if not len(source):
        raise ConfigError(f"{src_path} is empty; cannot pretrain")
    _check_dataset(source, tree, None, src_path)
    tcfg = train_config(cfg, "pretrain")
    params = source.param_matrix()
    reg = init_regressor(tree, source.observations().shape[1], init_mean_params(tree, params), seed=tcfg.seed)
    state = new_state(reg, tcfg)
    snapshot = {"phase": "pretrain", **tcfg.as_dict()}
    try:
        pretrain(state, tree, source.observations(), params, tcfg)
    except TrainingDivergedError:
        _save_state(out / "pretrain.diverged.ckpt", state, tree, tcfg, snapshot, {})
        raise
    _save_state(path, state, tree, tcfg, snapshot, {})
    write_log_csv(out / "pretrain_log.csv", state.history)
    _echo(out / "config.json", cfg)


def _save_state(path: Path, state: TrainState, tree, tcfg: TrainConfig, snapshot: dict, prior_ref: dict) -> None:
    hist = [{k: v for k, v in row.items()} for row in state.history]
    save_checkpoint(path, Checkpoint(state.params, state.opt, state.step, tcfg.seed, tree.fingerprint(),
                                     json.loads(json.dumps(snapshot, default=_jsonable)), prior_ref, hist))


def cmd_adapt(cfg: dict, out: Path, force: bool, **_) -> None:
    tcfg = train_config(cfg, "adapt")
    run_dir = out / f"adapt-{tcfg.mode.replace('_', '-')}"
    _fresh(run_dir / "adapt.ckpt", force)
    pre_path = _need(out / cfg["paths"]["pretrain"], "pretrain", out)
    tgt_path = _need(out / cfg["paths"]["data_dir"] / "target_train.jsonl", "gen-data", out)
    tree = default_tree()
    prior, prior_ref = None, {}
    if tcfg.uses_syn:
        prior_path = _need(out / cfg["paths"]["prior"], "train-prior", out)
        prior, _ = load_prior(prior_path)
        prior_ref = {"file": prior_path.name, "crc32": file_digest(prior_path)}
    pre = _load_regressor(pre_path, tree)
    target = load_dataset(tgt_path)
    _check_dataset(target, tree, pre.regressor.obs_dim, tgt_path)
    eval_fn = None
    test_path = out / cfg["paths"]["data_dir"] / "target_test.jsonl"
    if tcfg.eval_interval and test_path.exists():
        probe = load_dataset(test_path)
        probe = probe.subset(range(min(200, len(probe))))
        eval_fn = lambda params: evaluate(params, tree, probe).mpjpe  # noqa: E731
    run_dir.mkdir(parents=True, exist_ok=True)
    prov_path = run_dir / "provenance.jsonl"
    prov_path.write_text("")
    state = new_state(pre.regressor, tcfg)
    snapshot = {"phase": "adapt", **tcfg.as_dict(), "pretrain_crc32": file_digest(pre_path)}
    try:
        adapt(state, tree, prior, target.observations(), target.keypoints(), tcfg, eval_fn=eval_fn,
              provenance_sink=lambda step, recs: write_provenance(prov_path, [{"step": step, **r} for r in recs]))
    except TrainingDivergedError:
        _save_state(run_dir / "adapt.diverged.ckpt", state, tree, tcfg, snapshot, prior_ref)
        raise
    _save_state(run_dir / "adapt.ckpt", state, tree, tcfg, snapshot, prior_ref)
    write_log_csv(run_dir / "log.csv", state.history)
    echoed = copy.deepcopy(cfg)
    echoed["augment"]["s"] = tcfg.augment.s
    _echo(run_dir / "config.json", echoed, {"train_config": tcfg.as_dict()})
    _echo(out / "config.json", echoed)


def _dataset_arg(args_dataset, cfg: dict, out: Path, default: str) -> Path:
    if args_dataset:
        p = Path(args_dataset)
        if not p.exists():
            raise MissingPrerequisite(f"dataset not found: {p}")
        return p
    return _need(out / cfg["paths"]["data_dir"] / default, "gen-data", out)


def _checkpoint_arg(args_checkpoint, out: Path) -> Path:
    if not args_checkpoint:
        raise ConfigError("--checkpoint is required")
    p = Path(args_checkpoint)
    if not p.exists():
        producer = "adapt" if p.stem == "adapt" else "pretrain"
        raise MissingPrerequisite(f"checkpoint not found: {p}; produce it with `dapa-lab {producer}`")
    return p


def cmd_eval(cfg: dict, out: Path, force: bool, checkpoint=None, dataset=None, **_) -> None:
    ck_path = _checkpoint_arg(checkpoint, out)
    ds_path = _dataset_arg(dataset, cfg, out, "target_test.jsonl")
    tree = default_tree()
    ckpt = _load_regressor(ck_path, tree)
    ds = load_dataset(ds_path)
    _check_dataset(ds, tree, ckpt.regressor.obs_dim, ds_path)
    eval_dir = out / f"eval-{_run_name(ck_path)}"
    _fresh(eval_dir / "report.json", force)
    eval_dir.mkdir(parents=True, exist_ok=True)
    template = build_template(tree)
    report = evaluate(ckpt.regressor, tree, ds, template, alphas=(0.2,))
    preds = predict_bodies(ckpt.regressor, tree, ds.observations())
    curve = pck_curve(preds["joints2d"], ds.eval_array("joints2d"), PCK_ALPHAS, names=tree.names)
    extra = {"checkpoint": str(ck_path), "dataset": str(ds_path)}
    write_report_csv(eval_dir / "report.csv", report, extra)
    write_pck_csv(eval_dir / "pck.csv", curve)
    doc = {**extra, "name": _run_name(ck_path), "metrics": report.as_dict(), "pck_curve": curve}
    (eval_dir / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report.as_dict(), sort_keys=True))


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def render_pck_svg(series: dict, width: int = 480, height: int = 320) -> str:
    """Self-contained SVG line chart; ``series`` maps label -> (alphas, values)."""
    ml, mr, mt, mb = 50, 130, 20, 40
    pw, ph = width - ml - mr, height - mt - mb
    xs = [a for al, _ in series.values() for a in al] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x0, x1 = x0 - 0.05, x1 + 0.05
    sx = lambda a: ml + pw * (a - x0) / (x1 - x0)  # noqa: E731
    sy = lambda v: mt + ph * (1.0 - v)  # noqa: E731
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(f'<text x="{ml - 6}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:g}</text>')
    for a in sorted(set(xs)):
        parts.append(f'<text x="{sx(a):.1f}" y="{mt + ph + 14}" text-anchor="middle">{a:g}</text>')
    parts.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">alpha</text>')
    parts.append(f'<text x="12" y="{mt + ph / 2:.1f}" transform="rotate(-90 12 {mt + ph / 2:.1f})" '
                 f'text-anchor="middle">PCK</text>')
    for i, (label, (al, vals)) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = [(sx(a), sy(v)) for a, v in zip(al, vals) if v == v]
        if len(pts) > 1:
            path = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
            parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts += [f'<circle cx="{x:.1f}" cy="{y:.1f}" r="2.5" fill="{color}"/>' for x, y in pts]
        ly = mt + 14 * (i + 1)
        parts.append(f'<line x1="{ml + pw + 10}" y1="{ly - 4}" x2="{ml + pw + 28}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{ml + pw + 32}" y="{ly}">{_escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def cmd_plot_pck(cfg: dict, out: Path, force: bool, inputs=None, group="all", **_) -> None:
    paths = [Path(p) for p in inputs] if inputs else sorted(out.glob("eval-*/report.json"))
    if not paths:
        raise MissingPrerequisite(f"no eval reports under {out}; run `dapa-lab eval --out {out}` first")
    series = {}
    for p in paths:
        if not p.exists():
            raise MissingPrerequisite(f"eval report not found: {p}; produce it with `dapa-lab eval`")
        doc = json.loads(p.read_text())
        curve = doc["pck_curve"]
        if group not in curve:
            raise ConfigError(f"{p}: no joint group {group!r}")
        series[doc.get("name", p.parent.name)] = (curve["alpha"], curve[group])
    _fresh(out / "pck.svg", force)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pck.svg").write_text(render_pck_svg(series))
    alphas = sorted({a for al, _ in series.values() for a in al})
    with open(out / "pck.csv", "w") as fh:
        fh.write(",".join(["alpha", *series]) + "\n")
        for a in alphas:
            row = [repr(a)]
            for al, vals in series.values():
                row.append(repr(vals[al.index(a)]) if a in al else "")
            fh.write(",".join(row) + "\n")


def cmd_export_mesh(cfg: dict, out: Path, force: bool, checkpoint=None, dataset=None, sample="rest", **_) -> None:
    tree = default_tree()
    template = build_template(tree)
    if sample == "rest":
        state = forward_kinematics(tree, np.zeros(tree.pose_dim))
    else:
        ck_path = _checkpoint_arg(checkpoint, out)
        ds_path = _dataset_arg(dataset, cfg, out, "target_test.jsonl")
        ckpt = _load_regressor(ck_path, tree)
        ds = load_dataset(ds_path)
        _check_dataset(ds, tree, ckpt.regressor.obs_dim, ds_path)
        match = [s for s in ds if s.id == sample]
        if not match:
            raise ConfigError(f"sample {sample!r} not in {ds_path}")
        pred = predict_bodies(ckpt.regressor, tree, match[0].observation[None])
        state = forward_kinematics(tree, pred["pose"], pred["orient"], pred["beta"])
    verts = lbs(template, state).reshape(-1, 3)
    path = out / f"mesh-{sample}.obj"
    _fresh(path, force)
    out.mkdir(parents=True, exist_ok=True)
    export_obj(path, verts, template.faces)
    print(path)


def cmd_latent_diag(cfg: dict, out: Path, force: bool, checkpoint=None, dataset=None, **_) -> None:
    ck_path = _checkpoint_arg(checkpoint, out)
    ds_path = _dataset_arg(dataset, cfg, out, "target_test.jsonl")
    prior_path = _need(out / cfg["paths"]["prior"], "train-prior", out)
    tree = default_tree()
    ckpt = _load_regressor(ck_path, tree)
    prior, _ = load_prior(prior_path)
    ds = load_dataset(ds_path)
    _check_dataset(ds, tree, ckpt.regressor.obs_dim, ds_path)
    path = out / f"latent-{_run_name(ck_path)}.csv"
    _fresh(path, force)
    pose = predict_bodies(ckpt.regressor, tree, ds.observations())["pose"] if len(ds) else np.zeros((0, 1))
    norms = np.linalg.norm(encode(prior, pose).mu, axis=-1) if len(ds) else np.zeros(0)
    with open(path, "w") as fh:
        fh.write("id,mu_norm\n")
        for s, n in zip(ds, norms):
            fh.write(f"{s.id},{n!r}\n")
    print(f"mean_mu_norm {float(np.mean(norms)) if len(norms) else float('nan'):.6f}")


COMMANDS = {"gen-data": cmd_gen_data, "train-prior": cmd_train_prior, "pretrain": cmd_pretrain,
            "adapt": cmd_adapt, "eval": cmd_eval, "plot-pck": cmd_plot_pck,
            "export-mesh": cmd_export_mesh, "latent-diag": cmd_latent_diag}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dapa-lab", description="Domain-adaptive pose augmentation lab.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config; unknown keys are rejected")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default="run", help="run directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if name == "adapt":
            p.add_argument("--mode", choices=[m.replace("_", "-") for m in ADAPT_MODES])
        if name in ("eval", "export-mesh", "latent-diag"):
            p.add_argument("--checkpoint")
            p.add_argument("--dataset")
        if name == "export-mesh":
            p.add_argument("--sample", default="rest", help="sample id, or 'rest' for the rest pose")
        if name == "plot-pck":
            p.add_argument("--inputs", nargs="*", help="eval report.json files (default: all in --out)")
            p.add_argument("--group", default="all")
    return parser


def _thread_limit():
    raw = os.environ.get("DAPA_LAB_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DAPA_LAB_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"DAPA_LAB_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    extra = {k: v for k, v in vars(args).items()
             if k not in ("command", "config", "seed", "out", "force", "mode", "verbose")}
    try:
        with _thread_limit():
            cfg = load_config(args.config, args.seed, getattr(args, "mode", None))
            COMMANDS[args.command](cfg, Path(args.out), args.force, **extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingPrerequisite, CheckpointError, SchemaError) as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
