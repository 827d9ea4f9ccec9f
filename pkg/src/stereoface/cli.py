"""Command-line entry point: ``stereoface <command> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import config as C
from .errors import ConfigError, DataError, StereoFaceError

log = logging.getLogger("stereoface")

MODES = ["mono", "stereo", "stereo-nocoords", "depthtex"]


def _threads(n: int) -> int:
    return n if n and n > 0 else (os.cpu_count() or 1)


def _limit_threads(n: int):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=_threads(n))


def _resolve(ctx: click.Context, flags: dict) -> C.Config:
    obj = ctx.obj or {}
    cfg = C.resolve(obj.get("profile", "desk"), obj.get("config"), flags)
    return cfg


def _floats(text: str | None) -> list[float] | None:
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str | None) -> list[int] | None:
    vals = _floats(text)
    return None if vals is None else [int(v) for v in vals]


def _echo_json(obj) -> None:
    click.echo(json.dumps(obj, indent=1, sort_keys=True))


class _Group(click.Group):
    """Maps package errors onto the exit-code contract."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except StereoFaceError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(exc.exit_code)
        except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(DataError.exit_code)


@click.group(cls=_Group, context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--profile", type=click.Choice(C.PROFILES), envvar="STEREOFACE_PROFILE", default="desk",
              show_default=True, help="Default set for every setting.")
@click.option("--config", "config_file", type=click.Path(dir_okay=False), envvar="STEREOFACE_CONFIG",
              help="key = value settings file (overrides the profile).")
@click.option("--threads", type=int, default=0, help="Worker/BLAS threads (0 = all cores).")
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
@click.pass_context
def main(ctx, profile, config_file, threads, verbose):
    """Stereo face verification: data generation, training, evaluation and anti-spoofing."""
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)],
                        format="%(asctime)s %(name)s %(message)s")
    ctx.ensure_object(dict)
    ctx.obj.update(profile=profile, config=config_file, threads=threads)
    if threads:
        limiter = _limit_threads(threads)
        ctx.call_on_close(lambda: limiter.unregister() if hasattr(limiter, "unregister") else None)


# ---------------------------------------------------------------- gen


@main.command()
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Dataset directory.")
@click.option("--subjects", type=int, help="Number of identities.")
@click.option("--samples-min", type=int, help="Minimum stereo pairs per subject.")
@click.option("--samples-max", type=int, help="Maximum stereo pairs per subject.")
@click.option("--train-subjects", type=int, help="Subjects in the train split (default: fraction).")
@click.option("--seed", type=int, help="Dataset seed.")
@click.option("--scene-w", type=int, help="Scene width in pixels.")
@click.option("--scene-h", type=int, help="Scene height in pixels.")
@click.option("--baseline", type=float, help="Stereo baseline in metres (default 0.03).")
@click.option("--focal", type=float, help="Focal length in pixels.")
@click.pass_context
def gen(ctx, out, subjects, samples_min, samples_max, train_subjects, seed, scene_w, scene_h, baseline, focal):
    """Render a synthetic stereo face dataset."""
    from .facegen.dataset import gen_dataset

    cfg = _resolve(ctx, {"data.subjects": subjects, "data.samples_min": samples_min,
                         "data.samples_max": samples_max, "data.train_subjects": train_subjects,
                         "data.seed": seed, "rig.scene_w": scene_w, "rig.scene_h": scene_h,
                         "rig.baseline": baseline, "rig.focal": focal,
                         "threads": ctx.obj["threads"] or None})
    gcfg = C.gen_config_from(cfg)
    path = gen_dataset(gcfg, out)
    cfg.write(out)
    m = json.loads(path.read_text())
    click.echo(f"wrote {len(m['subjects'])} subjects, {len(m['samples'])} stereo pairs to {out}")


# ---------------------------------------------------------------- train


def _find_mono(data: Path, ckpt_out: Path, seed: int) -> Path:
    """Stage-1 checkpoint lookup next to the requested output, then under the dataset."""
    from .checkpoint import load_checkpoint

    candidates = []
    for root in {ckpt_out.parent.parent, ckpt_out.parent, data}:
        candidates += sorted(Path(root).glob("**/model.ckpt")) if Path(root).is_dir() else []
    ranked = []
    for c in candidates:
        if c.resolve() == ckpt_out.resolve():
            continue
        try:
            _, meta = load_checkpoint(c)
        except (StereoFaceError, OSError):
            continue
        if meta.get("kind") == "recog" and meta.get("mode") == "mono":
            ranked.append((meta.get("train", {}).get("seed") != seed, str(c), c))
    if not ranked:
        raise ConfigError("--aux full needs a stage-1 mono model: train one with --mode mono "
                          "or pass --mono-ckpt")
    ranked.sort()
    return ranked[0][2]


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--mode", type=click.Choice(MODES), default="stereo", show_default=True)
@click.option("--loss", type=click.Choice(["cosface", "arcface"]), help="Angular-margin variant.")
@click.option("--aux", type=click.Choice(["off", "l1", "full"]), help="Passport decoder: off, L1 only, or L1 + embedding term.")
@click.option("--alpha", type=float, help="Embedding-term weight (default 50).")
@click.option("--beta", type=float, help="Decoder-loss weight (default 1; 0 = core method).")
@click.option("--seed", type=int)
@click.option("--epochs", type=int)
@click.option("--lr", "base_lr", type=float, help="Base learning rate.")
@click.option("--batch", type=int)
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False), help="Output checkpoint path.")
@click.option("--mono-ckpt", type=click.Path(exists=True, dir_okay=False), help="Stage-1 mono checkpoint.")
@click.option("--plot/--no-plot", default=True, help="Write loss_curve.svg.")
@click.pass_context
def train(ctx, data, mode, loss, aux, alpha, beta, seed, epochs, base_lr, batch, ckpt, mono_ckpt, plot):
    """Train a recognition model."""
    from .facegen.dataset import Dataset
    from .trainkit import train as run_train

    cfg = _resolve(ctx, {"train.loss": loss, "train.aux": aux, "train.alpha": alpha, "train.beta": beta,
                         "train.seed": seed, "train.epochs": epochs, "train.base_lr": base_lr,
                         "train.batch": batch})
    tcfg = C.train_config_from(cfg, mode)
    ckpt = Path(ckpt)
    out = ckpt.parent
    mono = None
    if tcfg.aux is not None and tcfg.aux.alpha > 0 and tcfg.aux.beta > 0:
        mono = Path(mono_ckpt) if mono_ckpt else _find_mono(Path(data), ckpt, tcfg.seed)
        click.echo(f"mono reference: {mono}")
    ds = Dataset(data)
    model, rec = run_train(tcfg, ds, out_dir=out, mono_checkpoint=mono)
    if ckpt.name != "model.ckpt":
        (out / "model.ckpt").replace(ckpt)
    cfg.write(out)
    if plot:
        from .plots import plot_loss

        series = {"angular": [e.l_ang for e in rec.epochs]}
        if tcfg.aux is not None:
            series["aux"] = [e.l_aux for e in rec.epochs]
        plot_loss(out / "loss_curve.svg", [e.epoch for e in rec.epochs], **series)
    click.echo(f"trained {rec.steps} steps; final angular loss {rec.epochs[-1].l_ang:.4f}; checkpoint {ckpt}")


# ---------------------------------------------------------------- eval


@main.command("eval")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(MODES), help="Input mode (default: from checkpoint).")
@click.option("--fpr", "fpr_list", help="Comma-separated FPR targets.")
@click.option("--breakdown", multiple=True, type=click.Choice(["yaw", "pitch", "light"]),
              help="Attribute breakdown matrix (repeatable).")
@click.option("--fusion", type=click.Choice(["mean", "concat", "left", "right"]), help="Mono view fusion.")
@click.option("--split", default="test", show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--save-embeddings", is_flag=True)
@click.option("--plot/--no-plot", default=True, help="Write SVG figures next to the CSVs.")
@click.pass_context
def evaluate(ctx, data, ckpt, mode, fpr_list, breakdown, fusion, split, out, save_embeddings, plot):
    """Score all test pairs; write roc.csv, fnr_at.csv and breakdown CSVs."""
    from . import evalkit as E
    from .facegen.dataset import Dataset
    from .pipeline import CropSpec
    from .trainkit import load_model

    cfg = _resolve(ctx, {"eval.fpr": _floats(fpr_list), "eval.fusion": fusion})
    model, meta = load_model(ckpt)
    mode = mode or meta["mode"]
    if mode != meta["mode"]:
        raise ConfigError(f"checkpoint was trained for {meta['mode']}, not {mode}")
    spec = CropSpec(**meta["crop"])
    ds = Dataset(data)
    targets = cfg["eval.fpr"]
    res, emb = E.evaluate_model(model.net, mode, ds, spec, split, targets, cfg["eval.fusion"], cfg["eval.shard_rows"])
    res.roc.check_monotone()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    E.write_roc_csv(out / "roc.csv", res.roc)
    E.write_fnr_at_csv(out / "fnr_at.csv", res)
    if save_embeddings:
        E.write_embeddings(out / "embeddings", emb, res.entries)
    t_mid = res.roc.threshold_at[sorted(targets)[len(targets) // 2]]
    for axis in breakdown:
        gi, gj = res.attrs(axis)
        bd = E.breakdown_fnr(gi, gj, res.genuine_scores, axis, t_mid, cfg["eval.bin_width"])
        E.write_breakdown_csv(out / f"breakdown_{axis}.csv", bd)
        if plot:
            from .plots import plot_breakdown

            plot_breakdown(out / f"breakdown_{axis}.svg", bd, f"{mode}: FNR per {axis} cell")
    if plot:
        from .plots import plot_roc

        plot_roc(out / "roc.svg", {mode: res.roc}, targets)
    cfg.write(out)
    click.echo(f"{res.n_genuine} genuine / {res.n_impostor} impostor pairs")
    for t in sorted(targets, reverse=True):
        click.echo(f"FNR @ FPR {t:g}: {res.roc.fnr_at[t]:.4f}")


# ---------------------------------------------------------------- ablate


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seeds", default="0,1,2", show_default=True, help="Comma-separated seeds.")
@click.option("--variants", default="NoCoords,WithCoords,AuxL1,AuxFull", show_default=True)
@click.option("--fpr", "fpr_list", help="Comma-separated FPR targets.")
@click.option("--epochs", type=int)
@click.option("--plot/--no-plot", default=True)
@click.pass_context
def ablate(ctx, data, out, seeds, variants, fpr_list, epochs, plot):
    """Train the four component variants per seed; write ablation.csv."""
    from . import evalkit as E
    from .facegen.dataset import Dataset

    cfg = _resolve(ctx, {"eval.fpr": _floats(fpr_list), "train.epochs": epochs})
    names = [v.strip() for v in variants.split(",") if v.strip()]
    for v in names:
        if v not in E.ABLATION_VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {', '.join(E.ABLATION_VARIANTS)}")
    base = C.train_config_from(cfg, "stereo")
    res = E.ablation_run(Dataset(data), base, _ints(seeds), out, names, cfg["eval.fpr"])
    cfg.write(out)
    if plot:
        from .plots import plot_ablation

        plot_ablation(Path(out) / "ablation.svg", {v: res.median(v) for v in names}, res.targets)
    for v in names:
        click.echo(f"{v:<11} " + "  ".join(f"{t:g}:{f:.4f}" for t, f in zip(res.targets, res.median(v))))


# ---------------------------------------------------------------- spoofing


@main.command("spoof-gen")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False), help="Genuine dataset.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Attack dataset directory.")
@click.option("--seed", type=int)
@click.option("--fraction", type=float, help="Share of genuine samples that get an attack.")
@click.pass_context
def spoof_gen(ctx, data, out, seed, fraction):
    """Render flat-reproduction attacks of a genuine dataset."""
    from .facegen.dataset import Dataset
    from .spoofkit import SpoofConfig, gen_spoof_set

    cfg = _resolve(ctx, {"spoof.seed": seed, "spoof.fraction": fraction})
    path = gen_spoof_set(Dataset(data), out, SpoofConfig(seed=cfg["spoof.seed"], fraction=cfg["spoof.fraction"]))
    cfg.write(out)
    n = len(json.loads(path.read_text())["samples"])
    click.echo(f"wrote {n} attacks to {out}")


@main.command("spoof-train")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False), help="Genuine dataset.")
@click.option("--attacks", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--epochs", type=int)
@click.option("--seed", type=int)
@click.pass_context
def spoof_train(ctx, data, attacks, out, epochs, seed):
    """Train the stereo liveness classifier on the train split."""
    from .facegen.dataset import Dataset
    from .spoofkit import LivenessConfig, liveness_train

    cfg = _resolve(ctx, {"spoof.epochs": epochs, "train.seed": seed})
    lcfg = LivenessConfig(epochs=cfg["spoof.epochs"], seed=cfg["train.seed"], base_lr=cfg["train.base_lr"],
                          momentum=cfg["train.momentum"], weight_decay=cfg["train.weight_decay"],
                          threshold=cfg["spoof.threshold"], crop=C.crop_from(cfg),
                          stage_filters=tuple(cfg["train.stage_filters"]),
                          blocks_per_stage=tuple(cfg["train.blocks_per_stage"]), embed_dim=cfg["train.embed_dim"])
    _, losses = liveness_train(lcfg, Dataset(data), Dataset(attacks), out)
    cfg.write(out)
    click.echo(f"liveness loss {losses[0]:.4f} -> {losses[-1]:.4f}; checkpoint {Path(out) / 'liveness.ckpt'}")


@main.command("spoof-eval")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False), help="Genuine dataset.")
@click.option("--attacks", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--threshold", type=float, help="Decision threshold on P(real).")
@click.option("--split", default="test", show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.pass_context
def spoof_eval(ctx, data, attacks, ckpt, threshold, split, out):
    """Attack detection and real acceptance rates on held-out identities."""
    from .facegen.dataset import Dataset
    from .spoofkit import load_liveness, spoof_metrics

    cfg = _resolve(ctx, {"spoof.threshold": threshold})
    model = load_liveness(ckpt)
    rep = spoof_metrics(model, Dataset(data), Dataset(attacks), split, cfg["spoof.threshold"])
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / "spoof_report.csv")
    cfg.write(out)
    for r in rep.rows:
        click.echo(f"{r['set']:<5} n={r['n']:<5} {r['metric']}: {100 * r['rate']:.1f}%")


# ---------------------------------------------------------------- infer


def _box_landmarks(text: str) -> np.ndarray:
    vals = _floats(text)
    if vals is None or len(vals) != 4:
        raise ConfigError(f"bbox must be x0,y0,x1,y1 (got {text!r})")
    x0, y0, x1, y1 = vals
    if x1 <= x0 or y1 <= y0:
        raise ConfigError(f"empty bbox {text!r}")
    return np.array([[x0, y0], [x1, y0], [x0, y1], [x1, y1]])


def _infer_one(net, mode, spec, left, right, bbox_left, bbox_right) -> np.ndarray:
    from .facegen.io import read_pgm
    from .pipeline import InputMode, prepare_mono, prepare_stereo
    from .recognet import fuse_mono

    li, ri = read_pgm(left), read_pgm(right)
    ll, lr = _box_landmarks(bbox_left), _box_landmarks(bbox_right)
    if mode is InputMode.MONO:
        e = fuse_mono(net(prepare_mono(li, ll, spec)[None]).data, net(prepare_mono(ri, lr, spec)[None]).data)
    else:
        e = net(prepare_stereo(li, ri, ll, lr, spec).net_input(mode)[None]).data
    return np.asarray(e, dtype=np.float64)[0]


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--left", multiple=True, required=True, type=click.Path(exists=True, dir_okay=False),
              help="Left PGM (repeat once more to compare two samples).")
@click.option("--right", multiple=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--bbox-left", multiple=True, required=True,
              help="x0,y0,x1,y1 extent of the facial landmarks in the left image.")
@click.option("--bbox-right", multiple=True)
def infer(ckpt, left, right, bbox_left, bbox_right):
    """Embed one sample, or print the cosine similarity of two."""
    from .pipeline import CropSpec, InputMode
    from .recognet import similarity
    from .tensor import no_grad
    from .trainkit import load_model

    model, meta = load_model(ckpt)
    mode = InputMode(meta["mode"])
    spec = CropSpec(**meta["crop"])
    if mode is InputMode.DEPTH_TEXTURE:
        raise ConfigError("infer takes image pairs; depth+texture models need ground-truth depth")
    if not 1 <= len(left) <= 2 or len(bbox_left) != len(left):
        raise ConfigError("give one or two samples, each with --left and --bbox-left")
    if (len(right), len(bbox_right)) != (len(left), len(left)):
        raise ConfigError("every sample needs --right and --bbox-right as well")
    embs = []
    with no_grad():
        for k in range(len(left)):
            embs.append(_infer_one(model.net, mode, spec, left[k], right[k], bbox_left[k], bbox_right[k]))
    if len(embs) == 1:
        _echo_json({"embedding": [float(v) for v in embs[0]]})
    else:
        _echo_json({"similarity": float(similarity(embs[0], embs[1]))})


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
