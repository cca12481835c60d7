"""Command-line pipeline: data generation through evaluation figures.

Every subcommand reads the same key=value config, materializes its
defaults, and writes the resolved config plus the package version next
to its outputs, so a run directory is self-describing. Subcommands are
deterministic given config + seeds; rerunning one overwrites its
outputs with identical bytes.
"""

import argparse
import csv
import os
import sys

import numpy as np

from . import __version__
from . import autodiff as ad
from .backbone import (Backbone, decode_causal, decode_parallel, sample,
                       train_backbone)
from .checkpoint import (load_backbone, load_tokenizer, save_backbone,
                         save_tokenizer)
from .config import ConfigError, PipelineConfig
from .dataset import Dataset, ManifestError, build_pairs, gather_asarray
from .figures import curve_png, gather_png, save_array, velocity_png, write_pgm
from .metrics import MetricReport, write_report
from .refine import (EnsembleSpec, RefineConfig, decode_to_map,
                     ensemble_invert, refine as refine_latent,
                     write_residual_csv)
from .rl import evaluate_mean_reward, rl_finetune, write_reward_csv
from .tokenizer import train_tokenizer
from .velocity import FamilySpec, NormalizationSpec, generate_velocity, hybrid_mix


class ArtifactError(RuntimeError):
    """A required upstream artifact is missing."""


def _stamp(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    cfg.write(os.path.join(out_dir, "config.txt"))
    with open(os.path.join(out_dir, "version.txt"), "w") as fh:
        fh.write(f"tfwi {__version__}\n")


def _load_dataset(path):
    try:
        return Dataset(path)
    except (FileNotFoundError, ManifestError) as exc:
        raise ArtifactError(
            f"no dataset at {path} ({exc}); run 'tfwi gen-data' first")


def _load_tokenizer(path):
    try:
        return load_tokenizer(path)
    except FileNotFoundError:
        raise ArtifactError(
            f"no tokenizer checkpoint at {path}; run 'tfwi train-tokenizer' "
            f"first")


def _load_backbone(path):
    try:
        return load_backbone(path)
    except FileNotFoundError:
        raise ArtifactError(
            f"no backbone checkpoint at {path}; run 'tfwi train-backbone' "
            f"first")


def _norm_maps(ds, idx, norm):
    return np.stack([norm.normalize(ds.velocity(i)) for i in idx])


# --- subcommands -----------------------------------------------------------

def cmd_gen_data(args):
    cfg = PipelineConfig.from_file(args.config)
    geom = cfg.geometry()
    count = cfg["dataset.count"]
    families = cfg["families"]
    base = cfg["seeds.data"]
    shape = (cfg["geometry.width"], cfg["geometry.width"])
    n_aug = int(round(cfg["dataset.augmented_fraction"] * count))
    maps, fams, seeds, augmented = [], [], [], []
    for i in range(count - n_aug):
        fam = families[i % len(families)]
        maps.append(generate_velocity(FamilySpec(fam, seed=base), i,
                                      shape=shape, dx=cfg["geometry.dx"]))
        fams.append(fam)
        seeds.append(i)
        augmented.append(0)
    for j in range(n_aug):
        # hybrid augmentation: splice two procedural parents
        i = count - n_aug + j
        fam_a = families[j % len(families)]
        fam_b = families[(j + 1) % len(families)]
        a = generate_velocity(FamilySpec(fam_a, seed=base + 1), i, shape=shape,
                              dx=cfg["geometry.dx"])
        b = generate_velocity(FamilySpec(fam_b, seed=base + 2), i, shape=shape,
                              dx=cfg["geometry.dx"])
        maps.append(hybrid_mix(a, b, seed=i))
        fams.append(fam_a)
        seeds.append(i)
        augmented.append(1)
    ds = build_pairs(maps, geom, args.out, fams, seeds, augmented,
                     threads=args.threads)
    _stamp(cfg, args.out)
    print(f"gen-data: {len(ds)} pairs in {args.out} "
          f"({len(ds.indices('train'))} train, {len(ds.indices('val'))} val)")
    return 0


def cmd_train_tokenizer(args):
    cfg = PipelineConfig.from_file(args.config)
    ds = _load_dataset(args.data)
    norm = NormalizationSpec()
    train_maps = _norm_maps(ds, ds.indices("train"), norm)
    val_maps = _norm_maps(ds, ds.indices("val"), norm)
    tok = train_tokenizer(train_maps, cfg.tokenizer_config(),
                          seed=cfg["seeds.tokenizer"],
                          val_maps=val_maps if len(val_maps) else None)
    _stamp(cfg, args.out)
    ckpt = os.path.join(args.out, "tokenizer.ckpt")
    save_tokenizer(tok, ckpt)
    recon = np.stack([tok.reconstruct(m) for m in val_maps]) \
        if len(val_maps) else np.empty((0,) + train_maps.shape[1:])
    val_mae = float(np.abs(recon - val_maps).mean()) if len(val_maps) else np.nan
    with open(os.path.join(args.out, "tokenizer.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "val_mae", "codebook_usage"])
        w.writerow([tok.cfg.variant, f"{val_mae:.6f}",
                    f"{tok.codebook.usage_fraction():.4f}"])
    print(f"train-tokenizer: {tok.cfg.variant} saved to {ckpt}, "
          f"val MAE {val_mae:.4f}")
    return 0


def _training_triples(ds, tok, bb_cfg, norm):
    idx = ds.indices("train")
    maps = _norm_maps(ds, idx, norm)
    tokens = np.stack([tok.tokenize(m) for m in maps])
    gathers = np.stack([ds.gather(i) for i in idx])
    d_ids = np.array([bb_cfg.family_id(ds.family(i)) for i in idx])
    return gathers, tokens, d_ids


def cmd_train_backbone(args):
    cfg = PipelineConfig.from_file(args.config)
    ds = _load_dataset(args.data)
    tok = _load_tokenizer(args.tokenizer)
    bb_cfg = cfg.backbone_config(tok.cfg, mode=args.mode)
    model = Backbone(bb_cfg, np.random.default_rng(cfg["seeds.backbone"]))
    gathers, tokens, d_ids = _training_triples(ds, tok, bb_cfg,
                                               NormalizationSpec())
    history = train_backbone(model, tok.codebook.entries.data, gathers,
                             tokens, d_ids, steps=cfg["backbone.train_steps"],
                             batch=cfg["backbone.batch"],
                             lr=cfg["backbone.lr"],
                             seed=cfg["seeds.backbone"])
    _stamp(cfg, args.out)
    ckpt = os.path.join(args.out, "backbone.ckpt")
    save_backbone(model, ckpt)
    with open(os.path.join(args.out, "loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(history):
            w.writerow([i, f"{v:.8f}"])
    curve_png(os.path.join(args.out, "loss.png"),
              np.arange(len(history)), history, "step", "cross entropy",
              f"{bb_cfg.mode} backbone")
    print(f"train-backbone: {bb_cfg.mode} saved to {ckpt}, "
          f"final loss {history[-1]:.4f}")
    return 0


def cmd_rl_finetune(args):
    cfg = PipelineConfig.from_file(args.config)
    ds = _load_dataset(args.data)
    tok = _load_tokenizer(args.tokenizer)
    model = _load_backbone(args.backbone)
    norm = NormalizationSpec()
    idx = ds.indices("train")
    gathers = np.stack([ds.gather(i) for i in idx])
    maps = _norm_maps(ds, idx, norm)
    d_ids = np.array([model.cfg.family_id(ds.family(i)) for i in idx])
    model, history = rl_finetune(model, tok, gathers, maps, d_ids,
                                 cfg.rl_config(), seed=cfg["seeds.rl"])
    _stamp(cfg, args.out)
    ckpt = os.path.join(args.out, "backbone.ckpt")
    save_backbone(model, ckpt)
    write_reward_csv(history, os.path.join(args.out, "rewards.csv"))
    curve_png(os.path.join(args.out, "rewards.png"),
              [h["iteration"] for h in history],
              [h["mean_reward"] for h in history],
              "iteration", "mean reward", "policy fine-tuning")
    print(f"rl-finetune: saved to {ckpt}, "
          f"last mean reward {history[-1]['mean_reward']:.4f}")
    return 0


def _predict_tokens(model, entries, gather, d_id, mode, temperature, seed):
    g = gather[None]
    ids = np.array([d_id])
    if mode == "causal":
        return decode_causal(model, entries, g, ids)[0]
    if mode == "parallel":
        return decode_parallel(model, entries, g, ids)[0]
    return sample(model, entries, g, ids, temperature=temperature,
                  seed=seed)[0]


def cmd_invert(args):
    cfg = PipelineConfig.from_file(args.config)
    ds = _load_dataset(args.data)
    tok = _load_tokenizer(args.tokenizer)
    model = _load_backbone(args.backbone)
    geom = ds.geometry()
    entries = tok.codebook.entries.data
    idx = ds.indices(args.split) if args.split != "all" else ds.indices()
    if args.index is not None:
        idx = [args.index]
    if not idx:
        raise ArtifactError(f"split {args.split!r} has no samples")
    refine_on = args.refine == "on"
    _stamp(cfg, args.out)
    rows = []
    for i in idx:
        gather = ds.gather(i)
        d_id = model.cfg.family_id(ds.family(i))
        if args.ensemble > 1:
            spec = EnsembleSpec(
                n=args.ensemble, temperature=cfg["refine.temperature"],
                refine_config=cfg.refine_config(args.threads)
                if refine_on else RefineConfig(max_iters=0))
            vm, _ = ensemble_invert(model, tok, gather_asarray(ds, i), d_id,
                                    geom, spec, seed=cfg["seeds.sample"] + i)
        else:
            tokens = _predict_tokens(model, entries, gather, d_id, args.mode,
                                     cfg["refine.temperature"],
                                     cfg["seeds.sample"] + i)
            with ad.no_grad():
                z0 = tok.lookup(tokens).numpy()
            if refine_on:
                vm, _ = refine_latent(tok, z0, gather_asarray(ds, i), geom,
                                      cfg.refine_config(args.threads))
            else:
                vm = decode_to_map(tok, z0)
        save_array(os.path.join(args.out, f"pred_{i:04d}.npy"), vm.grid)
        rows.append([i, ds.family(i), ds.seed(i),
                     ds.samples[i]["split"]])
    with open(os.path.join(args.out, "predictions.csv"), "w",
              newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "family", "seed", "split"])
        w.writerows(rows)
    print(f"invert: {len(rows)} predictions in {args.out} "
          f"(mode {args.mode}, ensemble {args.ensemble}, "
          f"refine {args.refine})")
    return 0


def cmd_refine(args):
    cfg = PipelineConfig.from_file(args.config)
    ds = _load_dataset(args.data)
    tok = _load_tokenizer(args.tokenizer)
    model = _load_backbone(args.backbone)
    geom = ds.geometry()
    entries = tok.codebook.entries.data
    i = args.index
    gather = ds.gather(i)
    d_id = model.cfg.family_id(ds.family(i))
    tokens = _predict_tokens(model, entries, gather, d_id, args.mode,
                             cfg["refine.temperature"],
                             cfg["seeds.sample"] + i)
    with ad.no_grad():
        z0 = tok.lookup(tokens).numpy()
    before = decode_to_map(tok, z0)
    vm, state = refine_latent(tok, z0, gather_asarray(ds, i), geom,
                              cfg.refine_config(args.threads))
    _stamp(cfg, args.out)
    write_residual_csv(state, os.path.join(args.out, "residuals.csv"))
    save_array(os.path.join(args.out, "before.npy"), before.grid)
    save_array(os.path.join(args.out, "after.npy"), vm.grid)
    write_pgm(os.path.join(args.out, "after.pgm"), vm.grid)
    velocity_png(os.path.join(args.out, "refine.png"),
                 [ds.velocity(i), before.grid, vm.grid],
                 ["truth", "decoded", "refined"])
    curve_png(os.path.join(args.out, "residuals.png"),
              np.arange(len(state.residuals)), state.residuals,
              "accepted step", "seismic residual", "latent refinement")
    print(f"refine: sample {i}, residual {state.residuals[0]:.3e} -> "
          f"{state.residuals[-1]:.3e} in {state.accepted_steps} steps")
    return 0


def cmd_eval(args):
    cfg = PipelineConfig.from_file(args.config)
    ds = _load_dataset(args.data)
    idx = ds.indices(args.split) if args.split != "all" else ds.indices()
    if not idx:
        raise ArtifactError(f"split {args.split!r} has no samples")
    truths = np.stack([ds.velocity(i) for i in idx])
    if args.pred is None:
        preds = truths.copy()  # self-evaluation sanity row
    else:
        preds = []
        for i in idx:
            path = os.path.join(args.pred, f"pred_{i:04d}.npy")
            if not os.path.exists(path):
                raise ArtifactError(
                    f"missing prediction {path}; run 'tfwi invert' first")
            preds.append(np.load(path))
        preds = np.stack(preds)
    norm = NormalizationSpec()
    rep_phys = MetricReport(preds, truths, "physical")
    rep_norm = MetricReport(norm.normalize(np.clip(preds, 1500.0, 4500.0)),
                            norm.normalize(truths), "normalized")
    _stamp(cfg, args.out)
    row = {"run_id": args.run_id, "config_tag": args.tag,
           "mae_norm": rep_norm.mean_mae, "mae_phys": rep_phys.mean_mae,
           "rmse_phys": rep_phys.mean_rmse, "ssim": rep_phys.mean_ssim}
    text = write_report([row], os.path.join(args.out, "metrics.csv"))
    with open(os.path.join(args.out, "per_sample.csv"), "w",
              newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "mae_phys", "rmse_phys", "ssim"])
        for j, i in enumerate(idx):
            w.writerow([i, f"{rep_phys.mae[j]:.6f}",
                        f"{rep_phys.rmse[j]:.6f}", f"{rep_phys.ssim[j]:.6f}"])
    velocity_png(os.path.join(args.out, "comparison.png"),
                 [truths[0], preds[0]], ["truth", "prediction"])
    curve_png(os.path.join(args.out, "mae_per_sample.png"),
              np.arange(len(idx)), rep_phys.mae, "sample", "MAE (m/s)",
              args.tag)
    sys.stdout.write(text)
    return 0


def cmd_export_figure(args):
    cfg = PipelineConfig.from_file(args.config)
    ds = _load_dataset(args.data)
    i = args.index
    grid = ds.velocity(i)
    _stamp(cfg, args.out)
    stem = os.path.join(args.out, f"velocity_{i:04d}")
    write_pgm(stem + ".pgm", grid)
    save_array(stem + ".npy", grid)
    velocity_png(stem + ".png", [grid], [f"{ds.family(i)} seed {ds.seed(i)}"])
    gather_png(os.path.join(args.out, f"gather_{i:04d}.png"),
               ds.gather(i)[0])
    print(f"export-figure: sample {i} written under {args.out}")
    return 0


# --- argument wiring --------------------------------------------------------

def _add_common(p, *needs):
    p.add_argument("--config", help="config file (or $TFWI_CONFIG)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=1,
                   help="worker-thread cap (results identical)")
    if "data" in needs:
        p.add_argument("--data", required=True, help="dataset directory")
    if "tokenizer" in needs:
        p.add_argument("--tokenizer", required=True,
                       help="tokenizer checkpoint")
    if "backbone" in needs:
        p.add_argument("--backbone", required=True,
                       help="backbone checkpoint")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="tfwi",
        description="desk-scale data-driven full waveform inversion")
    ap.add_argument("--version", action="version",
                    version=f"tfwi {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate paired velocity/gather data")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-tokenizer", help="fit a VQ tokenizer")
    _add_common(p, "data")
    p.set_defaults(fn=cmd_train_tokenizer)

    p = sub.add_parser("train-backbone", help="train the sequence model")
    _add_common(p, "data", "tokenizer")
    p.add_argument("--mode", choices=("causal", "full"), default=None,
                   help="override backbone.mode from the config")
    p.set_defaults(fn=cmd_train_backbone)

    p = sub.add_parser("rl-finetune", help="reward-weighted fine-tuning")
    _add_common(p, "data", "tokenizer", "backbone")
    p.set_defaults(fn=cmd_rl_finetune)

    p = sub.add_parser("invert", help="predict velocity maps from gathers")
    _add_common(p, "data", "tokenizer", "backbone")
    p.add_argument("--mode", choices=("causal", "parallel", "sample"),
                   default="parallel")
    p.add_argument("--ensemble", type=int, default=1)
    p.add_argument("--refine", choices=("on", "off"), default="off")
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.add_argument("--index", type=int, default=None,
                   help="invert one sample instead of a split")
    p.set_defaults(fn=cmd_invert)

    p = sub.add_parser("refine", help="latent refinement diagnostic")
    _add_common(p, "data", "tokenizer", "backbone")
    p.add_argument("--mode", choices=("causal", "parallel", "sample"),
                   default="parallel")
    p.add_argument("--index", type=int, required=True)
    p.set_defaults(fn=cmd_refine)

    p = sub.add_parser("eval", help="score predictions against a dataset")
    _add_common(p, "data")
    p.add_argument("--pred", default=None,
                   help="prediction directory (omit for self-evaluation)")
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.add_argument("--run-id", default="r0")
    p.add_argument("--tag", default="baseline")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export-figure", help="render one sample's figures")
    _add_common(p, "data")
    p.add_argument("--index", type=int, required=True)
    p.set_defaults(fn=cmd_export_figure)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
