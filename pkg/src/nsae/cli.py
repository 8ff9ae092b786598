"""Command-line entry point: ``nsae <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as X
from .analysis import DegeneracyError, compare_extractors, dump_embeddings, model_extractor
from .config import ConfigError, RunConfig, config_echo, load_config
from .datasets import SamplingError, SplitError, save_dataset
from .model import PROFILES, ConfigurationError, load_checkpoint
from .train import DivergenceError

log = logging.getLogger("nsae")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4
PRETRAIN_VARIANTS = ("baseline", "SAE", "SAE*", "NSAE")


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_echo(cfg: RunConfig) -> None:
    out = _out(cfg)
    (out / "config.yaml").write_text(f"# config_hash: {cfg.hash()}\n" + config_echo(cfg))


def _cache(cfg: RunConfig) -> Path:
    return _out(cfg) / "checkpoints"


def _combo(args, cfg: RunConfig) -> str:
    return args.combo or cfg.loss.combo


# ---------------------------------------------------------------- commands
def cmd_generate(cfg: RunConfig, args) -> None:
    data = X.build_benchmark(cfg)
    root = _out(cfg) / "data"
    for name, ds in data.items():
        path = save_dataset(ds, root / name, {"config_hash": cfg.hash(), "seed": cfg.seed})
        print(f"{name}: {len(ds)} images, {len(ds.classes)} classes -> {path}")


def cmd_pretrain(cfg: RunConfig, args) -> None:
    variant = args.variant or cfg.loss.variant
    if variant not in PRETRAIN_VARIANTS:
        raise ConfigError(f"pretrain --variant must be one of {PRETRAIN_VARIANTS}")
    data = X.build_benchmark(cfg, targets=[])
    loss_cfg = X.loss_for(cfg, variant, _combo(args, cfg))
    X.pretrained_model(cfg, loss_cfg, data["source"], _cache(cfg), progress=True)
    print(_cache(cfg) / X.pretrain_key(cfg, loss_cfg))


def cmd_finetune_eval(cfg: RunConfig, args) -> None:
    data = X.build_benchmark(cfg)
    variant = args.variant or cfg.loss.variant
    if variant not in X.VARIANT_PLAN:
        raise ConfigError(f"--variant must be one of {tuple(X.VARIANT_PLAN)}")
    pre_variant, two = X.VARIANT_PLAN[variant]
    if args.two_step is not None:
        two = args.two_step
    loss_cfg = X.loss_for(cfg, pre_variant, _combo(args, cfg))
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        model, _ = X.pretrained_model(cfg, loss_cfg, data["source"], _cache(cfg), progress=True)
    out = _out(cfg) / "eval"
    out.mkdir(exist_ok=True)
    for target in cfg.data.targets:
        for k in cfg.protocol.k_values:
            rep = X.evaluate(model, data[target], cfg, loss_cfg, two, variant, k_shot=k)
            stem = f"{variant}_{loss_cfg.combo}_{target}_k{k}".replace("*", "star").replace("+", "-")
            rep.write(out / f"{stem}.json", out / "reports.csv")
            print(f"{variant} {loss_cfg.combo} {target} K={k}: {100 * rep.mean:.2f} +- {100 * rep.ci95:.2f}")


def cmd_ablate(cfg: RunConfig, args) -> None:
    variants = [args.variant] if args.variant else list(cfg.ablation.variants)
    combos = [args.combo] if args.combo else list(cfg.ablation.combos)
    data = X.build_benchmark(cfg)
    table = X.run_ablation(variants, combos, data, cfg, _cache(cfg), progress=True)
    csv_path, _ = table.write(_out(cfg), "ablation")
    print(csv_path.read_text(), end="")


def cmd_icc(cfg: RunConfig, args) -> None:
    if not (args.checkpoint_a and args.checkpoint_b):
        raise ConfigError("icc needs --checkpoint-a and --checkpoint-b")
    a, meta_a = load_checkpoint(args.checkpoint_a)
    b, meta_b = load_checkpoint(args.checkpoint_b)
    if a.profile != b.profile:
        raise ConfigError(f"checkpoints use different model profiles ({a.profile.name} vs {b.profile.name})")
    if a.profile.name != cfg.profile:
        raise ConfigError(f"checkpoints use profile {a.profile.name} but the run is configured for {cfg.profile}")
    domains = [d for d in cfg.icc.domains if d != "source"]
    data = X.build_benchmark(cfg, targets=domains)
    datasets = {d: data[d] for d in cfg.icc.domains}
    names = (meta_a.get("variant", "a"), meta_b.get("variant", "b"))
    rep = compare_extractors(model_extractor(a), model_extractor(b), datasets, cfg.icc.classes_per_rep,
                             cfg.icc.reps, cfg.seed, names, cfg.hash())
    out = _out(cfg)
    (out / "icc.json").write_text(rep.to_json())
    (out / "icc.csv").write_text(rep.to_csv())
    if args.dump_embeddings:
        for d, ds in datasets.items():
            classes = ds.classes[: cfg.icc.classes_per_rep]
            dump_embeddings(model_extractor(a), ds, classes, out / f"embeddings_a_{d}.bin")
            dump_embeddings(model_extractor(b), ds, classes, out / f"embeddings_b_{d}.bin")
    print(rep.to_csv(), end="")


def cmd_noise_study(cfg: RunConfig, args) -> None:
    data = X.build_benchmark(cfg)
    table = X.noise_study(data, cfg, _cache(cfg), progress=True)
    csv_path, _ = table.write(_out(cfg), "noise_study")
    print(csv_path.read_text(), end="")


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "finetune-eval": cmd_finetune_eval,
    "ablate": cmd_ablate,
    "icc": cmd_icc,
    "noise-study": cmd_noise_study,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--jobs", type=int, help="worker processes for episode evaluation")
    common.add_argument("--profile", choices=sorted(PROFILES))
    common.add_argument("--out", help="output directory (nothing is written elsewhere)")
    common.add_argument("--episodes", type=int, help="override protocol.episodes")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nsae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("pretrain", "finetune-eval", "ablate"):
            p.add_argument("--variant")
            p.add_argument("--combo", help="loss combination, e.g. BSR+CE")
        if name == "finetune-eval":
            p.add_argument("--checkpoint", type=Path)
            g = p.add_mutually_exclusive_group()
            g.add_argument("--two-step", dest="two_step", action="store_true", default=None)
            g.add_argument("--one-step", dest="two_step", action="store_false")
        if name == "icc":
            p.add_argument("--checkpoint-a", type=Path)
            p.add_argument("--checkpoint-b", type=Path)
            p.add_argument("--dump-embeddings", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, seed=args.seed, profile=args.profile, out=args.out, jobs=args.jobs)
        if args.episodes is not None:
            if args.episodes < 1:
                raise ConfigError("--episodes must be >= 1")
            cfg.protocol.episodes = args.episodes
        _write_echo(cfg)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, ConfigurationError, SamplingError, SplitError, DegeneracyError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"numerical divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
