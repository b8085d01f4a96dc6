"""Operator command line: one binary, one subcommand per pipeline stage.

Outputs land under --out with a manifest.json recording the resolved config,
its hash, the master seed, and package versions, so any run can be replayed
from the manifest alone. Exit codes: 0 success, 2 config error, 3 runtime
error.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, baselines, datasets, evaluation, linalg, nn, obfuscator, splitwire
from .errors import ConfigError, SplitShieldError

log = logging.getLogger("splitshield.cli")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def _require(obj, key, where):
    if key not in obj:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return obj[key]


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    _check_keys(
        cfg,
        {"dataset", "model", "train", "sweep", "profile", "at", "adversary", "seed"},
        "config",
    )
    return cfg


def resolve_dataset(section, seed=None):
    _check_keys(
        section,
        {"path", "n_examples", "input_dim", "target_classes", "hidden", "noise_std", "seed"},
        "dataset",
    )
    if "path" in section:
        return datasets.load_idx(section["path"])
    hidden = {}
    for name, h in _require(section, "hidden", "dataset").items():
        _check_keys(h, {"classes", "coupling", "rho"}, f"dataset.hidden.{name}")
        hidden[name] = datasets.HiddenSpec(
            classes=_require(h, "classes", f"dataset.hidden.{name}"),
            coupling=h.get("coupling", datasets.COUPLING_ORTHOGONAL),
            rho=h.get("rho", 0.0),
        )
    spec = datasets.SynthSpec(
        n_examples=_require(section, "n_examples", "dataset"),
        input_dim=_require(section, "input_dim", "dataset"),
        target_classes=_require(section, "target_classes", "dataset"),
        hidden=hidden,
        noise_std=section.get("noise_std", 0.0),
        seed=section.get("seed", seed if seed is not None else 0),
    )
    return datasets.gen_synthetic(spec)


def build_model(section, dataset, seed):
    _check_keys(
        section,
        {"kind", "widths", "conv_channels", "fc_widths", "seed"},
        "model",
    )
    rng = np.random.default_rng(section.get("seed", seed))
    kind = section.get("kind", "mlp")
    if kind == "mlp":
        input_dim = int(np.prod(dataset.x.shape[1:]))
        return nn.mlp_model(
            input_dim, tuple(section.get("widths", (32, 16))), dataset.n_target_classes, rng
        )
    if kind == "table":
        if dataset.x.ndim != 4:
            raise ConfigError("table model needs (N, C, H, W) data")
        return nn.table_model(
            dataset.x.shape[1:],
            dataset.n_target_classes,
            rng,
            conv_channels=tuple(section.get("conv_channels", (16, 32, 64))),
            fc_widths=tuple(section.get("fc_widths", (128, 64))),
        )
    raise ConfigError(f"model.kind must be 'mlp' or 'table', got {kind!r}")


def train_config(section, seed):
    _check_keys(
        section,
        {"epochs", "lr", "lr_drop_epochs", "lr_drop_factor", "batch_size", "seed",
         "decov_weight", "gauss_prior_weight", "robustness_removal"},
        "train",
    )
    return nn.TrainConfig(
        epochs=section.get("epochs", 50),
        lr=section.get("lr", 0.001),
        lr_drop_epochs=tuple(section.get("lr_drop_epochs", (20, 40))),
        lr_drop_factor=section.get("lr_drop_factor", 10.0),
        batch_size=section.get("batch_size", 32),
        seed=section.get("seed", seed),
        decov_weight=section.get("decov_weight", 0.0),
        gauss_prior_weight=section.get("gauss_prior_weight", 0.0),
        robustness_removal=section.get("robustness_removal", False),
    )


def adversary_config(section, seed):
    _check_keys(
        section, {"epochs", "lr", "lr_drop_epochs", "batch_size", "seeds"}, "adversary"
    )
    return evaluation.AdversaryConfig(
        epochs=section.get("epochs", 50),
        lr=section.get("lr", 0.001),
        lr_drop_epochs=tuple(section.get("lr_drop_epochs", (20, 40))),
        batch_size=section.get("batch_size", 32),
        seeds=tuple(section.get("seeds", (0, 1, 2))),
    )


def write_manifest(out_dir, command, cfg, seed):
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    manifest = {
        "command": command,
        "config": cfg,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "seed": seed,
        "versions": {"splitshield": __version__, "numpy": np.__version__},
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1))


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args, cfg):
    out = _out_dir(args)
    dataset = resolve_dataset(_require(cfg, "dataset", "config"), args.seed)
    datasets.save_idx(dataset, out / "dataset")
    write_manifest(out, "gen-data", cfg, args.seed)
    return {"examples": int(dataset.x.shape[0]), "out": str(out / "dataset")}


def cmd_train(args, cfg):
    out = _out_dir(args)
    dataset = resolve_dataset(_require(cfg, "dataset", "config"), args.seed)
    model = build_model(cfg.get("model", {}), dataset, args.seed)
    tc = train_config(cfg.get("train", {}), args.seed)
    result = nn.train(
        model, dataset.x.astype(np.float64), dataset.y_tar, tc,
        train_indices=dataset.splits["train"],
    )
    nn.save_checkpoint(model, out / "model.ckpt", seed=args.seed)
    (out / "loss_history.json").write_text(
        json.dumps({"loss": result.loss_history, "aux": result.aux_history}, indent=1)
    )
    write_manifest(out, "train", cfg, args.seed)
    return {"final_loss": result.loss_history[-1], "checkpoint": str(out / "model.ckpt")}


def _load_model(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for this command")
    model, _ = nn.load_checkpoint(args.checkpoint)
    return model


def cmd_profile(args, cfg):
    out = _out_dir(args)
    dataset = resolve_dataset(_require(cfg, "dataset", "config"), args.seed)
    model = _load_model(args)
    section = cfg.get("profile", {})
    _check_keys(section, {"split_indices", "fractions"}, "profile")
    splits = section.get("split_indices", list(range(1, model.n_splits + 1)))
    fractions = section.get("fractions", list(nn.KEEP_FRACTIONS))
    profile = evaluation.build_profile(model, dataset, splits, fractions)
    rows = [
        {"split_index": r.split_index, "keep_fraction": r.keep_fraction, "drop": r.drop}
        for r in profile.rows
    ]
    (out / "profile.json").write_text(json.dumps(rows, indent=1, sort_keys=True))
    write_manifest(out, "profile", cfg, args.seed)
    return {"rows": len(rows), "out": str(out / "profile.json")}


def _sweep_common(args, cfg, mode):
    out = _out_dir(args)
    dataset = resolve_dataset(_require(cfg, "dataset", "config"), args.seed)
    model = _load_model(args)
    section = cfg.get("sweep", {})
    _check_keys(
        section, {"split_indices", "mode", "params", "finetune_epochs", "finetune_lr"}, "sweep"
    )
    splits = section.get("split_indices", [max(1, model.n_splits // 2 + 1)])
    params = _require(section, "params", "sweep")
    adv = adversary_config(cfg.get("adversary", {}), args.seed)
    finetune = None
    if mode == evaluation.MODE_PRUNE:
        finetune = baselines.PruneConfig(
            m_prime=0,
            finetune_epochs=section.get("finetune_epochs", 10),
            finetune_lr=section.get("finetune_lr", 1e-4),
            seed=args.seed,
        )
    points = evaluation.sweep(
        model, dataset, splits, params, mode=mode, adv_cfg=adv,
        master_seed=args.seed, jobs=args.jobs, finetune=finetune,
    )
    evaluation.write_csv(points, out / "sweep.csv")
    evaluation.write_json(points, out / "sweep.json")
    write_manifest(out, "sweep" if mode != evaluation.MODE_PRUNE else "prune-sweep",
                   cfg, args.seed)
    return {"points": len(points), "csv": str(out / "sweep.csv")}


def cmd_sweep(args, cfg):
    mode = cfg.get("sweep", {}).get("mode", evaluation.MODE_TOPM)
    if mode == evaluation.MODE_PRUNE:
        raise ConfigError("use the prune-sweep subcommand for pruning")
    return _sweep_common(args, cfg, mode)


def cmd_prune_sweep(args, cfg):
    return _sweep_common(args, cfg, evaluation.MODE_PRUNE)


def cmd_cumulative(args, cfg):
    out = _out_dir(args)
    dataset = resolve_dataset(_require(cfg, "dataset", "config"), args.seed)
    model = _load_model(args)
    xs = dataset.x[dataset.splits["test"]].astype(np.float64)
    profile = obfuscator.cumulative_signal_content(model, xs)
    with open(out / "cumulative.csv", "w") as fh:
        fh.write("split_index,mean_cs,cumulative,skipped\n")
        for i, si in enumerate(profile.split_indices):
            fh.write(
                f"{si},{profile.mean_cs[i]:.6f},{profile.cumulative[i]:.6f},"
                f"{profile.skipped[i]}\n"
            )
    write_manifest(out, "cumulative", cfg, args.seed)
    return {"csv": str(out / "cumulative.csv")}


def cmd_obfuscate(args, cfg):
    out = _out_dir(args)
    w = np.load(args.weight)
    z = np.load(args.vector)
    basis = linalg.svd(w)
    if args.mode == "topm":
        if args.m_prime is None:
            raise ConfigError("--m-prime required for topm mode")
        res = obfuscator.obfuscate_topm(z, basis, args.m_prime)
    elif args.mode == "budget":
        if args.epsilon is None:
            raise ConfigError("--epsilon required for budget mode")
        res = obfuscator.obfuscate_budget(z, basis, args.epsilon)
    elif args.mode == "free":
        res = obfuscator.obfuscate_free(z, basis)
    else:
        raise ConfigError(f"unknown mode {args.mode!r}")
    payload = {
        "mode": res.mode,
        "m_prime": res.m_prime,
        "gamma": res.gamma,
        "achieved_distortion": res.achieved_distortion,
        "alpha_prime": [float(a) for a in res.alpha_prime],
        "degenerate": res.degenerate,
    }
    (out / "obfuscated.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    write_manifest(out, "obfuscate", cfg, args.seed)
    return {"m_prime": res.m_prime, "out": str(out / "obfuscated.json")}


def cmd_evaluate(args, cfg):
    out = _out_dir(args)
    dataset = resolve_dataset(_require(cfg, "dataset", "config"), args.seed)
    model = _load_model(args)
    si = args.split or model.split_index
    mode = args.mode or "none"
    param = args.m_prime if args.m_prime is not None else args.epsilon
    feats, comm = evaluation.obfuscated_features(
        model, si, dataset.x.astype(np.float64),
        {"none": "none", "free": "free", "topm": "topm", "budget": "budget"}[mode],
        param,
    )
    _, ms, _ = nn.split(model, si)
    te = dataset.splits["test"]
    probs = nn.run_layers(ms, feats[te])
    preds = probs.argmax(axis=1)
    acc = evaluation.accuracy(probs, dataset.y_tar[te])
    payload = {
        "split_index": si,
        "mode": mode,
        "target_accuracy": acc,
        "comm_floats": comm,
        "predictions": [int(p) for p in preds],
        "test_indices": [int(i) for i in te],
    }
    (out / "evaluate.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    write_manifest(out, "evaluate", cfg, args.seed)
    return {"target_accuracy": acc, "out": str(out / "evaluate.json")}


def cmd_serve(args, cfg):
    model = _load_model(args)
    host, port = args.bind.rsplit(":", 1)
    profile_rows = []
    if args.profile:
        for row in json.loads(Path(args.profile).read_text()):
            profile_rows.append((row["split_index"], row["keep_fraction"], row["drop"]))
    server = splitwire.InferenceServer(
        model, bind_address=(host, int(port)), profile_rows=profile_rows
    )
    actual = server.address
    print(json.dumps({"listening": f"{actual[0]}:{actual[1]}"}), flush=True)
    server.start()
    try:
        server._thread.join()
    except KeyboardInterrupt:
        server.stop()
    return {}


def cmd_infer(args, cfg):
    dataset = resolve_dataset(_require(cfg, "dataset", "config"), args.seed)
    model = _load_model(args)
    host, port = args.connect.rsplit(":", 1)
    x = dataset.x.astype(np.float64)[args.index]
    mode = args.mode or "free"
    param = args.m_prime if args.m_prime is not None else args.epsilon
    with splitwire.ClientSession(host, int(port), model=model) as sess:
        resp = sess.infer(x, args.split or model.split_index, mode, param)
    return {
        "index": args.index,
        "predicted": int(resp.predicted),
        "probabilities": [float(p) for p in resp.probabilities],
    }


def cmd_at_train(args, cfg):
    out = _out_dir(args)
    dataset = resolve_dataset(_require(cfg, "dataset", "config"), args.seed)
    model = build_model(cfg.get("model", {}), dataset, args.seed)
    section = cfg.get("at", {})
    _check_keys(
        section,
        {"gamma_at", "inner_adversary_steps", "outer_epochs", "lr", "batch_size",
         "adversary_reinit_epochs", "attribute", "split_index"},
        "at",
    )
    model.split_index = section.get("split_index", model.split_index)
    at_cfg = baselines.ATConfig(
        gamma_at=section.get("gamma_at", 0.5),
        inner_adversary_steps=section.get("inner_adversary_steps", 5),
        outer_epochs=section.get("outer_epochs", 20),
        seed=args.seed,
        lr=section.get("lr", 0.001),
        batch_size=section.get("batch_size", 32),
        adversary_reinit_epochs=section.get("adversary_reinit_epochs", 10),
        attribute=section.get("attribute"),
    )
    model, _, logbook = baselines.adversarial_train(model, dataset, at_cfg)
    nn.save_checkpoint(model, out / "at_model.ckpt", seed=args.seed)
    (out / "at_log.json").write_text(json.dumps(logbook, indent=1))
    write_manifest(out, "at-train", cfg, args.seed)
    return {"checkpoint": str(out / "at_model.ckpt"),
            "final_target_loss": logbook["target_loss"][-1]}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "profile": cmd_profile,
    "sweep": cmd_sweep,
    "cumulative": cmd_cumulative,
    "obfuscate": cmd_obfuscate,
    "evaluate": cmd_evaluate,
    "serve": cmd_serve,
    "infer": cmd_infer,
    "at-train": cmd_at_train,
    "prune-sweep": cmd_prune_sweep,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="splitshield")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--out", default="out")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--json", action="store_true")
        p.add_argument("--checkpoint", default=None)
        if name == "obfuscate":
            p.add_argument("--weight", required=True)
            p.add_argument("--vector", required=True)
        if name in ("obfuscate", "evaluate", "infer"):
            p.add_argument("--mode", default=None)
            p.add_argument("--m-prime", dest="m_prime", type=int, default=None)
            p.add_argument("--epsilon", type=float, default=None)
        if name in ("evaluate", "infer"):
            p.add_argument("--split", type=int, default=None)
        if name == "infer":
            p.add_argument("--connect", required=True)
            p.add_argument("--index", type=int, default=0)
        if name == "serve":
            p.add_argument("--bind", default="127.0.0.1:0")
            p.add_argument("--profile", default=None)
    return parser


def main(argv=None):
    level = LOG_LEVELS.get(os.environ.get("SPLITSHIELD_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else {}
        result = COMMANDS[args.command](args, cfg)
        print(json.dumps(result, sort_keys=True))
        return 0
    except ConfigError as exc:
        _emit_error(args, exc, kind="config")
        return 2
    except (SplitShieldError, OSError, ValueError) as exc:
        _emit_error(args, exc, kind="runtime")
        return 3


def _emit_error(args, exc, kind):
    if getattr(args, "json", False):
        print(json.dumps({"error": {"kind": kind, "message": str(exc)}}), file=sys.stderr)
    else:
        print(f"splitshield: {kind} error: {exc}", file=sys.stderr)
    log.debug("error detail", exc_info=exc)


if __name__ == "__main__":
    sys.exit(main())
