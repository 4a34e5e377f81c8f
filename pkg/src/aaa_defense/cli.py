"""Experiment runner: train/attack/eval/report subcommands over JSON configs.

Configs are strictly validated (unknown keys are errors, not warnings) and
canonicalized before hashing, so semantically identical configs share a
digest regardless of key order. Every artifact written embeds the digest
of the config that produced it. Checkpoints and reports are written to a
temp file and atomically renamed, so interrupted runs leave no partial
artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import evaluation as ev
from . import models as mm
from . import training as tr
from .attacks import (AttackConfig, AttackError, cw_l2, fgsm, latent_match,
                      pgd_linf, pgd_with_recon_loss)
from .data import (CORRUPTION_KINDS, DataError, LabeledDataset, digits_dataset,
                   load_idx, synth_dataset, write_idx)
from .evaluation import EvaluationReport, emit_report
from .models import CheckpointError, ModelError
from .training import TrainingConfig, TrainingError


class ConfigError(RuntimeError):
    pass


SUBCOMMANDS = ("train-natural", "train-adv", "train-aaa", "attack", "eval",
               "eval-transfer", "eval-corruption", "report")

# exit codes per error class
EXIT_CODES = {
    ConfigError: 2,
    DataError: 3,
    CheckpointError: 4,
    ModelError: 4,
    TrainingError: 5,
    AttackError: 6,
    ev.EvaluationError: 6,
    FileNotFoundError: 3,
}


# -- schema ------------------------------------------------------------------
# A schema maps key -> (type(s), default) where default REQUIRED means the
# key must be present; nested dict/list schemas validate recursively.

REQUIRED = object()
_NUM = (int, float)

ATTACK_SCHEMA = {
    "epsilon": (_NUM, REQUIRED),
    "step_size": (_NUM, 0.01),
    "num_steps": (int, 40),
    "num_restarts": (int, 1),
    "random_init": (bool, True),
    "cw_constant": (_NUM, 100.0),
    "cw_confidence": (_NUM, 0.0),
    "cw_steps": (int, 200),
    "cw_learning_rate": (_NUM, 0.01),
    "seed": (int, 0),
}

DATASET_SCHEMA = {
    "source": (str, REQUIRED),          # digits | idx | synth
    "kind": (str, ""),                  # synth kind
    "n": (int, 0),
    "train_n": (int, 10000),
    "test_n": (int, 2000),
    "seed": (int, 0),
    "train_images": (str, ""),
    "train_labels": (str, ""),
    "test_images": (str, ""),
    "test_labels": (str, ""),
    "write_idx_dir": (str, ""),
}

_TRAIN_COMMON = {
    "dataset": (DATASET_SCHEMA, REQUIRED),
    "epochs": (int, REQUIRED),
    "batch_size": (int, 128),
    "lr": (_NUM, 0.001),
    "attack_warmup_epochs": (int, 0),
    "patience": (int, 5),
    "decay_factor": (_NUM, 0.1),
    "val_fraction": (_NUM, 0.1),
    "seed": (int, 0),
    "out_checkpoint": (str, REQUIRED),
}

SCHEMAS = {
    "train-natural": {
        **_TRAIN_COMMON,
        "arch": (str, REQUIRED),
        "num_classes": (int, 10),
        "input_shape": (list, [1, 28, 28]),
        "init_seed": (int, 0),
    },
    "train-adv": {
        **_TRAIN_COMMON,
        "arch": (str, REQUIRED),
        "num_classes": (int, 10),
        "input_shape": (list, [1, 28, 28]),
        "init_seed": (int, 0),
        "init_checkpoint": (str, ""),
        "attack": (ATTACK_SCHEMA, REQUIRED),
    },
    "train-aaa": {
        **_TRAIN_COMMON,
        "ae_kind": (str, "conv-ae"),
        "init_seed": (int, 0),
        "ensemble_checkpoints": (list, REQUIRED),
        "loss_kind": (str, "Lxm"),
        "lambda": ((int, float, str), "auto"),
        "attack": (ATTACK_SCHEMA, REQUIRED),
    },
    "attack": {
        "dataset": (DATASET_SCHEMA, REQUIRED),
        "checkpoint": (str, ""),
        "ae_checkpoint": (str, ""),
        "classifier_checkpoint": (str, ""),
        "attack_kind": (str, REQUIRED),  # fgsm | pgd | cw | pgd-recon | latent
        "attack": (ATTACK_SCHEMA, REQUIRED),
        "recon_mix": (_NUM, 0.0),
        "n": (int, 200),
        "seed": (int, 0),
        "out_npz": (str, REQUIRED),
    },
    "eval": {
        "dataset": (DATASET_SCHEMA, REQUIRED),
        "checkpoint": (str, ""),
        "ae_checkpoint": (str, ""),
        "classifier_checkpoint": (str, ""),
        "protocols": (list, ["clean"]),
        "attack": (ATTACK_SCHEMA, None),
        "cw": (ATTACK_SCHEMA, None),
        "cw_threshold": (_NUM, 3.0),
        "n_eval": (int, 1000),
        "seed": (int, 0),
        "out_report": (str, REQUIRED),
        "format": (str, "structured-text"),
        "name": (str, "model"),
    },
    "eval-transfer": {
        "dataset": (DATASET_SCHEMA, REQUIRED),
        "ae_checkpoint": (str, REQUIRED),
        "transfer_checkpoint": (str, REQUIRED),
        "attack": (ATTACK_SCHEMA, None),
        "cw": (ATTACK_SCHEMA, None),
        "cw_threshold": (_NUM, 3.0),
        "n_eval": (int, 1000),
        "seed": (int, 0),
        "out_report": (str, REQUIRED),
        "format": (str, "structured-text"),
        "name": (str, "transfer"),
    },
    "eval-corruption": {
        "dataset": (DATASET_SCHEMA, REQUIRED),
        "checkpoint": (str, ""),
        "ae_checkpoint": (str, ""),
        "classifier_checkpoint": (str, ""),
        "baseline_checkpoint": (str, ""),
        "kinds": (list, list(CORRUPTION_KINDS)),
        "severities": (list, [0, 1, 2, 3, 4, 5]),
        "n_eval": (int, 1000),
        "seed": (int, 0),
        "out_report": (str, REQUIRED),
        "format": (str, "structured-text"),
        "name": (str, "model"),
    },
    "report": {
        "recipe": (str, ""),
        "stages": (list, REQUIRED),
        "seed": (int, 0),
        "out_report": (str, REQUIRED),
        "format": (str, "structured-text"),
    },
}

STAGE_SCHEMA = {
    "name": (str, REQUIRED),
    "subcommand": (str, REQUIRED),
    "config": (dict, REQUIRED),
}


def _validate(cfg, schema, path):
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    out = {}
    for key in cfg:
        if key not in schema:
            raise ConfigError(f"unknown key {path + key!r}")
    for key, (typ, default) in schema.items():
        if key in cfg:
            val = cfg[key]
            if isinstance(typ, dict):
                # a nested section may be absent-by-default (None); keep it
                # None so validation is idempotent on default-filled configs
                out[key] = None if val is None and default is None else \
                    _validate(val, typ, f"{path}{key}.")
            elif typ is dict:
                out[key] = val  # free-form (validated downstream)
            else:
                allows_bool = typ is bool or \
                    (isinstance(typ, tuple) and bool in typ)
                if not isinstance(val, typ) or \
                        (isinstance(val, bool) and not allows_bool):
                    raise ConfigError(
                        f"key {path + key!r}: expected {typ}, got "
                        f"{type(val).__name__}")
                out[key] = val
        elif default is REQUIRED:
            raise ConfigError(f"missing required key {path + key!r}")
        elif isinstance(typ, dict):
            out[key] = None if default is None else \
                _validate(default, typ, f"{path}{key}.")
        else:
            out[key] = default
    return out


@dataclasses.dataclass
class ExperimentConfig:
    subcommand: str
    values: dict
    digest: str


def config_digest(values):
    blob = json.dumps(values, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def parse_config(path, subcommand, overrides=None):
    """Load, strictly validate, default-fill, and digest a config file."""
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return make_config(raw, subcommand, overrides)


def make_config(raw, subcommand, overrides=None):
    if overrides:
        raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
    values = _validate(raw, SCHEMAS[subcommand], "")
    if subcommand == "report":
        values["stages"] = [_validate(s, STAGE_SCHEMA, "stages[].")
                            for s in values["stages"]]
        for s in values["stages"]:
            if s["subcommand"] not in SUBCOMMANDS or \
                    s["subcommand"] == "report":
                raise ConfigError(
                    f"invalid stage subcommand {s['subcommand']!r}")
            s["config"] = _validate(s["config"], SCHEMAS[s["subcommand"]], "")
    return ExperimentConfig(subcommand, values, config_digest(values))


# -- dataset and model plumbing ---------------------------------------------


def _resolve(path, out_dir):
    if not path or os.path.isabs(path) or out_dir is None:
        return path
    return os.path.join(out_dir, path)


def load_dataset_pair(spec, out_dir=None):
    """Materialize (train, test) datasets from a dataset config section."""
    source = spec["source"]
    if source == "idx":
        train = load_idx(_resolve(spec["train_images"], out_dir),
                         _resolve(spec["train_labels"], out_dir)) \
            if spec["train_images"] else None
        test = load_idx(_resolve(spec["test_images"], out_dir),
                        _resolve(spec["test_labels"], out_dir))
        return train, test
    if source == "digits":
        train = digits_dataset(spec["train_n"], seed=spec["seed"],
                               split="train")
        test = digits_dataset(spec["test_n"], seed=spec["seed"] + 1,
                              split="test")
        if spec["write_idx_dir"]:
            # round-trip through the IDX codec so file-based provenance and
            # the binary format are exercised end to end
            d = _resolve(spec["write_idx_dir"], out_dir)
            os.makedirs(d, exist_ok=True)
            pairs = []
            for name, ds in (("train", train), ("test", test)):
                ip = os.path.join(d, f"{name}-images-idx3-ubyte")
                lp = os.path.join(d, f"{name}-labels-idx1-ubyte")
                write_idx(ds, ip, lp)
                pairs.append(load_idx(ip, lp))
            train, test = pairs
        return train, test
    if source == "synth":
        n = spec["n"] or 200
        ds = synth_dataset(spec["kind"], n, seed=spec["seed"])
        split = len(ds) * 4 // 5
        return (ds.subset(np.arange(split), split="train"),
                ds.subset(np.arange(split, len(ds)), split="test"))
    raise ConfigError(f"unknown dataset source {source!r}")


def _attack_from(section):
    if section is None:
        return None
    return AttackConfig(**section)


def _load_target(values, out_dir):
    """A model, or an AE+classifier pipeline, from checkpoint paths."""
    ck = _resolve(values.get("checkpoint", ""), out_dir)
    ae_ck = _resolve(values.get("ae_checkpoint", ""), out_dir)
    clf_ck = _resolve(values.get("classifier_checkpoint", ""), out_dir)
    if ae_ck and clf_ck:
        return mm.stack(mm.load_checkpoint(ae_ck), mm.load_checkpoint(clf_ck))
    if ck:
        return mm.load_checkpoint(ck)
    raise ConfigError("need 'checkpoint' or 'ae_checkpoint' + "
                      "'classifier_checkpoint'")


def _training_config(v, attack=None, loss_kind="natural", lam="auto"):
    return TrainingConfig(
        epochs=v["epochs"], batch_size=v["batch_size"], lr=v["lr"],
        loss_kind=loss_kind, lam=lam, attack=attack,
        attack_warmup_epochs=v["attack_warmup_epochs"], patience=v["patience"],
        decay_factor=v["decay_factor"], val_fraction=v["val_fraction"],
        seed=v["seed"])


def _eval_subset(test, n_eval, seed):
    if n_eval and n_eval < len(test):
        # fixed, recorded subset: the first n_eval indices of the test split
        return test.subset(np.arange(n_eval), split=f"{test.split}[:{n_eval}]")
    return test


# -- subcommand implementations ---------------------------------------------


def _run_train_natural(v, digest, out_dir):
    train, _ = load_dataset_pair(v["dataset"], out_dir)
    model = mm.build_classifier(v["arch"], v["num_classes"],
                                tuple(v["input_shape"]), seed=v["init_seed"])
    model, history = tr.train_natural(model, train, _training_config(v))
    model.meta["config_digest"] = digest
    model.meta["history"] = history
    mm.save_checkpoint(model, _resolve(v["out_checkpoint"], out_dir))
    return {}


def _run_train_adv(v, digest, out_dir):
    train, _ = load_dataset_pair(v["dataset"], out_dir)
    if v["init_checkpoint"]:
        # warm start from a natural model: short-budget min-max training
        # from scratch stalls at the uniform-predictor saddle
        model = mm.load_checkpoint(_resolve(v["init_checkpoint"], out_dir))
        if model.arch_id != v["arch"]:
            raise ConfigError(f"init_checkpoint is {model.arch_id!r}, "
                              f"config says {v['arch']!r}")
    else:
        model = mm.build_classifier(v["arch"], v["num_classes"],
                                    tuple(v["input_shape"]),
                                    seed=v["init_seed"])
    cfg = _training_config(v, attack=_attack_from(v["attack"]))
    model, history = tr.adversarial_train(model, train, cfg)
    model.meta["config_digest"] = digest
    model.meta["history"] = history
    mm.save_checkpoint(model, _resolve(v["out_checkpoint"], out_dir))
    return {}


def _run_train_aaa(v, digest, out_dir):
    train, _ = load_dataset_pair(v["dataset"], out_dir)
    members = [mm.freeze(mm.load_checkpoint(_resolve(p, out_dir)))
               for p in v["ensemble_checkpoints"]]
    ae = mm.build_autoencoder(v["ae_kind"], members[0].input_shape,
                              seed=v["init_seed"])
    cfg = _training_config(v, attack=_attack_from(v["attack"]),
                           loss_kind=v["loss_kind"], lam=v["lambda"])
    before = [mm.param_digest(m) for m in members]
    ae, history = tr.aaa_train(ae, members, train, cfg)
    after = [mm.param_digest(m) for m in members]
    if before != after:
        raise TrainingError("ensemble classifiers changed during aaa_train")
    ae.meta["config_digest"] = digest
    ae.meta["history"] = history
    mm.save_checkpoint(ae, _resolve(v["out_checkpoint"], out_dir))
    return {}


def _run_attack(v, digest, out_dir):
    _, test = load_dataset_pair(v["dataset"], out_dir)
    test = _eval_subset(test, v["n"], v["seed"])
    target = _load_target(v, out_dir)
    cfg = _attack_from(v["attack"])
    kind = v["attack_kind"]
    x, y = test.images, test.labels
    if kind == "fgsm":
        batch = fgsm(target, x, y, cfg.epsilon, cfg.digest())
    elif kind == "pgd":
        batch = pgd_linf(target, x, y, cfg)
    elif kind == "cw":
        batch = cw_l2(target, x, y, cfg)
    elif kind == "pgd-recon":
        batch = pgd_with_recon_loss(target, x, y, cfg, v["recon_mix"])
    elif kind == "latent":
        rng = np.random.default_rng([v["seed"], 0x7A])
        targets = _other_class_targets(test, rng)
        batch = latent_match(target.autoencoder, x, targets, cfg,
                             pipeline=target, y=y)
    else:
        raise ConfigError(f"unknown attack_kind {kind!r}")
    out = _resolve(v["out_npz"], out_dir)
    tmp = f"{out}.tmp.{os.getpid()}"
    np.savez(tmp, originals=batch.originals, adversarial=batch.adversarial,
             success=batch.success, distance=batch.distance,
             labels=y, attack=batch.attack, config_digest=digest)
    os.replace(tmp if os.path.exists(tmp) else tmp + ".npz", out)
    return {}


def _other_class_targets(dataset, rng):
    x, y = dataset.images, dataset.labels
    targets = np.empty_like(x)
    for i in range(len(y)):
        others = np.flatnonzero(y != y[i])
        targets[i] = x[rng.choice(others)]
    return targets


def _report_for(v, digest):
    rep = EvaluationReport(seed=v["seed"])
    rep.extra["config_digest"] = digest
    return rep


def _run_eval(v, digest, out_dir):
    _, test = load_dataset_pair(v["dataset"], out_dir)
    test = _eval_subset(test, v["n_eval"], v["seed"])
    target = _load_target(v, out_dir)
    tdig = mm.param_digest(target.autoencoder) if isinstance(target, mm.Pipeline) \
        else mm.param_digest(target)
    rep = _report_for(v, digest)
    rep.model_digests[v["name"]] = tdig
    pgd_cfg, cw_cfg = _attack_from(v["attack"]), _attack_from(v["cw"])
    for protocol in v["protocols"]:
        if protocol == "clean":
            acc = ev.eval_clean(target, test)
            rep.add_row("clean", tdig, "none", "-", acc, v["seed"])
        elif protocol == "pgd":
            if pgd_cfg is None:
                raise ConfigError("pgd protocol needs an 'attack' section")
            acc = ev.eval_pgd(target, test, pgd_cfg)
            rep.add_row("pgd", tdig, "pgd_linf",
                        f"eps={pgd_cfg.epsilon};steps={pgd_cfg.num_steps};"
                        f"restarts={pgd_cfg.num_restarts}", acc, pgd_cfg.seed)
            rep.configs["pgd"] = pgd_cfg.digest()
        elif protocol == "cw":
            if cw_cfg is None:
                raise ConfigError("cw protocol needs a 'cw' section")
            acc = ev.eval_cw(target, test, cw_cfg, threshold=v["cw_threshold"])
            rep.add_row("cw", tdig, "cw_l2",
                        f"c={cw_cfg.cw_constant};thr={v['cw_threshold']}",
                        acc, cw_cfg.seed)
            rep.configs["cw"] = cw_cfg.digest()
        else:
            raise ConfigError(f"unknown protocol {protocol!r}")
    emit_report(rep, _resolve(v["out_report"], out_dir), v["format"])
    return {"rows": rep.rows, "model_digests": dict(rep.model_digests)}


def _run_eval_transfer(v, digest, out_dir):
    _, test = load_dataset_pair(v["dataset"], out_dir)
    test = _eval_subset(test, v["n_eval"], v["seed"])
    ae = mm.load_checkpoint(_resolve(v["ae_checkpoint"], out_dir))
    clf = mm.load_checkpoint(_resolve(v["transfer_checkpoint"], out_dir))
    pgd_cfg, cw_cfg = _attack_from(v["attack"]), _attack_from(v["cw"])
    res = ev.eval_transfer(ae, clf, test, pgd_cfg, cw_cfg,
                           cw_threshold=v["cw_threshold"])
    rep = _report_for(v, digest)
    ae_dig = mm.param_digest(ae)
    rep.model_digests[v["name"] + ".ae"] = ae_dig
    rep.model_digests[v["name"] + ".classifier"] = mm.param_digest(clf)
    rep.add_row("transfer-clean", ae_dig, "none", "-", res["clean"], v["seed"])
    if "pgd" in res:
        rep.add_row("transfer-pgd", ae_dig, "pgd_linf",
                    f"eps={pgd_cfg.epsilon};steps={pgd_cfg.num_steps};"
                    f"restarts={pgd_cfg.num_restarts}", res["pgd"],
                    pgd_cfg.seed)
    if "cw" in res:
        rep.add_row("transfer-cw", ae_dig, "cw_l2",
                    f"c={cw_cfg.cw_constant};thr={v['cw_threshold']}",
                    res["cw"], cw_cfg.seed)
    emit_report(rep, _resolve(v["out_report"], out_dir), v["format"])
    return {"rows": rep.rows, "model_digests": dict(rep.model_digests)}


def _run_eval_corruption(v, digest, out_dir):
    _, test = load_dataset_pair(v["dataset"], out_dir)
    test = _eval_subset(test, v["n_eval"], v["seed"])
    target = _load_target(v, out_dir)
    tdig = mm.param_digest(target.autoencoder) if isinstance(target, mm.Pipeline) \
        else mm.param_digest(target)
    severities = [int(s) for s in v["severities"]]
    table = ev.eval_corruption(target, test, v["kinds"], severities,
                               seed=v["seed"])
    baseline = None
    if v["baseline_checkpoint"]:
        base = mm.load_checkpoint(_resolve(v["baseline_checkpoint"], out_dir))
        baseline = ev.eval_corruption(base, test, v["kinds"], severities,
                                      seed=v["seed"])
    rep = _report_for(v, digest)
    rep.model_digests[v["name"]] = tdig
    for (kind, sev) in sorted(table):
        rep.add_row("corruption", tdig, kind, f"severity={sev}",
                    table[(kind, sev)], v["seed"])
        if baseline is not None:
            rep.extra[f"delta.{kind}.s{sev}"] = \
                f"{table[(kind, sev)] - baseline[(kind, sev)]:+.4f}"
    emit_report(rep, _resolve(v["out_report"], out_dir), v["format"])
    return {"rows": rep.rows, "model_digests": dict(rep.model_digests)}


def _run_report(v, digest, out_dir):
    """Execute a recipe: run each stage, then emit one consolidated report."""
    rep = EvaluationReport(seed=v["seed"])
    rep.extra["config_digest"] = digest
    if v["recipe"]:
        rep.extra["recipe"] = v["recipe"]
    for stage in v["stages"]:
        sub = stage["subcommand"]
        scfg = make_config(stage["config"], sub)
        result = _RUNNERS[sub](scfg.values, scfg.digest, out_dir)
        for row in result.get("rows", []):
            row = dict(row)
            row["protocol"] = f"{stage['name']}.{row['protocol']}"
            rep.rows.append(row)
        for name, d in result.get("model_digests", {}).items():
            rep.model_digests[f"{stage['name']}.{name}"] = d
    emit_report(rep, _resolve(v["out_report"], out_dir), v["format"])
    return {"rows": rep.rows}


_RUNNERS = {
    "train-natural": _run_train_natural,
    "train-adv": _run_train_adv,
    "train-aaa": _run_train_aaa,
    "attack": _run_attack,
    "eval": _run_eval,
    "eval-transfer": _run_eval_transfer,
    "eval-corruption": _run_eval_corruption,
    "report": _run_report,
}


def run(subcommand, config, out_dir=None):
    """Execute a parsed config; returns 0 on success."""
    _RUNNERS[subcommand](config.values, config.digest, out_dir)
    return 0


def _limit_threads():
    n = os.environ.get("AAA_NUM_THREADS")
    if not n:
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(int(n))
    except ImportError:
        pass


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="aaa", description="autoencoder adversarial-defense experiments")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--preset", choices=("desk", "paper"), default="desk")
    parser.add_argument("--out", default=None)
    args = parser.parse_args(argv)
    _limit_threads()
    try:
        overrides = {"seed": args.seed} if args.seed is not None else None
        config = parse_config(args.config, args.subcommand, overrides)
        return run(args.subcommand, config, args.out)
    except tuple(EXIT_CODES) as e:
        record = {"error": type(e).__name__, "message": str(e),
                  "subcommand": args.subcommand}
        print(json.dumps(record), file=sys.stderr)
        for cls in type(e).__mro__:
            if cls in EXIT_CODES:
                return EXIT_CODES[cls]
        return 1


if __name__ == "__main__":
    sys.exit(main())
