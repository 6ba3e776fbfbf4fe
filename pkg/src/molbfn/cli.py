"""Command-line entry point: ``molbfn <subcommand> [flags]``.

Configuration is an INI file with sections ``schedule``, ``network``,
``training``, ``sampling``, ``data`` and ``finetune``.  Resolution order is
built-in defaults, then the profile named in a section (``desk`` or
``paper_scale``), then the file, then command-line flags.  Unknown sections or
keys are rejected.  Every run directory receives the resolved ``config.ini``
and a ``run.json`` with the vocabulary hash, seed and ``git describe`` string.

Errors are written to standard error as one JSON object per line and the
process exits nonzero.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, checkpoint, core
from . import rng as rngmod
from .finetune import FinetuneConfig, PredictionHead, Task, predict, predict_proba, run_finetune
from .metrics import entropy_curve, summary, write_curve_csv, write_summary_csv
from .network import Denoiser, NetworkConfig
from .schedule import ScheduleKind, ScheduleParams, alpha, beta, beta_one_max
from .tokenizer import (
    VOCAB_SIZE,
    PaddingStrategy,
    build_vocabulary,
    detokenize,
    read_labeled_csv,
    read_smiles_file,
    tokenize,
)
from .training import TrainConfig, TrainState, load_model, make_optimizer, save_model, train_generative

log = logging.getLogger("molbfn")


class CliError(Exception):
    """User-facing failure; ``fields`` are merged into the JSON error line."""

    def __init__(self, message: str, **fields):
        super().__init__(message)
        self.fields = fields


# ---------------------------------------------------------------- config


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _auto(conv):
    def parse(s: str):
        return None if s.strip().lower() in ("", "auto", "none") else conv(s)

    return parse


def _choice(*options):
    def parse(s: str):
        v = s.strip()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {v!r}")
        return v

    return parse


def _floats(s: str) -> list[float] | None:
    s = s.strip()
    return [float(v) for v in s.split(",")] if s else None


def _names(s: str) -> list[str] | None:
    s = s.strip()
    return [v.strip() for v in s.split(",") if v.strip()] if s else None


def _text(s: str) -> str:
    return s.strip()


PROFILE = _choice("desk", "paper_scale")

# section -> key -> (default, parser, description)
SCHEMA: dict[str, dict[str, tuple[str, object, str]]] = {
    "schedule": {
        "kind": ("log", _choice("log", "quadratic"), "accuracy schedule: log or quadratic"),
        "beta1": ("auto", _auto(float), "beta(1); auto requires use_beta_max"),
        "use_beta_max": ("true", _bool, "set beta(1) to the largest usable value for K"),
        "enforce_beta_cap": ("true", _bool, "reject log-schedule beta(1) above the cap"),
    },
    "network": {
        "profile": ("desk", PROFILE, "desk or paper_scale size preset"),
        "n_layers": ("4", int, "transformer blocks"),
        "n_heads": ("4", int, "attention heads"),
        "hidden_dim": ("128", int, "model width"),
        "dropout": ("0.01", float, "dropout inside feed-forward layers"),
        "time_mlp_hidden": ("256", int, "hidden width of the time embedding MLP"),
        "ffn_mult": ("4", int, "feed-forward expansion factor"),
        "temperature": ("auto", _auto(float), "attention temperature; auto is sqrt(2*head_dim)"),
        "xpos_scale_base": ("512", float, "xPos decay length scale"),
        "xpos_gamma": ("0.4", float, "xPos decay offset"),
        "rope_base": ("10000", float, "rotary frequency base"),
    },
    "training": {
        "profile": ("desk", PROFILE, "desk or paper_scale optimisation preset"),
        "epochs": ("200", int, "training epochs"),
        "batch_size": ("16", int, "molecules per batch"),
        "lr": ("1e-3", float, "learning rate after warm-up"),
        "lr_start": ("1e-8", float, "learning rate at the first step"),
        "warmup_steps": ("100", int, "linear warm-up length in steps"),
        "weight_decay": ("0.01", float, "decoupled weight decay"),
        "p_uncond": ("0.2", float, "probability of dropping labels per row"),
        "seed": ("0", int, "seed for initialisation, shuffling and loss noise"),
        "checkpoint_every": ("0", int, "save every N epochs; 0 saves only at the end"),
        "grad_clip": ("none", _auto(float), "gradient norm clip; none disables"),
        "reaction_context": ("false", _bool, "keep reactant tokens fixed during training"),
    },
    "sampling": {
        "n_samples": ("100", int, "molecules to generate"),
        "n_steps": ("100", int, "sampling steps"),
        "guidance_w": ("0", float, "classifier-free guidance weight"),
        "seed": ("0", int, "sampling seed"),
        "batch_size": ("128", int, "rows per network call"),
        "labels": ("", _floats, "comma-separated conditioning values"),
        "scaffold": ("", _text, "SMILES prefix kept fixed in every sample"),
    },
    "data": {
        "train": ("", _text, "training file (.smi or .csv)"),
        "valid": ("", _text, "validation CSV for fine-tuning"),
        "label_columns": ("", _names, "comma-separated CSV label columns"),
        "padding": ("global", _choice("dynamic", "global"), "dynamic or global padding"),
        "max_len": ("auto", _auto(int), "global sequence length; auto is the longest sequence"),
    },
    "finetune": {
        "profile": ("desk", PROFILE, "desk or paper_scale fine-tuning preset"),
        "task": ("regression", _choice("regression", "classification"), "prediction task"),
        "epochs": ("50", int, "fine-tuning epochs"),
        "batch_size": ("16", int, "molecules per batch"),
        "lr": ("1e-4", float, "peak learning rate"),
        "lr_start": ("1e-7", float, "learning rate at the first step"),
        "warmup_steps": ("50", _auto(int), "linear warm-up length; auto is 1000 for regression, 100 for classification"),
        "plateau_patience": ("20", int, "epochs without improvement before decay"),
        "plateau_factor": ("0.2", float, "decay factor on plateau"),
        "min_lr": ("1e-6", float, "learning-rate floor"),
        "weight_decay": ("0.01", float, "decoupled weight decay"),
        "head_dropout": ("0.1", float, "dropout inside the prediction head"),
        "freeze_backbone": ("false", _bool, "train only the head"),
        "seed": ("0", int, "seed for head initialisation, shuffling and dropout"),
    },
}

PROFILES = {
    "network": {"paper_scale": {"n_layers": "12", "n_heads": "8", "hidden_dim": "512"}},
    "training": {"paper_scale": {"epochs": "100", "batch_size": "120", "lr": "5e-5", "warmup_steps": "1000"}},
    "finetune": {"paper_scale": {"epochs": "100", "batch_size": "32", "head_dropout": "0.0", "warmup_steps": "auto"}},
}


class RunConfig:
    """Resolved string values plus typed access."""

    def __init__(self, explicit: dict[str, dict[str, str]] | None = None):
        explicit = explicit or {}
        self.raw = {sec: {k: entry[0] for k, entry in keys.items()} for sec, keys in SCHEMA.items()}
        for sec, keys in explicit.items():
            self._check(sec, *keys)
        for sec, table in PROFILES.items():
            name = explicit.get(sec, {}).get("profile", "desk")
            PROFILE(name)
            self.raw[sec].update(table.get(name, {}))
        for sec, keys in explicit.items():
            self.raw[sec].update(keys)
        for sec, keys in self.raw.items():
            for key in keys:
                self.get(sec, key)

    @staticmethod
    def _check(sec: str, *keys: str) -> None:
        if sec not in SCHEMA:
            raise CliError(f"unknown config section [{sec}]", section=sec)
        for key in keys:
            if key not in SCHEMA[sec]:
                raise CliError(f"unknown config key {sec}.{key}", section=sec, key=key)

    def get(self, sec: str, key: str):
        self._check(sec, key)
        try:
            return SCHEMA[sec][key][1](self.raw[sec][key])
        except ValueError as exc:
            raise CliError(f"bad value for {sec}.{key}: {exc}", section=sec, key=key) from None

    def section(self, sec: str) -> dict:
        return {k: self.get(sec, k) for k in SCHEMA[sec]}

    def write(self, path: Path) -> None:
        parser = configparser.ConfigParser(interpolation=None)
        for sec, keys in self.raw.items():
            parser[sec] = keys
        with open(path, "w", encoding="utf-8") as fh:
            parser.write(fh)


def read_config_file(path: str | None) -> dict[str, dict[str, str]]:
    if not path:
        return {}
    # ';' never occurs in SMILES, so it is safe as an inline comment marker
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise CliError(f"{path}: {exc}", file=str(path)) from None
    if parser.defaults():
        raise CliError(f"{path}: keys outside a section are not allowed", file=str(path))
    return {sec: dict(parser[sec]) for sec in parser.sections()}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    explicit = read_config_file(getattr(args, "config", None))

    def put(sec, key, value):
        if value is not None:
            explicit.setdefault(sec, {})[key] = str(value)

    if getattr(args, "profile", None):
        for sec in PROFILES:
            put(sec, "profile", args.profile)
    seed = getattr(args, "seed", None)
    for sec in ("training", "sampling", "finetune"):
        put(sec, "seed", seed)
    data = getattr(args, "data", None)
    if data is not None and args.command in ("train", "finetune"):
        put("data", "train", Path(data).resolve())
    put("data", "valid", getattr(args, "valid", None) and Path(args.valid).resolve())
    put("data", "padding", getattr(args, "padding", None))
    put("data", "max_len", getattr(args, "max_len", None))
    put("sampling", "n_steps", getattr(args, "steps", None))
    put("sampling", "n_samples", getattr(args, "n_samples", None))
    put("sampling", "guidance_w", getattr(args, "guidance_w", None))
    put("sampling", "scaffold", getattr(args, "scaffold", None))
    put("finetune", "task", getattr(args, "task", None))
    labels = getattr(args, "labels", None)
    if labels is not None:
        put("sampling" if args.command == "sample" else "data", "labels" if args.command == "sample" else "label_columns",
            labels)
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        put("finetune" if args.command == "finetune" else "training", "epochs", epochs)
    return RunConfig(explicit)


def schedule_params(cfg: RunConfig, k: int = VOCAB_SIZE) -> ScheduleParams:
    s = cfg.section("schedule")
    if s["use_beta_max"]:
        if s["beta1"] is not None:
            raise CliError("schedule.beta1 conflicts with schedule.use_beta_max = true", section="schedule")
        b1 = beta_one_max(k)
    elif s["beta1"] is None:
        raise CliError("schedule.beta1 is required when use_beta_max = false", section="schedule")
    else:
        b1 = s["beta1"]
    try:
        return ScheduleParams(ScheduleKind(s["kind"]), b1, k, s["enforce_beta_cap"])
    except ValueError as exc:
        raise CliError(str(exc), section="schedule") from None


def network_config(cfg: RunConfig, label_dim: int) -> NetworkConfig:
    n = cfg.section("network")
    n.pop("profile")
    try:
        return NetworkConfig(k_categories=VOCAB_SIZE, label_dim=label_dim, **n)
    except ValueError as exc:
        raise CliError(str(exc), section="network") from None


# ---------------------------------------------------------------- run directory


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"


def prepare_run_dir(out: str, cfg: RunConfig, args: argparse.Namespace, seed: int, **extra) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    cfg.write(path / "config.ini")
    info = {
        "command": args.command,
        "argv": sys.argv[1:] if args.argv is None else args.argv,
        "seed": seed,
        "vocab_sha256": build_vocabulary().sha256(),
        "git_describe": git_describe(),
        "version": __version__,
        **extra,
    }
    (path / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- data


def _tokenize_line(path, lineno: int, smiles: str) -> list[int]:
    try:
        return tokenize(smiles)
    except ValueError as exc:
        raise CliError(f"{path}:{lineno}: {exc}", file=str(path), line=lineno) from None


def load_molecules(path: str, label_columns: list[str] | None = None, need_labels: bool = False):
    """Return ``(smiles, seqs, line_numbers, label_names, labels)``.

    ``.csv`` files need a ``smiles`` column; anything else is read as one
    SMILES per line.
    """
    if not path:
        raise CliError("no data file given (use --data or data.train)")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{path}: no such file", file=str(path))
    names, labels = [], None
    if p.suffix.lower() == ".csv":
        try:
            smiles, names, labels = read_labeled_csv(p, label_columns)
        except ValueError as exc:
            if need_labels or label_columns:
                raise CliError(str(exc), file=str(path)) from None
            smiles, names, labels = _read_smiles_column(p), [], None
        lines = list(range(2, len(smiles) + 2))
    else:
        if need_labels or label_columns:
            raise CliError(f"{path}: labels need a CSV file with a smiles column", file=str(path))
        pairs = read_smiles_file(p)
        lines, smiles = [n for n, _ in pairs], [s for _, s in pairs]
    if not smiles:
        raise CliError(f"{path}: no molecules found", file=str(path))
    seqs = [_tokenize_line(path, n, s) for n, s in zip(lines, smiles)]
    if labels is not None:
        labels = np.asarray(labels, dtype=np.float64).reshape(len(smiles), -1)
        bad = np.flatnonzero(np.isnan(labels).any(axis=1))
        if bad.size and (need_labels or label_columns):
            raise CliError(f"{path}:{lines[bad[0]]}: missing or NaN label", file=str(path), line=lines[bad[0]])
    return smiles, seqs, lines, names, labels


def _read_smiles_column(path: Path) -> list[str]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "smiles" not in reader.fieldnames:
            raise CliError(f"{path}: CSV must have a 'smiles' column", file=str(path))
        return [row["smiles"].strip() for row in reader]


def check_lengths(path, seqs, lines, max_len: int | None) -> None:
    if max_len is None:
        return
    for seq, n in zip(seqs, lines):
        if len(seq) > max_len:
            raise CliError(f"{path}:{n}: molecule has {len(seq)} tokens, exceeding --max-len {max_len}",
                           file=str(path), line=n)


def resolve_max_len(cfg: RunConfig, path, seqs, lines) -> int | None:
    max_len = cfg.get("data", "max_len")
    check_lengths(path, seqs, lines, max_len)
    if max_len is None and cfg.get("data", "padding") == PaddingStrategy.GLOBAL.value:
        max_len = max(len(s) for s in seqs)
    return max_len


def _json_out(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------- train


def cmd_train(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    t = cfg.section("training")
    path = cfg.get("data", "train")
    smiles, seqs, lines, names, labels = load_molecules(path, cfg.get("data", "label_columns"))
    if labels is not None and not cfg.get("data", "label_columns"):
        labels, names = None, []  # a CSV without selected columns trains unconditionally
    max_len = resolve_max_len(cfg, path, seqs, lines)
    tcfg = TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], lr_start=t["lr_start"],
        warmup_steps=t["warmup_steps"], weight_decay=t["weight_decay"], p_uncond=t["p_uncond"],
        padding=cfg.get("data", "padding"), max_len=max_len, seed=t["seed"],
        checkpoint_every=t["checkpoint_every"], grad_clip=t["grad_clip"], reaction_context=t["reaction_context"],
    )
    label_dim = 0 if labels is None else labels.shape[1]

    if args.resume:
        net, params, header, tensors = load_model(args.resume)
        if net.config.label_dim != label_dim:
            raise CliError(f"{args.resume}: checkpoint expects {net.config.label_dim} label columns, data has {label_dim}")
        optimizer = make_optimizer(net, tcfg)
        if "optimizer_param_groups" not in header:
            raise CliError(f"{args.resume}: checkpoint has no optimizer state to resume from")
        checkpoint.restore_optimizer(optimizer, tensors, header["optimizer_param_groups"])
        meta = header.get("meta", {})
        state = TrainState(epoch=meta.get("epoch", 0), step=meta.get("step", 0))
    else:
        params = schedule_params(cfg)
        torch.manual_seed(rngmod.derive_seed(tcfg.seed, "init"))
        net = Denoiser(network_config(cfg, label_dim))
        optimizer = make_optimizer(net, tcfg)
        state = TrainState()

    out = prepare_run_dir(args.out, cfg, args, tcfg.seed, data=str(path), max_len=max_len,
                          resumed_from=args.resume, n_parameters=net.n_parameters())
    ckpt = out / "model.ckpt"
    meta = {"seed": tcfg.seed, "max_len": max_len, "padding": tcfg.padding, "label_columns": names,
            "train_data": str(path)}

    def save(st: TrainState, opt) -> None:
        save_model(ckpt, net, params, optimizer=opt, meta={**meta, "epoch": st.epoch, "step": st.step})

    loss_path = out / "losses.csv"
    append = bool(args.resume) and loss_path.exists()
    with open(loss_path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if not append:
            writer.writerow(["step", "loss"])

        def on_step(step, loss):
            writer.writerow([step, f"{loss:.8g}"])

        def on_epoch(st, opt):
            fh.flush()
            log.info("epoch %d step %d", st.epoch, st.step)
            if tcfg.checkpoint_every and st.epoch % tcfg.checkpoint_every == 0:
                save(st, opt)

        history = train_generative(net, params, seqs, tcfg, labels=labels, state=state, optimizer=optimizer,
                                   on_step=on_step, on_epoch=on_epoch)
    save(state, optimizer)
    per_epoch = -(-len(seqs) // tcfg.batch_size)
    losses = [v for _, v in history]
    _json_out({
        "checkpoint": str(ckpt), "epoch": state.epoch, "step": state.step,
        "first_epoch_loss": float(np.mean(losses[:per_epoch])) if losses else None,
        "last_epoch_loss": float(np.mean(losses[-per_epoch:])) if losses else None,
    })


# ---------------------------------------------------------------- sample


def cmd_sample(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    s = cfg.section("sampling")
    net, params, header, _ = load_model(args.checkpoint)
    meta = header.get("meta", {})
    seq_len = cfg.get("data", "max_len") or meta.get("max_len")
    if seq_len is None:
        raise CliError("sequence length unknown: pass --max-len")
    labels = s["labels"]
    if labels is not None and len(labels) != net.config.label_dim:
        raise CliError(f"--labels has {len(labels)} values, checkpoint expects {net.config.label_dim}")
    clamp = None
    if s["scaffold"]:
        ids = _tokenize_line("--scaffold", 1, s["scaffold"])[:-1]
        try:
            clamp = core.ClampMask.prefix(ids, seq_len)
        except ValueError as exc:
            raise CliError(str(exc)) from None
    gen = core.GenerationConfig(seq_len=seq_len, n_samples=s["n_samples"], n_steps=s["n_steps"],
                                guidance_w=s["guidance_w"], seed=s["seed"], clamp=clamp, labels=labels,
                                batch_size=s["batch_size"])
    out = prepare_run_dir(args.out, cfg, args, s["seed"], checkpoint=str(args.checkpoint), seq_len=seq_len)
    ids = core.sample(net, gen, params, build_vocabulary())
    smiles = [detokenize(row.tolist(), strict=False) for row in ids]
    (out / "samples.smi").write_text("".join(m + "\n" for m in smiles), encoding="utf-8")
    reference = None
    if args.data:
        reference, *_ = load_molecules(args.data)
    metrics = summary(smiles, reference)
    metrics["n_samples"] = len(smiles)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _json_out(metrics)


# ---------------------------------------------------------------- finetune / predict


def _task_targets(labels: np.ndarray, task: Task, path) -> tuple[np.ndarray, int]:
    if task is Task.REGRESSION:
        return labels, labels.shape[1]
    if labels.shape[1] != 1:
        raise CliError(f"{path}: classification takes exactly one label column", file=str(path))
    y = labels[:, 0]
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise CliError(f"{path}: class labels must be non-negative integers", file=str(path))
    return y.astype(np.int64), int(y.max()) + 1


def _baseline(train_y: np.ndarray, val_y: np.ndarray, task: Task) -> float:
    if task is Task.REGRESSION:
        return float(np.abs(val_y - train_y.mean(0)).mean())
    majority = np.bincount(train_y).argmax()
    return float((val_y == majority).mean())


def cmd_finetune(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    f = cfg.section("finetune")
    task = Task(f["task"])
    path = cfg.get("data", "train")
    smiles, seqs, _, names, labels = load_molecules(path, cfg.get("data", "label_columns"), need_labels=True)
    y, n_out = _task_targets(labels, task, path)
    valid = cfg.get("data", "valid")
    if valid:
        _, val_seqs, _, _, val_labels = load_molecules(valid, names, need_labels=True)
        val_y, val_out = _task_targets(val_labels, task, valid)
        n_out = max(n_out, val_out) if task is Task.CLASSIFICATION else n_out
    else:
        val_seqs, val_y = seqs, y

    if args.checkpoint:
        net, params, header, _ = load_model(args.checkpoint)
        if header.get("kind", "generative") != "generative":
            raise CliError(f"{args.checkpoint}: expected a generative checkpoint")
    else:
        params = schedule_params(cfg)
        torch.manual_seed(rngmod.derive_seed(f["seed"], "init"))
        net = Denoiser(network_config(cfg, 0))
    warmup = f["warmup_steps"]
    if warmup is None:
        warmup = 1000 if task is Task.REGRESSION else 100
    fcfg = FinetuneConfig(epochs=f["epochs"], batch_size=f["batch_size"], lr=f["lr"], lr_start=f["lr_start"],
                          warmup_steps=warmup, plateau_patience=f["plateau_patience"],
                          plateau_factor=f["plateau_factor"], min_lr=f["min_lr"], weight_decay=f["weight_decay"],
                          freeze_backbone=f["freeze_backbone"], seed=f["seed"])
    torch.manual_seed(rngmod.derive_seed(f["seed"], "head-init"))
    try:
        head = PredictionHead(net.config.hidden_dim, n_out, task=task, dropout=f["head_dropout"])
    except ValueError as exc:
        raise CliError(str(exc), section="finetune") from None
    out = prepare_run_dir(args.out, cfg, args, f["seed"], data=str(path), checkpoint=args.checkpoint)
    history = run_finetune(net, head, seqs, y, fcfg, val_seqs, val_y)
    save_model(out / "finetuned.ckpt", net, params,
               meta={"seed": f["seed"], "train_data": str(path), "label_columns": names},
               extra_tensors={f"head.{k}": v for k, v in head.state_dict().items()},
               extra_header={"kind": "finetuned", "head": head.settings()})
    write_summary_csv(out / "history.csv", history)
    _json_out({"checkpoint": str(out / "finetuned.ckpt"), "task": task.value,
               "metric": "mae" if task is Task.REGRESSION else "accuracy",
               "val_metric": history[-1]["val_metric"] if history else None,
               "baseline": _baseline(np.asarray(y), np.asarray(val_y), task)})


def load_finetuned(path: str):
    net, params, header, tensors = load_model(path)
    if header.get("kind") != "finetuned" or "head" not in header:
        raise CliError(f"{path}: not a fine-tuned checkpoint")
    head = PredictionHead(**header["head"])
    head.load_state_dict({k[len("head."):]: v for k, v in tensors.items() if k.startswith("head.")})
    head.eval()
    return net, head, header


def cmd_predict(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    net, head, header = load_finetuned(args.checkpoint)
    names = header.get("meta", {}).get("label_columns") or [f"y{i}" for i in range(head.n_outputs)]
    smiles, seqs, *_ = load_molecules(args.data)
    labels = None
    if Path(args.data).suffix.lower() == ".csv":
        try:
            labels = np.asarray(read_labeled_csv(args.data, names)[2], dtype=np.float64)
        except ValueError:
            pass  # no ground truth in this file
    out = prepare_run_dir(args.out, cfg, args, cfg.get("finetune", "seed"), checkpoint=str(args.checkpoint),
                          data=str(args.data))
    rows, result = [], {"n": len(smiles)}
    if head.task is Task.REGRESSION:
        pred = predict(seqs, net, head).numpy()
        cols = [f"pred_{n}" for n in names]
        rows = [[s, *(f"{v:.8g}" for v in p)] for s, p in zip(smiles, pred)]
        if labels is not None:
            result["mae"] = float(np.nanmean(np.abs(pred - labels)))
    else:
        proba = predict_proba(seqs, net, head).numpy()
        cols = [f"pred_{names[0]}", *(f"p{c}" for c in range(head.n_outputs))]
        rows = [[s, int(p.argmax()), *(f"{v:.8g}" for v in p)] for s, p in zip(smiles, proba)]
        if labels is not None:
            result["accuracy"] = float((proba.argmax(-1) == labels[:, 0]).mean())
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["smiles", *cols])
        writer.writerows(rows)
    _json_out(result)


# ---------------------------------------------------------------- analyze-schedule


def cmd_analyze_schedule(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    k = args.k
    cap_on = cfg.get("schedule", "enforce_beta_cap")
    kinds = [ScheduleKind(v) for v in _names(args.kinds) or []]
    betas = []
    for v in _names(args.beta1) or []:
        betas.append(beta_one_max(k) if v == "max" else float(v))
    if not kinds or not betas:
        raise CliError("need at least one kind and one beta1 value")
    out = prepare_run_dir(args.out, cfg, args, args.seed, k=k)
    grid = np.linspace(0.0, 1.0, args.grid)
    table = []
    for kind in kinds:
        for b1 in betas:
            try:
                params = ScheduleParams(kind, b1, k, cap_on)
            except ValueError as exc:
                raise CliError(str(exc)) from None
            tag = f"{kind.value}_{b1:.6g}"
            with open(out / f"schedule_{tag}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["t", "beta", "alpha"])
                for t, b, a in zip(grid, beta(params, grid), alpha(params, grid)):
                    w.writerow([f"{t:.10g}", f"{b:.17g}", f"{a:.17g}"])
            curve = entropy_curve(params, n_points=args.n_points, n_samples=args.n_samples, seed=args.seed)
            write_curve_csv(out / f"entropy_{tag}.csv", curve)
            a1 = alpha(params, 1.0)
            table.append({"kind": kind.value, "beta_one": f"{b1:.10g}", "k": k, "r_squared": f"{curve.r_squared:.10g}",
                          "alpha_one": f"{a1:.10g}", "alpha_one_over_beta_one": f"{a1 / b1:.10g}"})
    write_summary_csv(out / "r2.csv", table)
    _json_out(table)


# ---------------------------------------------------------------- tokenize


def cmd_tokenize(args: argparse.Namespace) -> None:
    source = args.data or "-"
    name = "<stdin>" if source == "-" else source
    fh = sys.stdin if source == "-" else open(source, encoding="utf-8")
    padding = args.padding or "dynamic"
    out_lines = []
    try:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            ids = _tokenize_line(name, lineno, s.split()[0])
            check_lengths(name, [ids], [lineno], args.max_len)
            if padding == "global":
                if args.max_len is None:
                    raise CliError("--padding global needs --max-len")
                ids = ids + [build_vocabulary().pad_id] * (args.max_len - len(ids))
            out_lines.append(" ".join(map(str, ids)))
    finally:
        if fh is not sys.stdin:
            fh.close()
    text = "".join(line + "\n" for line in out_lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}", kind="usage")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="molbfn", description="Bayesian flow network for SMILES strings.")
    parser.add_argument("--version", action="version", version=f"molbfn {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--out", required=out_required, help="run output directory")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--profile", choices=["desk", "paper_scale"], help="size and optimisation preset")
        return p

    def data_flags(p):
        p.add_argument("--padding", choices=["dynamic", "global"])
        p.add_argument("--max-len", type=int, help="global sequence length")

    p = common(sub.add_parser("train", help="train the generative model"))
    p.add_argument("--data", help="training .smi or .csv")
    p.add_argument("--labels", help="comma-separated CSV label columns to condition on")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    data_flags(p)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("sample", help="generate molecules from a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="training file for novelty and membership")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--steps", type=int, help="sampling steps")
    p.add_argument("--guidance-w", type=float)
    p.add_argument("--labels", help="comma-separated conditioning values")
    p.add_argument("--scaffold", help="SMILES prefix to keep fixed")
    data_flags(p)
    p.set_defaults(func=cmd_sample)

    p = common(sub.add_parser("finetune", help="fit a prediction head on labelled molecules"))
    p.add_argument("--checkpoint", help="pretrained generative checkpoint; random init when omitted")
    p.add_argument("--data", help="training CSV with a smiles column")
    p.add_argument("--valid", help="validation CSV")
    p.add_argument("--labels", help="comma-separated label columns")
    p.add_argument("--task", choices=["regression", "classification"])
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_finetune)

    p = common(sub.add_parser("predict", help="apply a fine-tuned checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help=".csv with a smiles column or .smi")
    p.set_defaults(func=cmd_predict)

    p = common(sub.add_parser("analyze-schedule", help="accuracy schedules, entropy curves and R² table"))
    p.set_defaults(seed=0)
    p.add_argument("--k", type=int, default=VOCAB_SIZE, help="number of categories")
    p.add_argument("--beta1", default="max", help="comma-separated beta(1) values; 'max' is the cap")
    p.add_argument("--kinds", default="log,quadratic")
    p.add_argument("--n-samples", type=int, default=10_000)
    p.add_argument("--n-points", type=int, default=51)
    p.add_argument("--grid", type=int, default=1001, help="points in the beta/alpha CSVs")
    p.set_defaults(func=cmd_analyze_schedule)

    p = sub.add_parser("tokenize", help="SMILES lines to space-joined token ids")
    p.add_argument("--data", help="input file; stdin when omitted or '-'")
    p.add_argument("--out", help="output file; stdout when omitted")
    data_flags(p)
    p.set_defaults(func=cmd_tokenize)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(message)s")
        args.func(args)
    except Exception as exc:  # every failure becomes one JSON line
        fields = exc.fields if isinstance(exc, CliError) else {}
        if isinstance(exc, OSError) and getattr(exc, "filename", None):
            fields = {"file": str(exc.filename)}
        line = {"error": type(exc).__name__, "message": str(exc), **fields}
        print(json.dumps(line, sort_keys=True), file=sys.stderr)
        return 2 if fields.get("kind") == "usage" else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
