"""Config handling and staged training orchestration behind the CLI.

Stage 1 distills intermediate-layer knowledge from a task-trained teacher
into the quantization-enabled student; stage 2 fine-tunes the student with
cross-entropy against the true labels.
"""

from __future__ import annotations

import copy
import json
import os

import numpy as np
import yaml

from . import autodiff as ad
from .data import Tokenizer, batches, encode_corpus, load_tsv, synth_task
from .distill import KdConfig, run_distillation
from .equilibrium import SolverConfig, convergence_trace, solve_fixed_point
from .energy import (SpikeStats, TechnologyProfile, energy_estimate,
                     expected_accumulates)
from .implicit_grad import VjpSolveConfig, ce_loss_builder, training_step
from .model import EncoderStack, StackConfig, TeacherConfig, TeacherModel
from .numerics import AdamState
from .quantizer import OpCounter, QuantMode


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    return {
        "seed": 0,
        "out_dir": "out",
        "model": {
            "hidden_dim": 32,
            "intermediate_dim": 64,
            "num_heads": 2,
            "num_layers": 2,
            "max_len": 12,
            "quant_mode": "1.58bit",
            "gamma": 1.0,
            "v_th": 1.0,
            "binary_output_scale": False,
        },
        "teacher": {
            "hidden_dim": 32,
            "intermediate_dim": 64,
            "num_heads": 2,
            "num_layers": 2,
            "lr": 1e-3,
            "epochs": 12,
            "batch_size": 16,
        },
        "solver": {"max_iters": 500, "tol": 1e-8, "damping": 1.0},
        "vjp": {"max_terms": 50, "tol": 1e-8},
        "train": {
            "lr": 3e-3,
            "batch_size": 16,
            "kd_epochs": 12,
            "finetune_epochs": 17,
            "adam_beta1": 0.9,
            "adam_beta2": 0.999,
        },
        "kd": {"layer_map": None, "loss_weights": None},
        "data": {
            "task": "keyword-presence",
            "train_size": 64,
            "dev_size": 64,
            "path": None,
        },
        "energy": {"float_acc_pj": 0.9, "int_acc_pj": 0.1, "timesteps": 200},
    }


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, here)
        else:
            out[key] = val
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    try:
        QuantMode(cfg["model"]["quant_mode"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def solver_config(cfg) -> SolverConfig:
    s = cfg["solver"]
    return SolverConfig(max_iters=s["max_iters"], tol=s["tol"],
                        damping=s["damping"])


def vjp_config(cfg) -> VjpSolveConfig:
    return VjpSolveConfig(max_terms=cfg["vjp"]["max_terms"],
                          tol=cfg["vjp"]["tol"])


def make_dataset(cfg):
    """Tokenizer + encoded train/dev splits (synthetic or TSV-backed)."""
    d = cfg["data"]
    if d["path"]:
        train = load_tsv(os.path.join(d["path"], "train.tsv"))
        dev = load_tsv(os.path.join(d["path"], "dev.tsv"))
    else:
        train = synth_task(d["task"], d["train_size"], cfg["seed"])
        dev = synth_task(d["task"], d["dev_size"], cfg["seed"] + 1000)
        dev.split = "dev"
    tokenizer = Tokenizer.build(train, max_len=cfg["model"]["max_len"])
    return tokenizer, encode_corpus(tokenizer, train), \
        encode_corpus(tokenizer, dev), train.label_names


def build_student(cfg, tokenizer, quant_mode=None, num_labels=2) -> EncoderStack:
    m = cfg["model"]
    mode = QuantMode(quant_mode or m["quant_mode"])
    sc = StackConfig(vocab_size=tokenizer.vocab_size, hidden_dim=m["hidden_dim"],
                     intermediate_dim=m["intermediate_dim"],
                     num_heads=m["num_heads"], num_layers=m["num_layers"],
                     max_len=m["max_len"], num_labels=num_labels,
                     quant_mode=mode, gamma=m["gamma"], v_th=m["v_th"],
                     binary_output_scale=m["binary_output_scale"])
    return EncoderStack(sc, np.random.default_rng(cfg["seed"]))


def build_teacher(cfg, tokenizer, num_labels=2) -> TeacherModel:
    t = cfg["teacher"]
    tc = TeacherConfig(vocab_size=tokenizer.vocab_size, hidden_dim=t["hidden_dim"],
                       intermediate_dim=t["intermediate_dim"],
                       num_heads=t["num_heads"], num_layers=t["num_layers"],
                       max_len=cfg["model"]["max_len"], num_labels=num_labels)
    return TeacherModel(tc, np.random.default_rng(cfg["seed"] + 1))


def teacher_accuracy(teacher, items) -> float:
    hits = 0
    with ad.no_grad():
        for tokens, label in items:
            _, logits = teacher.forward(tokens)
            hits += int(np.argmax(logits.data) == label)
    return hits / len(items)


def train_teacher(cfg, teacher, train_items, dev_items) -> dict:
    t = cfg["teacher"]
    adam = AdamState(lr=t["lr"], beta1=cfg["train"]["adam_beta1"],
                     beta2=cfg["train"]["adam_beta2"])
    history = []
    for epoch in range(1, t["epochs"] + 1):
        for batch in batches(train_items, t["batch_size"]):
            leaves = teacher.param_tensors()
            total = None
            for tokens, label in batch:
                _, logits = teacher.forward(tokens, leaves)
                loss = ad.cross_entropy(logits, label)
                total = loss if total is None else ad.add(total, loss)
            total = ad.mul(total, 1.0 / len(batch))
            ad.backward([total], [1.0])
            grads = {k: leaf.grad for k, leaf in leaves.items()
                     if leaf.grad is not None}
            from .numerics import adam_step_many
            adam_step_many(teacher.params, grads, adam)
        history.append({"epoch": epoch, "loss": float(total.data)})
    dev_acc = teacher_accuracy(teacher, dev_items)
    return {"dev_accuracy": dev_acc, "epochs": history}


def student_accuracy(stack, items, scfg: SolverConfig) -> float:
    hits = 0
    for tokens, label in items:
        sol = solve_fixed_point(stack, tokens, scfg)
        logits = stack.cls_w @ sol.asr_star[-1][0] + stack.cls_b
        hits += int(np.argmax(logits) == label)
    return hits / len(items)


def distill_student(cfg, stack, teacher, train_items):
    """Stage-1 KD; returns the per-epoch report."""
    rng = np.random.default_rng(cfg["seed"] + 2)
    kd_cfg = KdConfig.build(stack.cfg.hidden_dim, teacher.cfg.hidden_dim,
                            stack.cfg.num_layers, teacher.cfg.num_layers, rng,
                            layer_map=cfg["kd"]["layer_map"],
                            loss_weights=cfg["kd"]["loss_weights"])
    adam = AdamState(lr=cfg["train"]["lr"], beta1=cfg["train"]["adam_beta1"],
                     beta2=cfg["train"]["adam_beta2"])
    report = run_distillation(stack, teacher, train_items,
                              cfg["train"]["kd_epochs"], kd_cfg, adam,
                              solver_cfg=solver_config(cfg),
                              vjp_cfg=vjp_config(cfg),
                              batch_size=cfg["train"]["batch_size"])
    return report, kd_cfg


def finetune_student(cfg, stack, train_items, dev_items, epochs=None):
    """Stage-2 cross-entropy fine-tuning; returns per-epoch dev accuracy.

    The parameters from the best-dev-accuracy epoch are restored at the
    end (early stopping by checkpoint selection), and the history's last
    entry repeats that selected accuracy under the key "selected".
    """
    adam = AdamState(lr=cfg["train"]["lr"], beta1=cfg["train"]["adam_beta1"],
                     beta2=cfg["train"]["adam_beta2"])
    scfg = solver_config(cfg)
    builder = ce_loss_builder(stack)
    history = []
    params = stack.named_params()
    best_acc, best_snapshot = -1.0, None
    for epoch in range(1, (epochs or cfg["train"]["finetune_epochs"]) + 1):
        for batch in batches(train_items, cfg["train"]["batch_size"]):
            training_step(stack, batch, adam, loss_builder=builder,
                          solver_cfg=scfg, vjp_cfg=vjp_config(cfg))
        acc = student_accuracy(stack, dev_items, scfg)
        history.append({"epoch": epoch, "dev_accuracy": acc})
        if acc > best_acc:
            best_acc = acc
            best_snapshot = {k: v.copy() for k, v in params.items()}
    if best_snapshot is not None:
        for k, v in params.items():
            v[...] = best_snapshot[k]
    history.append({"epoch": "selected", "dev_accuracy": best_acc})
    return history


def simulate(cfg, stack, tokens, T):
    """Convergence trace rows + temporal-vs-equilibrium deviation summary."""
    rows, sol = convergence_trace(stack, tokens, T, solver_config(cfg))
    _, asrs, _ = stack.temporal_simulate(tokens, T)
    deviations = {f"layer_{i}": float(np.mean(np.abs(asrs[f"blk{i}.out"] - a)))
                  for i, a in enumerate(sol.asr_star)}
    summary = {"T": T, "mean_abs_deviation": deviations,
               "max_mean_abs_deviation": max(deviations.values()),
               "solver_iters": sol.iters_used}
    return rows, summary


def energy_compare(cfg, stack_quant, stack_fp, eval_items, T):
    """Energy reports for both models on a shared eval set, plus ratios."""
    if stack_quant.cfg.hidden_dim != stack_fp.cfg.hidden_dim or \
            stack_quant.cfg.num_layers != stack_fp.cfg.num_layers:
        raise ConfigError("energy comparison needs matching architectures")
    profile = TechnologyProfile(float_acc_pj=cfg["energy"]["float_acc_pj"],
                                int_acc_pj=cfg["energy"]["int_acc_pj"])
    out = {}
    for tag, stack in (("quantized", stack_quant), ("full_precision", stack_fp)):
        counts_sum, counter = None, OpCounter()
        for tokens, _ in eval_items:
            _, _, counts = stack.temporal_simulate(tokens, T, counter=counter)
            if counts_sum is None:
                counts_sum = counts
            else:
                counts_sum = {k: counts_sum[k] + v for k, v in counts.items()}
        stats = SpikeStats.from_counts(counts_sum, T * len(eval_items))
        table = stack.linear_op_table(stack.cfg.max_len)
        report = energy_estimate(
            stats, table,
            quantized=stack.cfg.quant_mode is not QuantMode.FULL_PRECISION,
            profile=profile)
        expected = expected_accumulates(counts_sum, stack)
        out[tag] = {"report": report, "stats": stats, "counter": counter,
                    "kernel_ops": dict(counter.per_layer),
                    "expected_ops": expected}
    nq = out["quantized"]["report"].norm_ops
    nf = out["full_precision"]["report"].norm_ops
    out["norm_ops_ratio"] = nq / nf if nf > 0 else None
    eq = out["quantized"]["report"].total_energy_pj
    ef = out["full_precision"]["report"].total_energy_pj
    out["energy_ratio"] = eq / ef if ef > 0 else None
    return out


def energy_report_json(result) -> dict:
    def rep(tag):
        r = result[tag]["report"]
        return {"ifr": {k: round(v, 12) for k, v in sorted(r.ifr.items())},
                "layer_ops": dict(sorted(r.layer_ops.items())),
                "driven_ops": {k: round(v, 6) for k, v in sorted(r.driven_ops.items())},
                "norm_ops": round(r.norm_ops, 12),
                "total_energy_pj": round(r.total_energy_pj, 6),
                "acc_energy_pj": r.acc_energy_pj,
                "metadata": r.metadata}

    return {"quantized": rep("quantized"),
            "full_precision": rep("full_precision"),
            "norm_ops_ratio": None if result["norm_ops_ratio"] is None
            else round(result["norm_ops_ratio"], 12),
            "energy_ratio": None if result["energy_ratio"] is None
            else round(result["energy_ratio"], 12)}


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
