"""Versioned JSON checkpoints for student and teacher models.

Student checkpoints carry the latent full-precision tensors, the quant
mode, frozen alpha/beta statistics, and the packed 2-bit integer codes
(little-endian within each byte) used by the inference path.  A stage tag
records where in the training pipeline the artifact was produced.
"""

from __future__ import annotations

import json

import numpy as np

from .model import EncoderStack, StackConfig, TeacherConfig, TeacherModel
from .quantizer import QuantMode, pack_codes, unpack_codes

FORMAT_VERSION = 1
STAGES = ("init", "kd", "finetuned")


class CheckpointError(ValueError):
    pass


def _dump(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _params_to_json(params):
    return {k: v.tolist() for k, v in params.items()}


def _params_from_json(params, blob):
    for k, v in params.items():
        arr = np.asarray(blob[k], dtype=np.float64)
        if arr.shape != v.shape:
            raise CheckpointError(f"parameter {k}: shape {arr.shape} vs {v.shape}")
        v[...] = arr


def save_student(stack: EncoderStack, stage: str, path):
    if stage not in STAGES:
        raise CheckpointError(f"unknown stage {stage!r}")
    cfg = stack.cfg
    quant = {"mode": cfg.quant_mode.value, "layers": {}}
    if cfg.quant_mode is not QuantMode.FULL_PRECISION:
        for i, blk in enumerate(stack.blocks):
            for nm, lin in blk.linears().items():
                codes = lin.codes()
                quant["layers"][f"blk{i}.{nm}"] = {
                    "alpha": lin.alpha, "beta": lin.beta,
                    "shape": list(codes.shape),
                    "codes": pack_codes(codes),
                }
    obj = {"format_version": FORMAT_VERSION, "kind": "student", "stage": stage,
           "config": {"vocab_size": cfg.vocab_size, "hidden_dim": cfg.hidden_dim,
                      "intermediate_dim": cfg.intermediate_dim,
                      "num_heads": cfg.num_heads, "num_layers": cfg.num_layers,
                      "max_len": cfg.max_len, "num_labels": cfg.num_labels,
                      "quant_mode": cfg.quant_mode.value, "gamma": cfg.gamma,
                      "v_th": cfg.v_th,
                      "binary_output_scale": cfg.binary_output_scale},
           "params": _params_to_json(stack.named_params()),
           "quant": quant}
    _dump(path, obj)


def load_student(path):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("format_version") != FORMAT_VERSION or obj.get("kind") != "student":
        raise CheckpointError(f"{path}: not a student checkpoint")
    c = obj["config"]
    cfg = StackConfig(vocab_size=c["vocab_size"], hidden_dim=c["hidden_dim"],
                      intermediate_dim=c["intermediate_dim"],
                      num_heads=c["num_heads"], num_layers=c["num_layers"],
                      max_len=c["max_len"], num_labels=c["num_labels"],
                      quant_mode=QuantMode(c["quant_mode"]), gamma=c["gamma"],
                      v_th=c["v_th"],
                      binary_output_scale=c["binary_output_scale"])
    stack = EncoderStack(cfg, np.random.default_rng(0))
    _params_from_json(stack.named_params(), obj["params"])
    for i, blk in enumerate(stack.blocks):
        for nm, lin in blk.linears().items():
            entry = obj["quant"]["layers"].get(f"blk{i}.{nm}")
            if entry is not None:
                lin.alpha = entry["alpha"]
                lin.beta = entry["beta"]
                lin.frozen = True
                lin.frozen_codes = unpack_codes(
                    entry["codes"], tuple(entry["shape"])).astype(np.int8)
    return stack, obj["stage"]


def save_teacher(teacher: TeacherModel, path, metrics: dict | None = None):
    cfg = teacher.cfg
    obj = {"format_version": FORMAT_VERSION, "kind": "teacher", "stage": "teacher",
           "config": {"vocab_size": cfg.vocab_size, "hidden_dim": cfg.hidden_dim,
                      "intermediate_dim": cfg.intermediate_dim,
                      "num_heads": cfg.num_heads, "num_layers": cfg.num_layers,
                      "max_len": cfg.max_len, "num_labels": cfg.num_labels},
           "params": _params_to_json(teacher.named_params()),
           "metrics": metrics or {}}
    _dump(path, obj)


def load_teacher(path):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("format_version") != FORMAT_VERSION or obj.get("kind") != "teacher":
        raise CheckpointError(f"{path}: not a teacher checkpoint")
    c = obj["config"]
    cfg = TeacherConfig(vocab_size=c["vocab_size"], hidden_dim=c["hidden_dim"],
                        intermediate_dim=c["intermediate_dim"],
                        num_heads=c["num_heads"], num_layers=c["num_layers"],
                        max_len=c["max_len"], num_labels=c["num_labels"])
    teacher = TeacherModel(cfg, np.random.default_rng(0))
    _params_from_json(teacher.named_params(), obj["params"])
    return teacher
