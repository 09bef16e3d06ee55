import json

import numpy as np
import pytest

from eqspike.checkpoint import (CheckpointError, load_student, load_teacher,
                                save_student, save_teacher)
from eqspike.model import EncoderStack, StackConfig, TeacherConfig, TeacherModel
from eqspike.quantizer import QuantMode


def make_stack(mode=QuantMode.TERNARY_158BIT, seed=0):
    cfg = StackConfig(vocab_size=11, hidden_dim=8, intermediate_dim=12,
                      num_heads=2, num_layers=2, max_len=6, num_labels=2,
                      quant_mode=mode)
    return EncoderStack(cfg, np.random.default_rng(seed))


def test_student_roundtrip_parameters(tmp_path):
    stack = make_stack()
    path = tmp_path / "ckpt.json"
    save_student(stack, "kd", path)
    loaded, stage = load_student(path)
    assert stage == "kd"
    for k, v in stack.named_params().items():
        np.testing.assert_array_equal(loaded.named_params()[k], v)
    assert loaded.cfg.quant_mode is QuantMode.TERNARY_158BIT


def test_student_roundtrip_preserves_inference(tmp_path):
    stack = make_stack()
    tokens = np.array([2, 4, 5])
    logits, _, _ = stack.temporal_simulate(tokens, T=20)
    path = tmp_path / "ckpt.json"
    save_student(stack, "finetuned", path)
    loaded, _ = load_student(path)
    logits2, _, _ = loaded.temporal_simulate(tokens, T=20)
    np.testing.assert_allclose(logits, logits2, atol=1e-12)


def test_loaded_student_is_frozen(tmp_path):
    stack = make_stack()
    path = tmp_path / "ckpt.json"
    save_student(stack, "kd", path)
    loaded, _ = load_student(path)
    for blk in loaded.blocks:
        for lin in blk.linears().values():
            assert lin.frozen and lin.frozen_codes is not None


def test_fp_student_has_no_code_section(tmp_path):
    stack = make_stack(mode=QuantMode.FULL_PRECISION)
    path = tmp_path / "ckpt.json"
    save_student(stack, "init", path)
    obj = json.loads(path.read_text())
    assert obj["quant"]["layers"] == {}
    loaded, _ = load_student(path)
    assert loaded.cfg.quant_mode is QuantMode.FULL_PRECISION


def test_save_student_rejects_bad_stage(tmp_path):
    with pytest.raises(CheckpointError):
        save_student(make_stack(), "bogus", tmp_path / "x.json")


def test_checkpoint_files_are_deterministic(tmp_path):
    stack = make_stack()
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_student(stack, "kd", p1)
    save_student(stack, "kd", p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_student_rejects_wrong_kind(tmp_path):
    teacher = TeacherModel(TeacherConfig(vocab_size=11, hidden_dim=8,
                                         intermediate_dim=12, num_heads=2,
                                         num_layers=1, max_len=6),
                           np.random.default_rng(0))
    path = tmp_path / "t.json"
    save_teacher(teacher, path)
    with pytest.raises(CheckpointError):
        load_student(path)


def test_load_student_rejects_shape_mismatch(tmp_path):
    stack = make_stack()
    path = tmp_path / "ckpt.json"
    save_student(stack, "kd", path)
    obj = json.loads(path.read_text())
    obj["params"]["cls.b"] = [0.0, 0.0, 0.0]
    path.write_text(json.dumps(obj))
    with pytest.raises(CheckpointError):
        load_student(path)


def test_teacher_roundtrip(tmp_path):
    teacher = TeacherModel(TeacherConfig(vocab_size=11, hidden_dim=8,
                                         intermediate_dim=12, num_heads=2,
                                         num_layers=2, max_len=6),
                           np.random.default_rng(1))
    path = tmp_path / "t.json"
    save_teacher(teacher, path, metrics={"dev_accuracy": 0.75})
    loaded = load_teacher(path)
    for k, v in teacher.named_params().items():
        np.testing.assert_array_equal(loaded.named_params()[k], v)
    assert json.loads(path.read_text())["metrics"]["dev_accuracy"] == 0.75


def test_load_teacher_rejects_student_file(tmp_path):
    path = tmp_path / "s.json"
    save_student(make_stack(), "init", path)
    with pytest.raises(CheckpointError):
        load_teacher(path)
