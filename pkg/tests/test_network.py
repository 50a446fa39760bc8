"""Network assembly and checkpoint serialization contracts."""

import struct

import numpy as np
import pytest

from sfunet import (
    CheckpointError,
    ConfigError,
    GradTape,
    ModelConfig,
    RealTensor4,
    SFUNet,
    ShapeError,
    TrainConfig,
    load,
    save,
)
from sfunet import training


def toy_config(**overrides):
    base = dict(input_channels=1, n_classes=2, input_hw=(32, 32), precision="double")
    base.update(overrides)
    return ModelConfig(**base)


class TestConfig:
    @pytest.mark.parametrize(
        "field,value",
        [
            ("n_classes", 1),
            ("input_hw", (30, 32)),
            ("input_hw", (0, 0)),
            ("mask_rho", 0.0),
            ("mask_rho", 1.5),
            ("filter_mode", "spooky"),
            ("precision", "half"),
            ("input_channels", 0),
        ],
    )
    def test_invalid_config_names_field(self, field, value):
        cfg = toy_config()
        setattr(cfg, field, value)
        with pytest.raises(ConfigError) as err:
            cfg.validate()
        assert field.split("_")[0] in str(err.value) or field in str(err.value)

    def test_text_roundtrip(self):
        cfg = toy_config(n_classes=4, mask_rho=0.37, filter_mode="per-channel", use_mpca=False)
        restored = ModelConfig.from_text(cfg.to_text())
        assert restored == cfg


class TestBuild:
    def test_seeded_builds_bit_identical(self):
        a = SFUNet(toy_config(), seed=11)
        b = SFUNet(toy_config(), seed=11)
        for pa, pb in zip(a.registry, b.registry):
            assert pa.name == pb.name
            np.testing.assert_array_equal(pa.value.data, pb.value.data)

    def test_different_seeds_differ(self):
        a = SFUNet(toy_config(), seed=1)
        b = SFUNet(toy_config(), seed=2)
        assert any(
            not np.array_equal(pa.value.data, pb.value.data)
            for pa, pb in zip(a.registry, b.registry)
        )

    def test_four_class_head(self):
        model = SFUNet(toy_config(n_classes=4), seed=0)
        assert model.head.conv1.weight.dims[0] == 4
        x = RealTensor4(np.zeros((1, 1, 32, 32)))
        assert model.forward(x).dims == (1, 4, 32, 32)

    def test_parameter_summary_accounts_everything(self):
        model = SFUNet(toy_config(), seed=0)
        s = model.parameter_summary()
        assert s["total"] == s["encoder"] + s["mpca"] + s["fsa"] + s["decoder"] + s["head"]
        assert s["fsa"] < 100_000  # broadcast filters at 32x32 are tiny

    def test_ablation_flags_shrink_registry(self):
        full = SFUNet(toy_config(), seed=0).parameter_summary()
        no_mpca = SFUNet(toy_config(use_mpca=False), seed=0).parameter_summary()
        no_fsa = SFUNet(toy_config(use_fsa=False), seed=0).parameter_summary()
        assert no_mpca["mpca"] == 0 and no_mpca["fsa"] == full["fsa"]
        assert no_fsa["fsa"] == 0 and no_fsa["mpca"] == full["mpca"]


class TestForward:
    def test_shape_contract_and_determinism(self, rng):
        model = SFUNet(toy_config(), seed=3)
        x = RealTensor4(rng.uniform(0, 1, (2, 1, 32, 32)))
        out1 = model.forward(x)
        out2 = model.forward(x)
        assert out1.dims == (2, 2, 32, 32)
        np.testing.assert_array_equal(out1.data, out2.data)

    def test_resolution_mismatch_rejected(self):
        model = SFUNet(toy_config(), seed=0)
        with pytest.raises(ShapeError):
            model.forward(RealTensor4(np.zeros((1, 1, 64, 64))))

    def test_shape_contract_at_64(self, rng):
        model = SFUNet(toy_config(n_classes=3, input_hw=(64, 64)), seed=0)
        x = RealTensor4(rng.uniform(0, 1, (1, 1, 64, 64)))
        assert model.forward(x).dims == (1, 3, 64, 64)
        feats = model.encoder(x)
        assert [f.dims[2] for f in feats] == [64, 32, 16, 8, 4]

    def test_channel_mismatch_rejected(self):
        model = SFUNet(toy_config(), seed=0)
        with pytest.raises(ShapeError):
            model.forward(RealTensor4(np.zeros((1, 3, 32, 32))))

    def test_no_dead_parameters_at_toy_resolution(self, rng):
        model = SFUNet(toy_config(), seed=5)
        cfg = TrainConfig()
        for trial in range(2):
            x = RealTensor4(rng.uniform(0, 1, (2, 1, 32, 32)))
            y = rng.integers(0, 2, (2, 32, 32))
            tape = GradTape()
            with tape:
                loss = training.total_loss(model.forward(x), y, cfg)
            tape.backward(loss)
        dead = [p.name for p in model.registry if not np.any(p._grad)]
        assert dead == []


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        model = SFUNet(toy_config(), seed=7)
        path = tmp_path / "model.sfun"
        save(model, path)
        restored, extra = load(path)
        assert extra is None
        assert restored.config == model.config
        for pa, pb in zip(model.registry, restored.registry):
            np.testing.assert_array_equal(pa.value.data, pb.value.data)

    def test_roundtrip_after_optimizer_step(self, tmp_path, rng):
        model = SFUNet(toy_config(), seed=7)
        cfg = TrainConfig()
        state = training.AdamState(model.registry)
        x = RealTensor4(rng.uniform(0, 1, (1, 1, 32, 32)))
        y = rng.integers(0, 2, (1, 32, 32))
        tape = GradTape()
        with tape:
            loss = training.total_loss(model.forward(x), y, cfg)
        tape.backward(loss)
        training.adam_step(model.registry, state, 1e-4, cfg)
        model.registry.zero_grad()

        path = tmp_path / "stepped.sfun"
        save(model, path, extra_tensors=state.to_tensors())
        restored, extra = load(path)
        for pa, pb in zip(model.registry, restored.registry):
            np.testing.assert_array_equal(pa.value.data, pb.value.data)
        restored_state = training.AdamState.from_tensors(restored.registry, extra)
        assert restored_state.step == state.step
        for name in state.m:
            np.testing.assert_array_equal(state.m[name], restored_state.m[name])
            np.testing.assert_array_equal(state.v[name], restored_state.v[name])

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "junk.sfun"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load(path)

    def test_truncation(self, tmp_path):
        model = SFUNet(toy_config(), seed=0)
        path = tmp_path / "model.sfun"
        save(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            load(path)

    def test_bad_version(self, tmp_path):
        model = SFUNet(toy_config(), seed=0)
        path = tmp_path / "model.sfun"
        save(model, path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 9)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load(path)

    def test_config_mismatch(self, tmp_path):
        model = SFUNet(toy_config(n_classes=2), seed=0)
        path = tmp_path / "binary.sfun"
        save(model, path)
        with pytest.raises(ConfigError, match="n_classes"):
            load(path, expect_config=toy_config(n_classes=4))

    def test_tensor_dim_mismatch(self, tmp_path):
        import io
        from sfunet import network

        model = SFUNet(toy_config(), seed=0)
        tensors = {p.name: p.value.data for p in model.registry}
        first = next(iter(tensors))
        tensors[first] = np.zeros((1, 1, 1, 1))  # wrong dims, right name
        buf = io.BytesIO()
        buf.write(network.MAGIC)
        buf.write(struct.pack("<I", network.VERSION))
        blob = model.config.to_text().encode()
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
        network._write_table(buf, tensors)
        path = tmp_path / "baddims.sfun"
        path.write_bytes(buf.getvalue())
        with pytest.raises(CheckpointError, match="dim mismatch"):
            load(path)

    def test_single_precision_roundtrip_keeps_dtype(self, tmp_path):
        model = SFUNet(toy_config(precision="single"), seed=0)
        path = tmp_path / "single.sfun"
        save(model, path)
        restored, _ = load(path)
        for p in restored.registry:
            assert p.value.dtype == np.float32
