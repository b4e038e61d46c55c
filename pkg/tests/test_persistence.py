"""Config validation, binary checkpoint round-trips, CSV and SVG output."""

import json

import numpy as np
import pytest

from klora.checkpoint import (
    BadMagicError,
    ChecksumError,
    UnsupportedVersionError,
    install_records,
    load_checkpoint,
    save_checkpoint,
)
from klora.config import (
    ConfigError,
    DEFAULTS,
    apply_defaults,
    dataset_from,
    load_config,
    save_config,
    trainer_config_from,
)
from klora.datasets import high_rank_regression
from klora.kernels import KernelKind
from klora.model import TrainerConfig, build_model
from klora.reports import read_csv, write_csv
from klora.svgplot import emit_heatmap_svg, render_heatmap_svg


class TestConfig:
    def test_minimal_config_gets_documented_defaults(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"model": {"layer_dims": [8, 8]}}))
        cfg = load_config(path)
        assert cfg.kernel["kind"] == "mix-k"
        assert cfg.kernel["pieces"] == 2
        assert cfg.sparsity["smoothing_beta1"] == 0.85
        assert cfg.sparsity["smoothing_beta2"] == 0.85
        assert cfg.sparsity["schedule"] == "cubic"
        assert cfg.sparsity["budget_ratio"] == 0.3
        assert cfg.sparsity["sparsify_mode"] == "soft"
        assert cfg.model["layer_dims"] == [8, 8]

    def test_budget_ratio_range_error_names_key(self):
        with pytest.raises(ConfigError, match="sparsity.budget_ratio"):
            apply_defaults({"sparsity": {"budget_ratio": 1.5}})

    def test_unknown_key_rejected_with_name(self):
        with pytest.raises(ConfigError, match="unknown key 'train.momentum'"):
            apply_defaults({"train": {"momentum": 0.9}})
        with pytest.raises(ConfigError, match="unknown key '<root>.extra'"):
            apply_defaults({"extra": 1})

    def test_unknown_kernel_rejected(self):
        with pytest.raises(ConfigError, match="kernel.kind"):
            apply_defaults({"kernel": {"kind": "polynomial"}})

    def test_malformed_json_reported(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="malformed JSON"):
            load_config(path)

    def test_roundtrip_save_load_structurally_equal(self, tmp_path):
        cfg = apply_defaults({"model": {"layer_dims": [8, 8], "rank": 3}})
        path = tmp_path / "cfg.json"
        save_config(cfg, path)
        again = load_config(path)
        assert again.to_dict() == cfg.to_dict()

    def test_defaulting_is_idempotent(self):
        once = apply_defaults({"train": {"lr": 0.5}})
        twice = apply_defaults(once.to_dict())
        assert once.to_dict() == twice.to_dict()

    def test_trainer_config_translation(self):
        cfg = apply_defaults(
            {"kernel": {"kind": "linear"}, "sparsity": {"budget_ratio": 1.0}}
        )
        tc = trainer_config_from(cfg)
        assert tc.kernel_kind is KernelKind.LINEAR
        assert tc.budget_ratio == 1.0

    def test_dataset_from_uses_model_dims(self):
        cfg = apply_defaults({"model": {"layer_dims": [8, 8]}, "train": {"task": {"samples": 32}}})
        ds = dataset_from(cfg)
        assert ds.x.shape == (32, 8)
        assert len(ds.base_weights) == 1

    def test_config_driven_attention_block(self):
        cfg = apply_defaults(
            {
                "model": {"layer_dims": [8, 8, 8],
                           "attention": {"position": 0, "tokens": 2}},
                "train": {"task": {"samples": 16}, "epochs": 1, "steps_per_epoch": 2,
                           "batch_size": 8},
            }
        )
        ds = dataset_from(cfg)
        assert ds.attention is not None and len(ds.attention["weights"]) == 4
        from klora.model import Trainer, build_model

        model = build_model(ds, trainer_config_from(cfg))
        assert len(model.adapted_layers()) == 2 + 4
        Trainer(model, trainer_config_from(cfg), ds).fine_tune()

    def test_attention_tokens_must_divide_width(self):
        cfg_raw = {
            "model": {"layer_dims": [8, 9, 8], "attention": {"position": 0, "tokens": 2}},
        }
        with pytest.raises(ConfigError, match="attention.tokens"):
            dataset_from(apply_defaults(cfg_raw))

    def test_defaults_documented_in_one_place(self):
        assert set(DEFAULTS) == {"model", "kernel", "sparsity", "train", "experiments"}


def small_model(seed=0, kind=KernelKind.MIX_K):
    ds = high_rank_regression(seed=seed, layer_dims=(6, 5, 7), samples=16)
    cfg = TrainerConfig(seed=seed, rank=2, kernel_kind=kind, epochs=0)
    return build_model(ds, cfg)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        model = small_model()
        # make the state nontrivial
        rng = np.random.default_rng(3)
        for layer in model.adapted_layers():
            layer.pair.A.data[:] = rng.normal(size=layer.pair.A.data.shape)
            layer.spec.alpha_p.data[:] = rng.normal(size=2)
        path = tmp_path / "adapter.bin"
        save_checkpoint(model, path)
        records = load_checkpoint(path)
        assert len(records) == 2
        for layer, rec in zip(model.adapted_layers(), records):
            np.testing.assert_array_equal(rec.a, layer.pair.A.data)
            np.testing.assert_array_equal(rec.b, layer.pair.B.data)
            np.testing.assert_array_equal(rec.coefficients, layer.spec.coefficient_values())
            assert rec.kind is layer.spec.kind

    def test_install_restores_state(self, tmp_path):
        model = small_model(seed=1)
        rng = np.random.default_rng(5)
        for layer in model.adapted_layers():
            layer.pair.B.data[:] = rng.normal(size=layer.pair.B.data.shape)
        path = tmp_path / "adapter.bin"
        save_checkpoint(model, path)
        other = small_model(seed=2)
        install_records(other, load_checkpoint(path))
        for a, b in zip(model.adapted_layers(), other.adapted_layers()):
            np.testing.assert_array_equal(a.pair.B.data, b.pair.B.data)

    def test_truncated_file_fails_checksum(self, tmp_path):
        model = small_model()
        path = tmp_path / "adapter.bin"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-11])
        with pytest.raises(ChecksumError):
            load_checkpoint(path)

    def test_corrupted_byte_fails_checksum(self, tmp_path):
        model = small_model()
        path = tmp_path / "adapter.bin"
        save_checkpoint(model, path)
        blob = bytearray(path.read_bytes())
        blob[20] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "not.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(BadMagicError):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        model = small_model()
        path = tmp_path / "adapter.bin"
        save_checkpoint(model, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 2  # bump the little-endian version field
        path.write_bytes(bytes(blob))
        with pytest.raises(UnsupportedVersionError):
            load_checkpoint(path)

    def test_layer_records_per_kind(self, tmp_path):
        for kind in KernelKind:
            model = small_model(kind=kind)
            path = tmp_path / f"{kind.value}.bin"
            save_checkpoint(model, path)
            records = load_checkpoint(path)
            assert records[0].kind is kind


class TestCsv:
    def test_roundtrip_exact(self, tmp_path):
        header = ["kernel", "seed", "mse"]
        rows = [["mix-k", 0, 0.1 + 0.2], ["linear", 1, 1e-17], ["p-linear", 2, 3.0]]
        path = tmp_path / "table.csv"
        write_csv(path, header, rows)
        header2, rows2 = read_csv(path)
        assert header2 == header
        assert rows2 == rows

    def test_lf_endings_and_header(self, tmp_path):
        path = tmp_path / "t.csv"
        write_csv(path, ["a", "b"], [[1, 2.5]])
        raw = path.read_bytes()
        assert b"\r" not in raw
        assert raw.decode().splitlines()[0] == "a,b"


class TestSvg:
    def test_single_unshaded_cell(self, tmp_path):
        svg = render_heatmap_svg([[0.0]])
        assert 'fill="#ffffff"' in svg

    def test_all_ones_darkest(self):
        svg = render_heatmap_svg([[1.0, 1.0], [1.0, 1.0]])
        assert svg.count('fill="#000000"') == 4
        assert 'fill="#ffffff"' not in svg

    def test_deterministic_bytes(self, tmp_path):
        table = [[0.25, 0.5], [0.75, 1.0]]
        p1, p2 = tmp_path / "a.svg", tmp_path / "b.svg"
        emit_heatmap_svg(table, p1)
        emit_heatmap_svg(table, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_ragged_rejected(self):
        with pytest.raises(ValueError, match="ragged"):
            render_heatmap_svg([[0.1, 0.2], [0.3]])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="out of range"):
            render_heatmap_svg([[1.5]])
