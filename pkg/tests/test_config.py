"""
Tests for configuration loading and overrides.
"""
import json
import os
import shutil
import tempfile
import unittest

from pim_attention_sim.config import (
    AppConfig,
    HardwareConfig,
    QuantConfig,
    WorkloadSpec,
    apply_overrides,
    dump_config,
    from_flat_dict,
    load_config,
    parse_key_values,
    parse_value,
    save_config,
    to_flat_dict,
)
from pim_attention_sim.exceptions import ConfigError


class TestParsing(unittest.TestCase):
    """Test cases for value and key=value parsing."""

    def test_parse_value(self):
        self.assertIs(parse_value("true"), True)
        self.assertIs(parse_value("False"), False)
        self.assertIsNone(parse_value("none"))
        self.assertEqual(parse_value("42"), 42)
        self.assertEqual(parse_value("2.5"), 2.5)
        self.assertEqual(parse_value("'42'"), "42")
        self.assertEqual(parse_value("sum"), "sum")

    def test_parse_key_values(self):
        text = "# fabric\nxb_rows = 64\nxb_cols=64  # wider\n\nquant_theta=0.01\n"
        self.assertEqual(parse_key_values(text), {"xb_rows": 64, "xb_cols": 64, "quant_theta": 0.01})

    def test_malformed_lines(self):
        with self.assertRaises(ConfigError):
            parse_key_values("xb_rows 64")
        with self.assertRaises(ConfigError):
            parse_key_values("=3")
        with self.assertRaises(ConfigError):
            parse_key_values("tiles=2\ntiles=3")


class TestFlatDict(unittest.TestCase):
    """Test cases for the flat key layout."""

    def test_sections_by_prefix(self):
        config = from_flat_dict({"tiles": 8, "quant_bits": 8, "workload_seq_len": 64, "batch_size": 64})
        self.assertEqual(config.hardware.tiles, 8)
        self.assertEqual(config.quant.bits, 8)
        self.assertEqual(config.workload.seq_len, 64)
        self.assertEqual(config.batch_size, 64)

    def test_encoder_shape_is_workload(self):
        config = from_flat_dict({"workload_fc_dim": 256, "workload_layers": 3})
        self.assertEqual(config.workload.fc_dim, 256)
        self.assertEqual(config.workload.layers, 3)
        self.assertFalse(hasattr(config, "fc_dim"))
        self.assertIn("workload_fc_dim", to_flat_dict(AppConfig()))
        for key in ("fc_dim", "layers"):
            with self.assertRaises(ConfigError):
                from_flat_dict({key: 2})

    def test_int_accepted_for_float(self):
        config = from_flat_dict({"cycle_ns": 10, "quant_gamma": 4})
        self.assertIsInstance(config.hardware.cycle_ns, float)
        self.assertEqual(config.quant.gamma, 4.0)

    def test_unknown_keys(self):
        with self.assertRaises(ConfigError) as ctx:
            from_flat_dict({"warp_drive": 1, "quant_color": 2})
        self.assertIn("quant_color", str(ctx.exception))
        self.assertIn("warp_drive", str(ctx.exception))
        with self.assertRaises(ConfigError):
            from_flat_dict({"hardware": {}})

    def test_wrong_type(self):
        with self.assertRaises(ConfigError):
            from_flat_dict({"tiles": "many"})

    def test_flatten_inverts(self):
        config = AppConfig()
        self.assertEqual(from_flat_dict(to_flat_dict(config)), config)

    def test_apply_overrides_copies(self):
        config = AppConfig()
        changed = apply_overrides(config, {"workload_density": 0.2})
        self.assertEqual(changed.workload.density, 0.2)
        self.assertEqual(config.workload.density, 0.1)


class TestValidation(unittest.TestCase):
    """Test cases for configuration invariants."""

    def test_hardware(self):
        for overrides in ({"tiles": 0}, {"xb_cols": 16}, {"write_row_cost_mode": "avg"}, {"xb_power_mw": -1.0}):
            with self.assertRaises(ConfigError, msg=overrides):
                HardwareConfig(**overrides).validate()
        HardwareConfig(ctrl_dispatch_ns=0.0).validate()

    def test_quant(self):
        for overrides in ({"bits": 1}, {"gamma": 0.0}, {"theta": 1.5}, {"d": 0}):
            with self.assertRaises(ConfigError, msg=overrides):
                QuantConfig(**overrides).validate()
        self.assertEqual(QuantConfig().resolve_theta(320), 1 / 640)
        self.assertEqual(QuantConfig(theta=0.2).resolve_theta(320), 0.2)
        self.assertEqual((QuantConfig(bits=4).qmin, QuantConfig(bits=4).qmax), (-8, 7))

    def test_workload(self):
        for overrides in ({"density": 0.0}, {"mask_kind": "spiral"}, {"mask_kind": "file"}, {"layers": 0}):
            with self.assertRaises(ConfigError, msg=overrides):
                WorkloadSpec(**overrides).validate()
        WorkloadSpec(mask_kind="file", mask_file="mask.txt").validate()

    def test_application(self):
        for overrides in ({"log_level": "LOUD"}, {"batch_size": 0}, {"max_workers": 0}, {"checkpoint_interval": 0}):
            with self.assertRaises(ConfigError, msg=overrides):
                AppConfig(**overrides).validate()


class TestFiles(unittest.TestCase):
    """Test cases for loading and saving configuration files."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def _path(self, name):
        return os.path.join(self.temp_dir, name)

    def test_defaults(self):
        config = load_config()
        self.assertEqual(config.hardware.tiles, 64)
        self.assertEqual(config.workload.seq_len, 320)

    def test_json_file(self):
        path = self._path("config.json")
        with open(path, "w") as f:
            json.dump({"adc_per_ag": 2, "workload_seed": 7}, f)
        config = load_config(path)
        self.assertEqual(config.hardware.adc_per_ag, 2)
        self.assertEqual(config.workload.seed, 7)

    def test_key_value_file(self):
        path = self._path("fabric.cfg")
        with open(path, "w") as f:
            f.write("write_row_cost_mode=max\nfunctional=false\n")
        config = load_config(path)
        self.assertEqual(config.hardware.per_row_write_ns, 2.11)
        self.assertFalse(config.functional)

    def test_missing_and_malformed(self):
        with self.assertRaises(ConfigError):
            load_config(self._path("absent.json"))
        path = self._path("broken.json")
        with open(path, "w") as f:
            f.write("{not json")
        with self.assertRaises(ConfigError):
            load_config(path)
        path = self._path("list.json")
        with open(path, "w") as f:
            f.write("[1, 2]")
        with self.assertRaises(ConfigError):
            load_config(path)

    def test_dump_is_loadable(self):
        config = apply_overrides(AppConfig(), {"quant_theta": 0.05, "log_file": "run.log"})
        path = self._path("dumped.cfg")
        with open(path, "w") as f:
            f.write(dump_config(config))
        self.assertEqual(load_config(path), config)
        self.assertIn("# hardware", dump_config(config))

    def test_save_config(self):
        path = self._path("saved.json")
        config = AppConfig()
        save_config(config, path)
        self.assertEqual(load_config(path), config)
        with self.assertRaises(ConfigError):
            save_config(config, os.path.join(self.temp_dir, "missing", "x.json"))


if __name__ == '__main__':
    unittest.main()
