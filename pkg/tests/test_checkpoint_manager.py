"""
Tests for the checkpoint manager.
"""
import json
import os
import shutil
import tempfile
import unittest

from pim_attention_sim.checkpoint_manager import CheckpointManager
from pim_attention_sim.config import AppConfig


class TestCheckpointManager(unittest.TestCase):
    """Test cases for the CheckpointManager class."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.checkpoint_file = os.path.join(self.temp_dir, "run.checkpoint.json")
        self.config = AppConfig(use_checkpoint=True)
        self.completed = {0: {"mode": "CPSAA", "total_ns": 10.0}, 2: {"mode": "CPSAA", "total_ns": 12.5}}

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_save_and_load(self):
        manager = CheckpointManager(self.checkpoint_file, self.config, "abc")
        self.assertTrue(manager.save_checkpoint(self.completed))
        self.assertFalse(os.path.exists(f"{self.checkpoint_file}.tmp"))
        self.assertEqual(manager.load_checkpoint(), self.completed)

        with open(self.checkpoint_file) as f:
            data = json.load(f)
        self.assertEqual(data["run_key"], "abc")
        self.assertEqual(list(data["batches"]), ["0", "2"])

    def test_other_run_ignored(self):
        CheckpointManager(self.checkpoint_file, self.config, "abc").save_checkpoint(self.completed)
        self.assertEqual(CheckpointManager(self.checkpoint_file, self.config, "xyz").load_checkpoint(), {})

    def test_disabled(self):
        manager = CheckpointManager(self.checkpoint_file, AppConfig(use_checkpoint=False))
        self.assertFalse(manager.save_checkpoint(self.completed))
        self.assertFalse(os.path.exists(self.checkpoint_file))
        self.assertEqual(manager.load_checkpoint(), {})

    def test_missing_and_corrupt(self):
        manager = CheckpointManager(self.checkpoint_file, self.config)
        self.assertEqual(manager.load_checkpoint(), {})
        with open(self.checkpoint_file, "w") as f:
            f.write("{truncated")
        self.assertEqual(manager.load_checkpoint(), {})

    def test_save_failure(self):
        manager = CheckpointManager(os.path.join(self.temp_dir, "absent", "cp.json"), self.config)
        self.assertFalse(manager.save_checkpoint(self.completed))

    def test_clear(self):
        manager = CheckpointManager(self.checkpoint_file, self.config)
        manager.save_checkpoint(self.completed)
        self.assertTrue(manager.clear_checkpoint())
        self.assertFalse(os.path.exists(self.checkpoint_file))
        # clearing twice is fine
        self.assertTrue(manager.clear_checkpoint())


if __name__ == '__main__':
    unittest.main()
