"""Tests for versioned checkpoints."""

import tempfile
import unittest
from pathlib import Path

import torch

from maskslot.checkpoint import (
    FORMAT_VERSION,
    CheckpointError,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from maskslot.config import config_to_dict
from maskslot.gradcheck import tiny_config
from maskslot.numerics import seed_everything, set_precision
from maskslot.trainer import init_state, to_checkpoint


class TestCheckpointFiles(unittest.TestCase):
    """Tests for save_checkpoint() and load_checkpoint()."""

    def setUp(self):
        set_precision("float64")
        seed_everything(0)
        self.cfg = tiny_config()
        self.state = init_state(self.cfg)
        with torch.no_grad():
            for param in self.state.teacher.parameters():
                param.add_(1.0)
        self.state.step = 7
        self.state.rng.generator()

    def test_save_then_load(self):
        """Verify step, weights, stream position and config survive a save."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "nested" / "ckpt.pt"
            save_checkpoint(path, to_checkpoint(self.state, self.cfg))
            loaded = load_checkpoint(path)
        self.assertEqual(loaded.step, 7)
        self.assertEqual(loaded.rng.position, 1)
        self.assertEqual(config_to_dict(loaded.config), config_to_dict(self.cfg))
        for key, value in self.state.student.state_dict().items():
            self.assertTrue(torch.equal(value, loaded.student[key]))

    def test_model_from_checkpoint_picks_weights(self):
        """Verify the teacher is rebuilt by default and the student on request."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "ckpt.pt"
            save_checkpoint(path, to_checkpoint(self.state, self.cfg))
            loaded = load_checkpoint(path)
        teacher = model_from_checkpoint(loaded)
        student = model_from_checkpoint(loaded, use_teacher=False)
        self.assertTrue(torch.equal(teacher.attention.bank.mu, self.state.teacher.attention.bank.mu))
        self.assertTrue(torch.equal(student.attention.bank.mu, self.state.student.attention.bank.mu))
        self.assertFalse(teacher.training)

    def test_missing_file(self):
        """Verify a missing checkpoint raises CheckpointError."""
        with self.assertRaises(CheckpointError):
            load_checkpoint(Path("/nonexistent/ckpt.pt"))

    def test_wrong_version(self):
        """Verify an unknown format version is refused."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "old.pt"
            torch.save(
                {
                    "format_version": FORMAT_VERSION + 1,
                    "step": 0,
                    "student": {},
                    "teacher": {},
                    "optimizer": {},
                    "rng": {"seed": 0, "position": 0},
                    "config": {},
                },
                path,
            )
            with self.assertRaises(CheckpointError) as ctx:
                load_checkpoint(path)
        self.assertIn("format version", str(ctx.exception))

    def test_missing_keys(self):
        """Verify an incomplete checkpoint names what is missing."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "partial.pt"
            torch.save({"format_version": FORMAT_VERSION, "step": 3}, path)
            with self.assertRaises(CheckpointError) as ctx:
                load_checkpoint(path)
        self.assertIn("student", str(ctx.exception))

    def test_not_a_checkpoint(self):
        """Verify arbitrary bytes raise CheckpointError."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "garbage.pt"
            path.write_bytes(b"not a checkpoint")
            with self.assertRaises(CheckpointError):
                load_checkpoint(path)

    def test_weights_must_fit_config(self):
        """Verify weights from another architecture raise CheckpointError."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "ckpt.pt"
            checkpoint = to_checkpoint(self.state, self.cfg)
            save_checkpoint(path, checkpoint)
            loaded = load_checkpoint(path)
        loaded.config.model.dim = 16
        with self.assertRaises(CheckpointError):
            model_from_checkpoint(loaded)


if __name__ == "__main__":
    unittest.main()
