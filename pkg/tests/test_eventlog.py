"""Tests for the event log."""

import re
import tempfile
import unittest
from pathlib import Path

from maskslot.eventlog import format_event, log_event, read_events

LINE = re.compile(r"^\d{4}-\d{2}-\d{2} \d{2}:\d{2}:\d{2}; ")


class TestEventLog(unittest.TestCase):
    """Tests for format_event(), log_event() and read_events()."""

    def test_format(self):
        """Verify timestamp, kind and key/value fields are separated by '; '."""
        line = format_event("CHECKPOINT", {"step": 3, "loss": 0.1234567891})
        self.assertRegex(line, LINE)
        self.assertTrue(line.endswith("; CHECKPOINT; step: 3; loss: 0.123457\n"))

    def test_format_without_fields(self):
        """Verify an event may carry only its kind."""
        self.assertTrue(format_event("TRAIN_END").endswith("; TRAIN_END\n"))

    def test_append_and_filter(self):
        """Verify events append in order and filter by kind."""
        with tempfile.TemporaryDirectory() as tmp:
            log_file = Path(tmp) / "nested" / "events.log"
            log_event("TRAIN_START", {"steps": 2}, log_file)
            log_event("CHECKPOINT", {"step": 1}, log_file)
            log_event("CHECKPOINT", {"step": 2}, log_file)
            everything = read_events(log_file)
            checkpoints = read_events(log_file, "CHECKPOINT")
        self.assertEqual(len(everything), 3)
        self.assertEqual(len(checkpoints), 2)
        self.assertTrue(checkpoints[1].endswith("step: 2"))

    def test_kind_must_match_exactly(self):
        """Verify a kind is not matched by field text or prefixes."""
        with tempfile.TemporaryDirectory() as tmp:
            log_file = Path(tmp) / "events.log"
            log_event("EVAL", {"note": "EVAL"}, log_file)
            log_event("EVAL_EXTRA", None, log_file)
            self.assertEqual(len(read_events(log_file, "EVAL")), 1)

    def test_missing_log(self):
        """Verify a missing log reads as no events."""
        self.assertEqual(read_events(Path("/nonexistent/events.log")), [])


if __name__ == "__main__":
    unittest.main()
