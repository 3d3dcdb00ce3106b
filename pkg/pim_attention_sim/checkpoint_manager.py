"""
Checkpoint handling for resumable batch runs.
"""

import json
import os
from typing import Any, Dict

from .config import AppConfig
from .logging_setup import get_logger

logger = get_logger(__name__)


class CheckpointManager:
    """Persists the reports of completed batches so a run can resume."""

    def __init__(self, checkpoint_file: str, config: AppConfig, run_key: str = ""):
        """
        Initialize the checkpoint manager.

        Args:
            checkpoint_file: Path to the checkpoint file
            config: Application configuration
            run_key: Identifies the run; a checkpoint written for another key is ignored
        """
        self.checkpoint_file = checkpoint_file
        self.config = config
        self.run_key = run_key

    def load_checkpoint(self) -> Dict[int, Dict[str, Any]]:
        """
        Load the completed batches of this run.

        Returns:
            Report bodies keyed by batch index
        """
        if not self.config.use_checkpoint:
            return {}

        if os.path.exists(self.checkpoint_file):
            try:
                with open(self.checkpoint_file, 'r') as f:
                    data = json.load(f)
                if data.get("run_key") != self.run_key:
                    logger.info(f"Ignoring checkpoint {self.checkpoint_file}: written for a different run")
                    return {}
                return {int(index): body for index, body in data.get("batches", {}).items()}
            except Exception as e:
                logger.error(f"Error loading checkpoint file: {str(e)}")

        return {}

    def save_checkpoint(self, completed: Dict[int, Dict[str, Any]]) -> bool:
        """
        Save the completed batches.

        Args:
            completed: Report bodies keyed by batch index

        Returns:
            True if successful, False otherwise
        """
        if not self.config.use_checkpoint:
            return False

        try:
            temp_file = f"{self.checkpoint_file}.tmp"
            with open(temp_file, 'w') as f:
                json.dump({"run_key": self.run_key,
                           "batches": {str(k): completed[k] for k in sorted(completed)}}, f)
            os.replace(temp_file, self.checkpoint_file)
            return True
        except Exception as e:
            logger.error(f"Error saving checkpoint file: {str(e)}")
            return False

    def clear_checkpoint(self) -> bool:
        """
        Clear checkpoint file.

        Returns:
            True if successful, False otherwise
        """
        if os.path.exists(self.checkpoint_file):
            try:
                os.remove(self.checkpoint_file)
                logger.info(f"Checkpoint file cleared: {self.checkpoint_file}")
                return True
            except Exception as e:
                logger.error(f"Error clearing checkpoint file: {str(e)}")
                return False
        return True
