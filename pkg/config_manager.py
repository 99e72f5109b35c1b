import yaml
import os
import logging
import copy
import shutil
from typing import Any, Dict, Optional
from datetime import datetime

from models import ChannelParams, SimulationOptions, validate_params

logger = logging.getLogger(__name__)

DEFAULT_CONFIG: Dict[str, Any] = {
    'channel': ChannelParams().to_dict(),
    'simulation': {
        'detection_model': 'per_photon',
        'delocalization': 'uniform',
        'force_single_photon': False,
        'chunk_size': 200_000,
        'workers': 1,
    },
    'speckle': {
        'segments': 256,
        'modes': 289,
        'test_phases': 16,
        'sweeps': 3,
        'photon_pairs': 100_000,
    },
    'crossover': {
        'max_loss': 0.95,
        'loss_steps': 951,
        'max_dimension': 100,
        'threshold': 0.4,
    },
    'calibration': {
        'target_dimension': 16,
        'target_loss': 0.45,
        'dark_rate': 500.0,
        'mean_photon_number': 0.2,
        'tau_min': 1e-12,
        'tau_max': 1e-3,
        'calibrated_tau': None,
    },
}


class ConfigManager:
    """Manages configuration file operations with backup and validation"""

    def __init__(self, config_file: Optional[str] = None, backup_dir: Optional[str] = None):
        self.config_file = config_file or os.getenv('DBS_CONFIG', 'config.yaml')
        self.backup_dir = backup_dir or os.path.join(
            os.path.dirname(os.path.abspath(self.config_file)), "config_backups"
        )

    def _create_backup(self):
        """Create a backup of the current config file"""
        if os.path.exists(self.config_file):
            os.makedirs(self.backup_dir, exist_ok=True)
            timestamp = datetime.now().strftime("%Y%m%d_%H%M%S_%f")
            backup_file = os.path.join(self.backup_dir, f"config_{timestamp}.yaml")
            shutil.copy2(self.config_file, backup_file)
            logger.info(f"Config backup created: {backup_file}")

            # Keep only last 10 backups
            self._cleanup_old_backups()

    def _cleanup_old_backups(self, keep_count: int = 10):
        """Remove old backup files, keeping only the most recent ones"""
        backup_files = sorted([
            f for f in os.listdir(self.backup_dir)
            if f.startswith("config_") and f.endswith(".yaml")
        ])

        if len(backup_files) > keep_count:
            for old_file in backup_files[:-keep_count]:
                os.remove(os.path.join(self.backup_dir, old_file))
                logger.debug(f"Removed old backup: {old_file}")

    def load_config(self) -> dict:
        """Load configuration from YAML file"""
        try:
            with open(self.config_file, 'r') as f:
                return yaml.safe_load(f) or {}
        except Exception as e:
            logger.error(f"Error loading config: {e}")
            return {}

    def save_config(self, config: dict) -> bool:
        """Save configuration to YAML file with backup"""
        try:
            self._create_backup()
            with open(self.config_file, 'w') as f:
                yaml.dump(config, f, default_flow_style=False, sort_keys=False)
            logger.info("Configuration saved successfully")
            return True
        except Exception as e:
            logger.error(f"Error saving config: {e}")
            return False

    def get_section(self, name: str) -> Dict[str, Any]:
        """Section from the file merged over built-in defaults"""
        section = copy.deepcopy(DEFAULT_CONFIG.get(name, {}))
        section.update(self.load_config().get(name) or {})
        return section

    def get_channel_params(self, **overrides: Any) -> ChannelParams:
        """Validated channel parameters; None overrides are ignored"""
        data = self.get_section('channel')
        data.update({k: v for k, v in overrides.items() if v is not None})
        return validate_params(data)

    def get_simulation_options(self) -> SimulationOptions:
        return SimulationOptions.from_dict(self.get_section('simulation'))

    def get_calibrated_tau(self) -> Optional[float]:
        tau = self.get_section('calibration').get('calibrated_tau')
        return float(tau) if tau is not None else None

    def set_calibrated_tau(self, tau: float) -> tuple[bool, str]:
        """Freeze a calibrated gate time into the configuration"""
        try:
            config = self.load_config()
            calibration = config.get('calibration') or {}
            calibration['calibrated_tau'] = float(tau)
            config['calibration'] = calibration

            if self.save_config(config):
                return True, f"Saved calibrated tau: {tau:.6e} s"
            else:
                return False, "Failed to save configuration"

        except Exception as e:
            logger.error(f"Error saving calibrated tau: {e}")
            return False, f"Error: {str(e)}"
