import pytest
import os
import yaml

from config_manager import ConfigManager, DEFAULT_CONFIG
from models import DetectionModel, OutOfRange


@pytest.mark.unit
class TestConfigManager:
    def test_default_path_from_environment(self, monkeypatch, temp_dir):
        """Test that DBS_CONFIG selects the config file"""
        path = os.path.join(temp_dir, 'other.yaml')
        monkeypatch.setenv('DBS_CONFIG', path)
        manager = ConfigManager()
        assert manager.config_file == path
        assert manager.backup_dir == os.path.join(temp_dir, 'config_backups')

    def test_load_config_success(self, mock_config_file):
        """Test successful config loading"""
        manager = ConfigManager(config_file=mock_config_file)
        config = manager.load_config()

        assert config['channel']['dimension'] == 8
        assert config['simulation']['detection_model'] == 'per_pulse'

    def test_load_config_file_not_found(self, temp_dir):
        """Test config loading when file doesn't exist"""
        non_existent = os.path.join(temp_dir, 'missing.yaml')
        manager = ConfigManager(config_file=non_existent)
        config = manager.load_config()

        assert config == {}

    def test_save_config_creates_backup(self, mock_config_file, temp_dir):
        """Test that saving config creates a backup"""
        manager = ConfigManager(config_file=mock_config_file)
        manager.backup_dir = os.path.join(temp_dir, 'backups')

        config = manager.load_config()
        config['test'] = 'value'
        success = manager.save_config(config)

        assert success
        backup_files = os.listdir(manager.backup_dir)
        assert len(backup_files) == 1
        assert backup_files[0].startswith('config_')

    def test_get_section_merges_defaults(self, mock_config_file):
        """Test that missing keys fall back to built-in defaults"""
        manager = ConfigManager(config_file=mock_config_file)
        simulation = manager.get_section('simulation')

        assert simulation['chunk_size'] == 5000
        assert simulation['workers'] == DEFAULT_CONFIG['simulation']['workers']
        assert manager.get_section('speckle')['modes'] == 289

    def test_get_channel_params_with_overrides(self, mock_config_file):
        """Test channel parameters from file with CLI-style overrides"""
        manager = ConfigManager(config_file=mock_config_file)
        params = manager.get_channel_params(dimension=32, efficiency=None)

        assert params.dimension == 32
        assert params.efficiency == 0.6
        assert params.dark_rate == 400.0

    def test_get_channel_params_invalid_value(self, mock_config_file):
        """Test that an invalid override names the field"""
        manager = ConfigManager(config_file=mock_config_file)
        with pytest.raises(OutOfRange) as exc_info:
            manager.get_channel_params(efficiency=1.5)
        assert exc_info.value.field == 'efficiency'

    def test_get_simulation_options(self, mock_config_file):
        """Test simulation options parsing"""
        manager = ConfigManager(config_file=mock_config_file)
        options = manager.get_simulation_options()
        assert options.detection_model is DetectionModel.PER_PULSE

    def test_calibrated_tau_round_trip(self, mock_config_file, temp_dir):
        """Test persisting a calibrated gate time"""
        manager = ConfigManager(config_file=mock_config_file, backup_dir=os.path.join(temp_dir, 'b'))
        assert manager.get_calibrated_tau() is None

        success, message = manager.set_calibrated_tau(4.6e-7)

        assert success
        assert 'Saved calibrated tau' in message
        assert manager.get_calibrated_tau() == pytest.approx(4.6e-7)
        with open(mock_config_file) as f:
            saved = yaml.safe_load(f)
        assert saved['channel']['dimension'] == 8

    def test_set_calibrated_tau_save_failure(self, mock_config_file, mocker):
        """Test that a failed save is reported, not raised"""
        manager = ConfigManager(config_file=mock_config_file)
        mocker.patch.object(manager, 'save_config', return_value=False)

        success, message = manager.set_calibrated_tau(1e-6)

        assert not success
        assert 'Failed' in message

    def test_cleanup_old_backups(self, temp_dir):
        """Test that old backups are cleaned up"""
        manager = ConfigManager(config_file=os.path.join(temp_dir, 'config.yaml'))
        manager.backup_dir = temp_dir

        # Create 15 fake backup files
        for i in range(15):
            backup_file = os.path.join(temp_dir, f'config_2024010{i:02d}_120000.yaml')
            open(backup_file, 'w').close()

        manager._cleanup_old_backups(keep_count=10)

        remaining_files = [f for f in os.listdir(temp_dir) if f.startswith('config_')]
        assert len(remaining_files) == 10
