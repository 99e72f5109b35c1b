import pytest
import os
import tempfile
import shutil
import yaml

# Add the project root to the Python path
import sys
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from models import ChannelParams, RandomSource


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test files"""
    temp_dir = tempfile.mkdtemp()
    yield temp_dir
    shutil.rmtree(temp_dir)


@pytest.fixture
def mock_config_file(temp_dir):
    """Create a mock config.yaml file"""
    config_path = os.path.join(temp_dir, 'config.yaml')
    config_data = {
        'channel': {
            'dimension': 8,
            'efficiency': 0.6,
            'dark_rate': 400.0,
            'gate_time': 1.0e-6,
            'mean_photon_number': 0.3,
            'basis_count': 2,
        },
        'simulation': {
            'detection_model': 'per_pulse',
            'chunk_size': 5000,
        },
        'calibration': {
            'calibrated_tau': None,
        },
    }

    with open(config_path, 'w') as f:
        yaml.dump(config_data, f)

    return config_path


@pytest.fixture
def experiment_params():
    """Experimental conditions of the multimode-fiber run"""
    return ChannelParams()


@pytest.fixture
def ideal_params():
    """Lossless, noiseless channel"""
    return ChannelParams(dimension=4, efficiency=1.0, dark_rate=0.0, gate_time=1e-6, mean_photon_number=1.0)


@pytest.fixture
def rng_factory():
    """Seeded random streams: rng_factory(seed, stream_id=0)"""
    def make(seed: int = 1234, stream_id: int = 0) -> RandomSource:
        return RandomSource(seed, stream_id)
    return make
