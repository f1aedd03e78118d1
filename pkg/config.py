import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    SECRET_KEY = os.getenv('SECRET_KEY', 'dev-secret-key')
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')

    # Feedback service
    HOST = os.getenv('HOST', '0.0.0.0')
    PORT = int(os.getenv('PORT', '5000'))

    # Sampling
    DEFAULT_SEED = int(os.getenv('DEFAULT_SEED', '20240101'))
    DEFAULT_SAMPLES = int(os.getenv('DEFAULT_SAMPLES', '100000'))

    # Small-gain checks
    SMALL_GAIN_GRID_POINTS = int(os.getenv('SMALL_GAIN_GRID_POINTS', '400'))
    SMALL_GAIN_GRID_MIN = float(os.getenv('SMALL_GAIN_GRID_MIN', '1e-8'))
    SMALL_GAIN_GRID_MAX = float(os.getenv('SMALL_GAIN_GRID_MAX', '1e8'))
    MAX_CYCLE_K = int(os.getenv('MAX_CYCLE_K', '12'))
    INVERSION_RTOL = float(os.getenv('INVERSION_RTOL', '1e-12'))

    # Implication checks
    ANTECEDENT_SLACK = float(os.getenv('ANTECEDENT_SLACK', '1e-9'))

    # Integrator
    RTOL = float(os.getenv('RTOL', '1e-8'))
    ATOL = float(os.getenv('ATOL', '1e-10'))
    MAX_STEP = float(os.getenv('MAX_STEP', '0.05'))
    MONITOR_TOL = float(os.getenv('MONITOR_TOL', '1e-5'))
    DISTURBANCE_DWELL = float(os.getenv('DISTURBANCE_DWELL', '0.1'))

    # Output
    OUTPUT_DIR = os.getenv('OUTPUT_DIR', 'runs')

    @classmethod
    def as_dict(cls) -> dict:
        """Plain snapshot of every upper-case setting except secrets"""
        return {
            key: getattr(cls, key)
            for key in dir(cls)
            if key.isupper() and key != 'SECRET_KEY'
        }
