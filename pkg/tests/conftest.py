import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from config import FsmConfig, SynthConfig, TcnConfig, WindowConfig  # noqa: E402
from core_types import GaitPhase  # noqa: E402
from model_tcn import TcnModel, init_weights  # noqa: E402
from preprocess import NormStats, fit_normalizer, preprocess_session, window_array  # noqa: E402
from synth import generate_session, make_profile  # noqa: E402

ST, TO, SW, SK, AUX = (GaitPhase.STANCE, GaitPhase.TAKEOFF, GaitPhase.SWING,
                       GaitPhase.STRIKE, GaitPhase.AUXILIARY)


def ideal_step(stance=30, takeoff=10, swing=40, strike=8, tail=40):
    return [ST] * stance + [TO] * takeoff + [SW] * swing + [SK] * strike + [ST] * tail


@pytest.fixture
def tiny_arch():
    return TcnConfig(channels_per_block=4, dense_units=6, spatial_dropout=0.0)


@pytest.fixture
def small_synth():
    return SynthConfig(n_steps=3, laps=1, sessions_per_subject=1, aux_insert_probability=0.0,
                       turn_steps=2, noise=False)


@pytest.fixture
def clean_session(small_synth):
    return generate_session(make_profile(11, "TwoPoint"), small_synth, seed=1100)


@pytest.fixture
def noisy_session():
    cfg = SynthConfig(n_steps=4, laps=1, sessions_per_subject=1, turn_steps=1)
    return generate_session(make_profile(12, "SwingTo"), cfg, seed=1200)


@pytest.fixture
def random_model(tiny_arch, noisy_session):
    """Untrained model with normalization fitted on a real session."""
    vectors = preprocess_session(noisy_session)
    norm = fit_normalizer(window_array(vectors, 8, 2))
    return TcnModel(tiny_arch, init_weights(tiny_arch, 3), norm, WindowConfig())


@pytest.fixture
def identity_model(tiny_arch):
    return TcnModel(tiny_arch, init_weights(tiny_arch, 5), NormStats.identity())


@pytest.fixture
def fsm_k1():
    return FsmConfig(alpha=0.6, debounce_k=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
