import numpy as np
import pytest

from fakevid.data import DatasetHeader


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_header():
    """Small widths so finite-difference checks stay fast."""
    return DatasetHeader(
        d_t=6, d_i=7, d_v=4, d_a=5, vocab_size=16,
        l_max=8, m_max=4, n_max=5, k_max=3, mask_token_id=15,
    )
