import numpy as np
import pytest

from ditdesk import imaging, synthdoc


@pytest.fixture(scope="session")
def doc_images_64():
    """16 small grayscale documents, one per template, resized to 64x64."""
    docs = [synthdoc.generate_document(np.random.default_rng(100 + t), t) for t in range(16)]
    return [imaging.resize(d.image, 64, 64) for d in docs]


@pytest.fixture(scope="session")
def table_doc():
    return synthdoc.generate_document(np.random.default_rng(3), 3, (448, 448))
