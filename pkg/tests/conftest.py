import numpy as np
import pytest
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mergeproof.data import gen_dataset
from mergeproof.params import ParamSet
from mergeproof.toymodels import ModelSpec

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False, width=64)
layer_names = st.text("abcdefghij._0123456789", min_size=1, max_size=12)
shapes = hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4)


@st.composite
def param_sets(draw, max_layers=5):
    names = draw(st.lists(layer_names, max_size=max_layers, unique=True))
    tensors = {n: draw(hnp.arrays(np.float64, draw(shapes), elements=finite)) for n in names}
    meta = draw(st.dictionaries(st.text(max_size=6), st.text(max_size=10), max_size=3))
    return ParamSet(tensors, meta)


@st.composite
def aligned_pairs(draw):
    """Two ParamSets with identical layout."""
    names = draw(st.lists(layer_names, min_size=1, max_size=4, unique=True))
    layout = {n: draw(shapes) for n in names}
    small = st.floats(-100, 100, allow_nan=False, width=64)

    def one():
        return ParamSet({n: draw(hnp.arrays(np.float64, s, elements=small)) for n, s in layout.items()})
    return one(), one()


@pytest.fixture
def tiny_spec():
    return ModelSpec(input_dim=3, hidden_dims=(4,), num_classes=3, activation="tanh")


@pytest.fixture
def blobs2():
    return gen_dataset("blobs", 2, 2, 200, seed=1)
