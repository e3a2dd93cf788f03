import hypothesis.strategies as st
from hypothesis import settings

from proxydet.geometry import Box, CenterBox

settings.register_profile("default", deadline=None)
settings.load_profile("default")

unit = st.floats(min_value=0.0, max_value=1.0, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw, min_size: float = 0.0):
    x1 = draw(st.floats(min_value=0.0, max_value=1.0 - min_size))
    y1 = draw(st.floats(min_value=0.0, max_value=1.0 - min_size))
    x2 = draw(st.floats(min_value=min(x1 + min_size, 1.0), max_value=1.0))
    y2 = draw(st.floats(min_value=min(y1 + min_size, 1.0), max_value=1.0))
    return Box(x1, y1, x2, y2)


@st.composite
def center_boxes(draw):
    return CenterBox(draw(unit), draw(unit), draw(unit), draw(unit))
