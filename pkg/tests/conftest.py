import sys
from pathlib import Path

import hypothesis
import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

np.seterr(all="warn")

hypothesis.settings.register_profile(
    "default", max_examples=25, deadline=None, derandomize=True
)
hypothesis.settings.load_profile("default")
