"""Python face of the enhancement core.

The compiled module normally sits next to this package after an installed
build; during development the build tree is found through FEL_PYD_DIR.
"""

import os
import sys

try:
    from ._fel import (  # type: ignore[attr-defined]
        Enhancer,
        class_names,
        darken,
        gradcheck,
        param_count,
        render_shape,
    )
except ImportError:
    _pyd_dir = os.environ.get("FEL_PYD_DIR")
    if _pyd_dir and _pyd_dir not in sys.path:
        sys.path.insert(0, _pyd_dir)
    from _fel import (  # type: ignore[no-redef]
        Enhancer,
        class_names,
        darken,
        gradcheck,
        param_count,
        render_shape,
    )

__all__ = [
    "Enhancer",
    "class_names",
    "darken",
    "gradcheck",
    "param_count",
    "render_shape",
]
