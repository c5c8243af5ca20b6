"""Smoke test for the stunet_py extension.

Build first:
    cargo build --release -p stunet-py --features extension-module
then run `python3 python/smoke_test.py` from the repository root.
"""

import importlib.machinery
import importlib.util
import math
import os
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_extension():
    try:
        import stunet_py

        return stunet_py
    except ImportError:
        pass
    lib = os.path.join(ROOT, "target", "release", "libstunet_py.so")
    if not os.path.exists(lib):
        sys.exit(f"extension not built: {lib} missing")
    loader = importlib.machinery.ExtensionFileLoader("stunet_py", lib)
    spec = importlib.util.spec_from_loader("stunet_py", loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    return module


def main():
    st = load_extension()

    assert "stu-net-b" in st.presets()
    b = st.describe("stu-net-b")
    assert abs(b["params_m"] - 58.26) <= 0.05, b
    small = st.describe("stu-net-b", (32, 32, 32))
    assert b["flops"] == 64 * small["flops"]

    assert st.describe(st.scale("stu-net-b", 2.0, 2.0))["params"] == st.describe("stu-net-l")["params"]

    cells = st.reproduce("table2")
    assert len(cells) == 8 and all(c[4] for c in cells), cells

    tensors = [("a.weight", [2, 3], [0.5, -1.0, 2.0, 0.0, -0.0, 2.0**-126]), ("b.bias", [], [3.25])]
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "w.stuw")
        st.save_weights(path, tensors)
        back = st.load_weights(path)
    assert [(n, list(s), v) for n, s, v in back] == tensors
    assert math.copysign(1.0, back[0][2][4]) == -1.0

    scores = st.dsc([0, 1, 1, 2], [0, 1, 2, 2], (1, 1, 4), [1, 2])
    assert abs(scores[1] - 2 / 3) < 1e-12 and abs(scores[2] - 2 / 3) < 1e-12

    try:
        st.load_weights("/nonexistent/w.stuw")
    except OSError:
        pass
    else:
        raise AssertionError("missing file did not raise")

    print("smoke test passed")


if __name__ == "__main__":
    main()
