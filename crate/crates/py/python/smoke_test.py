"""Smoke test for the bmgf Python module.

Build first:
    cargo build -p bmgf-py --release --features extension-module
then run this script; it imports `bmgf` from the path if installed, otherwise
from the freshly built shared library in target/.
"""

import importlib.util
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[3]


def import_bmgf(workdir):
    try:
        import bmgf  # noqa: F401
        return sys.modules["bmgf"]
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libbmgf_py.so"
        if lib.exists():
            dest = Path(workdir) / "bmgf.so"
            shutil.copy(lib, dest)
            spec = importlib.util.spec_from_file_location("bmgf", dest)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit("libbmgf_py.so not found; build the bmgf-py crate first")


TINY = """
d_model = 16
encoder_layers = 1
encoder_heads = 2
ff_dim = 32
max_len = 16
perspectives = 2
fusion_heads = 2
conv_filters = 8
classifier_hidden = 16
batch_size = 8
epochs = 3
"""


def main():
    with tempfile.TemporaryDirectory() as tmp:
        bmgf = import_bmgf(tmp)

        errors, passed = bmgf.gradcheck(seed=0)
        assert passed, errors
        assert set(errors) == {"encoder", "matching", "fusion", "aggregation", "prediction", "full"}
        print("gradcheck ok, max error %.2e" % max(errors.values()))

        data = Path(tmp) / "synthetic.tsv"
        data.write_text(bmgf.synthetic_tsv(1, train=40, validation=12, test=12))
        clf = bmgf.Classifier.train(str(data), config=TINY, seed=3)
        assert clf.labels == ["Comparison", "Contingency", "Expansion", "Temporal"], clf.labels

        label, probs = clf.predict("w1 w2 w3", "because w4 w5")
        assert label in clf.labels
        assert len(probs) == 4 and abs(sum(probs) - 1.0) < 1e-9
        assert all(0.0 <= p <= 1.0 for p in probs)
        assert clf.predict("w1 w2 w3", "because w4 w5") == (label, probs)

        report = clf.evaluate(str(data), split="test")
        assert report["n"] == 12
        mean_f1 = sum(c["f1"] for c in report["per_class"]) / len(report["per_class"])
        assert math.isclose(report["macro_f1"], mean_f1, abs_tol=1e-12)

        ck = Path(tmp) / "ck.json"
        clf.save(str(ck))
        again = bmgf.Classifier.load(str(ck))
        assert again.predict("w1 w2 w3", "because w4 w5") == (label, probs)

        try:
            clf.predict("", "x")
        except ValueError:
            pass
        else:
            raise AssertionError("empty argument accepted")

        print("predict %s %s" % (label, ["%.3f" % p for p in probs]))
        print("test accuracy %.3f, macro-F1 %.3f" % (report["accuracy"], report["macro_f1"]))
        print("smoke test passed")


if __name__ == "__main__":
    main()
