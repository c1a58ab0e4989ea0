import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tensorstash import synth
from tensorstash.config import EngineConfig
from tensorstash.store import Store
from tensorstash.tensor_format import DType, write_model

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=60)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def make_model(tensors: dict, metadata=None) -> bytes:
    """name -> (words, dtype, shape) into safetensors bytes."""
    views = [synth.view(name, words, dtype, shape) for name, (words, dtype, shape) in tensors.items()]
    return write_model(views, metadata)


def family(rng, *, layers=3, n=1 << 14, variants=3, noise=0.01, dtype=DType.BF16):
    """A base model and fine-tuned variants as safetensors bytes, in creation order."""
    rows = 64
    base = {f"layers.{i}.weight": synth.base_weights(n, rng, dtype) for i in range(layers)}
    out = [("base", make_model({k: (w, dtype, (rows, n // rows)) for k, w in base.items()}, {"format": "pt"}))]
    for v in range(variants):
        tuned = {k: synth.finetune(w, dtype, rng, noise) for k, w in base.items()}
        out.append((f"ft{v}", make_model({k: (w, dtype, (rows, n // rows)) for k, w in tuned.items()})))
    return out


@pytest.fixture
def store(tmp_path):
    st = Store.init(tmp_path / "store", EngineConfig(workers=1, chunk_elements=1 << 12))
    yield st
    st.close()


def lineage_instance(rng, size, *, n=4096, dtype=DType.BF16, coefficients=None):
    """Random planner instance: tensors descend from 1-3 roots by fine-tune noise.

    Returns (infos in creation order, pairwise predicted ratio matrix).
    """
    from tensorstash.fingerprint import normalized_distance, sketch, tensor_digest
    from tensorstash.planner import CompatKey, TensorInfo
    from tensorstash.predictor import DEFAULT_COEFFICIENTS, predict_ratio

    coefficients = coefficients or DEFAULT_COEFFICIENTS["TENSORX"]
    roots = int(rng.integers(1, 4))
    words = []
    root_ids = []
    for i in range(size):
        if len(root_ids) < roots and (i == 0 or rng.random() < 0.3):
            words.append(synth.base_weights(n, rng, dtype))
            root_ids.append(i)
        else:
            parent = words[root_ids[int(rng.integers(len(root_ids)))]]
            words.append(synth.finetune(parent, dtype, rng, float(10 ** rng.uniform(-3, -1))))
    compat = CompatKey.of(dtype, (n,))
    infos = []
    for w in words:
        v = synth.view("w", w, dtype)
        infos.append(TensorInfo(tensor_digest(w.tobytes()), "w", compat, w.nbytes, sketch(v)))
    ratios = np.array(
        [[1.0 if a is b else predict_ratio(normalized_distance(a.sketch, b.sketch), coefficients) for b in infos]
         for a in infos]
    )
    return infos, ratios


ACCEPTANCE = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    """Keep one result line per acceptance criterion and echo it to the captured output."""
    line = f"C{number} {title}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
