import sys
from pathlib import Path

import numpy as np

from fragmentvc.model import FragmentVC, ModelConfig

sys.path.insert(0, str(Path(__file__).parent))

MICRO = dict(d=8, H=2, T=4, S=6, M=5, D=6)


def micro_model(seed=0, **overrides):
    """float64 micro model plus inputs; the PostNet tail is randomised so its
    upstream layers receive gradient."""
    cfg = ModelConfig(d_model=MICRO["d"], n_heads=MICRO["H"], upstream_dim=MICRO["D"],
                      n_mel=MICRO["M"], n_extractors=3, n_smoothers=1, **overrides)
    model = FragmentVC(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    tail = model.params[f"postnet.conv{cfg.postnet_layers}.w"]
    tail.data = rng.uniform(-0.3, 0.3, tail.shape)
    for name, t in model.params.items():
        if name.endswith((".b", ".bq", ".bv", ".bo", ".bias")):
            t.data = rng.uniform(-0.1, 0.1, t.shape)
    src = rng.standard_normal((MICRO["T"], MICRO["D"]))
    tgts = [rng.standard_normal((2, MICRO["M"])), rng.standard_normal((4, MICRO["M"]))]
    return model, src, tgts


def random_corpus(n_speakers=2, n_utts=4, D=MICRO["D"], M=MICRO["M"], seed=0, frames=(5, 9)):
    """Corpus of random, already-normalised utterances."""
    from fragmentvc.training import Corpus, Utterance

    rng = np.random.default_rng(seed)
    speakers = {}
    for s in range(n_speakers):
        utts = []
        for u in range(n_utts):
            T = int(rng.integers(frames[0], frames[1] + 1))
            utts.append(Utterance(f"s{s}u{u}", rng.standard_normal((T, D)).astype(np.float32),
                                  rng.standard_normal((T, M)).astype(np.float32)))
        speakers[f"s{s}"] = utts
    return Corpus(speakers, np.zeros(M, np.float32), np.ones(M, np.float32))


def small_model(seed=0, **overrides):
    kw = dict(d_model=8, n_heads=2, upstream_dim=MICRO["D"], n_mel=MICRO["M"], n_smoothers=1)
    return FragmentVC(ModelConfig(**{**kw, **overrides}), seed=seed)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
