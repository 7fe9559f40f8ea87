"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict that is printed in the pytest
terminal summary; running this file directly prints the same lines.
"""

import json
import math
import time

import numpy as np
import pytest

from conftest import MICRO, micro_model
from fragmentvc import autograd as ag
from fragmentvc.analysis import combine_heads_rms, diagonality
from fragmentvc.audio import (
    AudioConfig,
    Waveform,
    griffin_lim,
    log_mel,
    pseudo_upstream,
    read_features,
    save_wav,
    write_features,
)
from fragmentvc.autograd import Tensor, finite_diff_check
from fragmentvc.checkpoint import load_checkpoint, save_checkpoint
from fragmentvc.cli import main as cli
from fragmentvc.model import FragmentVC, ModelConfig
from fragmentvc.synth import distinct_phones, make_speaker, random_phones, synthesize
from fragmentvc.training import (
    AdamWState,
    Corpus,
    Trainer,
    TrainConfig,
    Utterance,
    compute_norm_stats,
    inclusion_probability,
    load_corpus,
    lr_at,
    normalize_mel,
)

RESULTS: dict[int, str] = {}


def record(n: int, title: str, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    assert ok, RESULTS[n]


# ---------------------------------------------------------------- 1 gradients

def _op_cases(rng):
    """(name, scalar function, leaves) for every differentiable operation."""
    def leaf(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)

    def signed(*shape):
        x = rng.uniform(0.1, 2.0, shape) * rng.choice([-1.0, 1.0], shape)
        return Tensor(x, requires_grad=True, dtype=np.float64)

    cases = []
    x, W, b = leaf(5, 3), leaf(3, 4), leaf(4)
    R = rng.standard_normal((5, 4))
    cases.append(("linear", lambda: ag.weighted_sum(ag.linear(x, W, b), R), (x, W, b)))
    xc, k, bc = leaf(7, 3), leaf(5, 3, 2), leaf(2)
    Rc = rng.standard_normal((7, 2))
    cases.append(("conv1d", lambda: ag.weighted_sum(ag.conv1d(xc, k, bc), Rc), (xc, k, bc)))
    xs = signed(4, 3)
    Rs = rng.standard_normal((4, 3))
    cases.append(("relu", lambda: ag.weighted_sum(ag.relu(xs), Rs), (xs,)))
    cases.append(("tanh", lambda: ag.weighted_sum(ag.tanh(xs), Rs), (xs,)))
    xl, g, bl = leaf(4, 5), leaf(5), leaf(5)
    Rl = rng.standard_normal((4, 5))
    cases.append(("layer_norm", lambda: ag.weighted_sum(ag.layer_norm(xl, g, bl), Rl), (xl, g, bl)))
    xm = leaf(2, 3, 4)
    Rm = rng.standard_normal((2, 3, 4))
    cases.append(("softmax_rows", lambda: ag.weighted_sum(ag.softmax_rows(xm), Rm), (xm,)))
    q, kv = leaf(3, 4), leaf(5, 4)
    p = {n: leaf(4, 4) if n.startswith("w") else leaf(4) for n in ("wq", "bq", "wk", "wv", "bv", "wo", "bo")}
    Ra = rng.standard_normal((3, 4))
    cases.append(("multi_head_attention",
                  lambda: ag.weighted_sum(ag.multi_head_attention(q, kv, p, 2)[0], Ra), (q, kv, *p.values())))
    pred = leaf(3, 5)
    target = pred.data + rng.uniform(0.1, 1.0, (3, 5)) * rng.choice([-1.0, 1.0], (3, 5))
    cases.append(("l1_loss", lambda: ag.l1_loss(pred, target), (pred,)))
    a, c = leaf(2, 3), leaf(4, 3)
    Rr = rng.standard_normal((1, 3))
    cases.append(("concat_rows/mean_rows/scale/add",
                  lambda: ag.weighted_sum(ag.mean_rows(ag.add(ag.concat_rows([a, ag.scale(c, 0.5)]),
                                                              ag.concat_rows([c, a]))), Rr), (a, c)))
    t3 = leaf(2, 3, 4)
    R46 = rng.standard_normal((4, 6))
    cases.append(("reshape/transpose",
                  lambda: ag.weighted_sum(ag.reshape(ag.transpose(t3, (2, 0, 1)), (4, 6)), R46), (t3,)))
    m1, m2 = leaf(2, 3, 4), leaf(2, 4, 5)
    Rb = rng.standard_normal((2, 3, 5))
    cases.append(("matmul", lambda: ag.weighted_sum(ag.matmul(m1, m2), Rb), (m1, m2)))
    ts = leaf(3, 3)
    cases.append(("tensor_sum", lambda: ag.tensor_sum(ag.tanh(ts)), (ts,)))
    return cases


def test_criterion_1_gradient_oracle():
    start = time.perf_counter()
    worst, worst_name = 0.0, ""
    for seed in range(3):
        for name, f, leaves in _op_cases(np.random.default_rng(seed)):
            for t in leaves:
                err = finite_diff_check(f, t)
                if err > worst:
                    worst, worst_name = err, name
    model, src, tgts = micro_model(seed=5)
    gt = np.random.default_rng(6).standard_normal((MICRO["T"], MICRO["M"]))

    def full():
        out = model.forward(src, tgts)
        return ag.add(ag.l1_loss(out.mel_pre, gt), ag.l1_loss(out.mel_post, gt))

    model_worst, model_name = 0.0, ""
    for name, t in model.params.items():
        err = finite_diff_check(full, t)
        if err > model_worst:
            model_worst, model_name = err, name
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and model_worst < 1e-4 and elapsed < 120
    record(1, "gradient oracle", ok,
           f"max rel err ops {worst:.2e} ({worst_name}), full micro model {model_worst:.2e} "
           f"({model_name}, {len(model.params)} tensors), {elapsed:.0f}s")


# ---------------------------------------------------------------- 2 + 3 overfit

@pytest.fixture(scope="module")
def overfit_run():
    """Desk model trained 2000 stage-1 steps on one ~3 s synthetic utterance."""
    phones = distinct_phones(4)
    x = synthesize(phones, make_speaker(3), seed=1)
    mel = log_mel(Waveform(x))
    feats = pseudo_upstream(mel).frames
    mean, std = compute_norm_stats([mel.frames])
    utt = Utterance("overfit", feats, normalize_mel(mel.frames, mean, std))
    corpus = Corpus({"spk": [utt]}, mean, std)
    cfg = TrainConfig.desk(total_steps=4000, stage1_steps=2000, decay_end_step=2001, batch_size=1)
    model = FragmentVC(ModelConfig(), seed=0)

    def l1_now():
        return float(np.mean(np.abs(model.convert(utt.features, [utt.mel])[0] - utt.mel)))

    initial = l1_now()
    start = time.perf_counter()
    losses = Trainer(model, corpus, cfg).run(2000)
    elapsed = time.perf_counter() - start
    return dict(model=model, utt=utt, initial=initial, final=l1_now(), losses=losses,
                elapsed=elapsed, seconds=x.size / 16000)


def test_criterion_2_stage1_overfit(overfit_run):
    r = overfit_run
    ratio = r["final"] / r["initial"]
    ok = r["final"] < 0.08 and ratio < 0.10
    record(2, "stage-1 overfit", ok,
           f"{r['seconds']:.2f}s utterance, mean L1 {r['initial']:.4f} -> {r['final']:.4f} "
           f"({100 * ratio:.1f}% of step 0; train loss {r['losses'][0]:.3f} -> {r['losses'][-1]:.3f}), "
           f"{r['elapsed']:.0f}s")


def test_criterion_3_diagonal_attention(overfit_run):
    model, utt = overfit_run["model"], overfit_run["utt"]
    _, attention = model.convert(utt.features, [utt.mel])
    combined = combine_heads_rms(attention[2])
    score = diagonality(combined)
    shuffled = combined[np.random.default_rng(0).permutation(combined.shape[0])]
    control = diagonality(shuffled)
    ok = score < 0.10 and control > 0.25
    record(3, "diagonal attention emergence", ok,
           f"extractor-3 diagonality {score:.4f} (need < 0.10), row-shuffled control {control:.4f} "
           f"(need > 0.25); extractors 1-3: "
           + ", ".join(f"{diagonality(combine_heads_rms(a)):.3f}" for a in attention))


# ---------------------------------------------------------------- 4 schedules

def _expected_lr(step, group, total, warmup, stage1, peak, factor):
    if step < warmup:
        lr = peak * step / warmup
    else:
        lr = peak * 0.5 * (1 + math.cos(math.pi * (step - warmup) / (total - warmup)))
    if group != "other" and step > stage1:
        lr /= factor
    return lr


def test_criterion_4_schedule_exactness():
    worst = 0.0
    checked = 0
    for cfg in (TrainConfig(), TrainConfig.desk()):
        mid = (cfg.stage1_steps + cfg.decay_end_step) / 2
        steps = [0, cfg.warmup_steps, cfg.stage1_steps, int(mid), cfg.decay_end_step, cfg.total_steps,
                 cfg.stage1_steps + 1]
        for s in steps:
            if s <= cfg.stage1_steps:
                p = 1.0
            elif s >= cfg.decay_end_step:
                p = 0.0
            else:
                p = 1.0 - (s - cfg.stage1_steps) / (cfg.decay_end_step - cfg.stage1_steps)
            worst = max(worst, abs(inclusion_probability(s, cfg) - p))
            for g in ag.GROUPS:
                e = _expected_lr(s, g, cfg.total_steps, cfg.warmup_steps, cfg.stage1_steps,
                                 cfg.peak_lr, cfg.lr_reduction_factor)
                worst = max(worst, abs(lr_at(s, g, cfg) - e))
                checked += 1
    full = TrainConfig()
    anchors = [inclusion_probability(50_000, full) == 1.0,
               inclusion_probability(100_000, full) == 0.5,
               inclusion_probability(200_000, full) == 0.0,
               abs(lr_at(500, "other", full) - 1e-4) < 1e-12,
               abs(lr_at(250_000, "other", full)) < 1e-12,
               abs(lr_at(60_000, "extractors", full) * 100 - lr_at(60_000, "other", full)) < 1e-12]
    ok = worst < 1e-12 and all(anchors)
    record(4, "schedule exactness", ok,
           f"max |error| {worst:.1e} over {checked} (step, group) pairs; full-scale anchors "
           f"{sum(anchors)}/{len(anchors)} exact")


# ---------------------------------------------------------------- 5 residual cut

def test_criterion_5_residual_removal():
    T = 40
    a = log_mel(Waveform(synthesize(random_phones(8, 1), make_speaker(1), seed=1)))
    b = log_mel(Waveform(synthesize(random_phones(8, 2), make_speaker(2), seed=2)))
    src_a, src_b = pseudo_upstream(a).frames[:T], pseudo_upstream(b).frames[:T]
    target = (log_mel(Waveform(synthesize(random_phones(6, 3), make_speaker(5), seed=3))).frames + 10) / 5

    def delta(keep_residual):
        model = FragmentVC(ModelConfig(keep_extractor1_residual=keep_residual), seed=3)
        for name in ("wq", "bq", "wk", "wv", "bv", "wo", "bo"):
            model.params[f"extractor1.cross_attn.{name}"].data[...] = 0.0
        out_a, _ = model.convert(src_a, [target])
        out_b, _ = model.convert(src_b, [target])
        return float(np.max(np.abs(out_a - out_b)))

    cut, kept = delta(False), delta(True)
    ok = cut < 1e-5 and kept > 1e-3
    record(5, "residual removal", ok,
           f"zeroed cross-attention: max|delta| {cut:.2e} without residual, {kept:.2e} with residual")


# ---------------------------------------------------------------- 6 framing

def test_criterion_6_framing():
    rng = np.random.default_rng(2024)
    lengths = rng.integers(400, 48_000, size=100)
    cfg = AudioConfig(upstream_dim=16)
    bad = []
    for n in lengths:
        mel = log_mel(Waveform(rng.uniform(-0.5, 0.5, int(n))))
        T = 1 + (int(n) - 400) // 320
        if mel.n_frames != T or pseudo_upstream(mel, cfg).n_frames != T:
            bad.append(int(n))
    record(6, "framing invariant", not bad, f"{100 - len(bad)}/100 random lengths in [400, 48000) match")


# ---------------------------------------------------------------- 7 + 9 small corpus

SMALL_TRAIN = {"total_steps": 200, "stage1_steps": 80, "decay_end_step": 150, "warmup_steps": 20,
               "batch_size": 2, "n_target_utts": 3, "checkpoint_interval": 100, "max_frames": 64}


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    for spk in range(3):
        (root / "wavs" / f"spk{spk}").mkdir(parents=True)
        for utt in range(4):
            x = synthesize(random_phones(6, 100 * spk + utt), make_speaker(10 + spk), seed=utt)
            save_wav(root / "wavs" / f"spk{spk}" / f"utt{utt}.wav", Waveform(x))
    (root / "config.json").write_text(json.dumps({"train": SMALL_TRAIN}))
    assert cli(["extract", "--config", str(root / "config.json"), "--wav-dir", str(root / "wavs"),
                "--out-dir", str(root / "feats")]) == 0
    return root


def _train(root, out, *extra):
    return cli(["train", "--config", str(root / "config.json"), "--manifest",
                str(root / "feats" / "manifest.json"), "--out", str(root / out), *extra])


def test_criterion_7_determinism_and_resume(small_corpus):
    root = small_corpus
    codes = [_train(root, "run_a"), _train(root, "run_b"),
             _train(root, "run_c", "--resume", str(root / "run_a" / "ckpt_0000100.fvck"))]
    log_a = (root / "run_a" / "loss.tsv").read_bytes()
    log_b = (root / "run_b" / "loss.tsv").read_bytes()
    lines_a = log_a.decode().splitlines()
    lines_c = (root / "run_c" / "loss.tsv").read_text().splitlines()
    same_runs = log_a == log_b and len(lines_a) == 200
    same_resume = lines_c == lines_a[100:]
    same_ckpt = ((root / "run_a" / "ckpt_0000200.fvck").read_bytes()
                 == (root / "run_c" / "ckpt_0000200.fvck").read_bytes())
    ok = codes == [0, 0, 0] and same_runs and same_resume and same_ckpt
    record(7, "determinism and resume", ok,
           f"two 200-step logs identical: {same_runs}; resume at 100 reproduces steps 101-200: "
           f"{same_resume}; final checkpoints identical: {same_ckpt}")


ABLATIONS = {
    "baseline": ({}, {}),
    "flat_wiring": ({"flat_wiring": True}, {}),
    "no_cross_attention": ({"no_cross_attention": True}, {}),
    "keep_extractor1_residual": ({"keep_extractor1_residual": True}, {}),
    "no_lr_reduction": ({}, {"lr_reduction_factor": 1.0}),
}


def test_criterion_9_ablation_switches(small_corpus):
    corpus = load_corpus(small_corpus / "feats" / "manifest.json")
    finals = {}
    errors = []
    for name, (model_kw, train_kw) in ABLATIONS.items():
        try:
            cfg = TrainConfig.desk(**{**SMALL_TRAIN, **train_kw})
            model = FragmentVC(ModelConfig(**model_kw), seed=0)
            losses = Trainer(model, corpus, cfg).run(200)
            finals[name] = losses[-1]
            if len(losses) != 200 or not np.isfinite(losses).all():
                errors.append(name)
        except Exception as exc:  # report, do not mask
            errors.append(f"{name}: {exc}")
    values = list(finals.values())
    distinct = len(values) == len(ABLATIONS) and all(
        values[i] != values[j] for i in range(len(values)) for j in range(i + 1, len(values)))
    ok = not errors and distinct
    record(9, "ablation switches", ok,
           "step-200 loss " + ", ".join(f"{k} {v:.4f}" for k, v in finals.items())
           + (f"; errors: {errors}" if errors else ""))


# ---------------------------------------------------------------- 8 analysis

def test_criterion_8_analysis_formulas():
    rms = combine_heads_rms(np.array([[[0.3]], [[0.4]]]))[0, 0]
    values = {
        "rms": (rms, 0.353553),
        "uniform 3x3": (diagonality(np.full((3, 3), 1 / 3)), 4 / 9),
        "identity": (diagonality(np.eye(6)), 0.0),
        "anti-diagonal 2x2": (diagonality(np.array([[0.0, 1.0], [1.0, 0.0]])), 1.0),
    }
    worst = max(abs(got - want) for got, want in values.values())
    record(8, "analysis formulas", worst < 1e-6,
           ", ".join(f"{k} {got:.6f}" for k, (got, _) in values.items()) + f" (max error {worst:.1e})")


# ---------------------------------------------------------------- 10 round-trips

def test_criterion_10_round_trips(tmp_path):
    rng = np.random.default_rng(10)
    feats = rng.standard_normal((37, 768)).astype(np.float32)
    write_features(tmp_path / "f.fvcf", feats)
    fvcf_ok = np.array_equal(read_features(tmp_path / "f.fvcf").view(np.uint32), feats.view(np.uint32))

    model = FragmentVC(ModelConfig(d_model=16, upstream_dim=32), seed=1)
    state = AdamWState({n: rng.standard_normal(t.shape).astype(np.float32) for n, t in model.params.items()},
                       {n: rng.random(t.shape).astype(np.float32) for n, t in model.params.items()})
    stats = (rng.standard_normal(80).astype(np.float32), rng.random(80).astype(np.float32) + 0.5)
    save_checkpoint(tmp_path / "a.fvck", model.params, state, 4321, stats)
    ck = load_checkpoint(tmp_path / "a.fvck")
    fvck_ok = ck.step == 4321 and all(
        np.array_equal(ck.params[n].view(np.uint32), t.data.view(np.uint32))
        and np.array_equal(ck.adam_m[n], state.m[n]) and np.array_equal(ck.adam_v[n], state.v[n])
        for n, t in model.params.items()) and np.array_equal(ck.norm_mean, stats[0])
    clone = FragmentVC(ModelConfig(d_model=16, upstream_dim=32), seed=2)
    save_checkpoint(tmp_path / "b.fvck", clone.params, ck.restore(clone.params), 4321, stats)
    fvck_ok = fvck_ok and (tmp_path / "a.fvck").read_bytes() == (tmp_path / "b.fvck").read_bytes()

    mel = log_mel(Waveform(synthesize(random_phones(5, 7), make_speaker(7), seed=7)))
    wav = griffin_lim(mel, n_iters=8)
    want = (mel.n_frames - 1) * 320 + 400
    gl_ok = wav.samples.size == want
    record(10, "round-trips", fvcf_ok and fvck_ok and gl_ok,
           f"FVCF bit-exact {fvcf_ok}, FVCK bit-exact {fvck_ok}, Griffin-Lim {wav.samples.size} samples "
           f"for T={mel.n_frames} (expected {want})")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
