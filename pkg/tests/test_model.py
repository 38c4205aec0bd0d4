import math

import numpy as np
import pytest

from nvlm_micro import autodiff as ad
from nvlm_micro.config import Config, TrainConfig
from nvlm_micro.corpus import make_glyphs, make_ocr_corpus, render
from nvlm_micro.model import ARCHS, NVLMModel, TrainingExample
from nvlm_micro.sequence import IMAGE
from nvlm_micro.tiler import Image
from nvlm_micro.train import AdamW, LossCurve, overfit_harness, sgd_step, train_step


def random_image(rng, w=None, h=None):
    w = w or int(rng.integers(8, 120))
    h = h or int(rng.integers(8, 120))
    return Image(rng.random((h, w, 3)))


def test_training_example_needs_response():
    with pytest.raises(ValueError):
        TrainingExample("p", "")


def test_unknown_arch():
    with pytest.raises(ValueError):
        NVLMModel("Z")


def test_structure_per_arch(rng):
    image = random_image(rng, 96, 32)  # 3 tiles + thumbnail
    for arch in ARCHS:
        m = NVLMModel(arch, seed=1)
        prep = m.prepare(TrainingExample("p", "r", image))
        n_slots = len(prep.seq.image_positions())
        if arch == "D":
            assert not m.gate_names() and n_slots == 4 and not prep.xattn_blocks
        elif arch == "X":
            assert len(m.gate_names()) == 4 and n_slots == 0 and len(prep.xattn_blocks) == 4
        else:
            assert n_slots == 1 and len(prep.xattn_blocks) == 3


def test_shared_parameters_across_archs():
    d, x, h = (NVLMModel(a, seed=3) for a in ARCHS)
    common = set(d.params) & set(h.params)
    assert all(d.params[n].data.tobytes() == h.params[n].data.tobytes() for n in common)
    assert d.hash(d.backbone_names()) == x.hash(x.backbone_names())


@pytest.mark.parametrize("arch", ARCHS)
def test_text_only_matches_backbone(arch):
    m = NVLMModel(arch, seed=4)
    ex = TrainingExample("what is 2+2?", "4")
    logits, loss = m.forward(ex)
    ids = m.prepare(ex).seq.expanded_ids(m.tokenizer[IMAGE])
    assert logits.data.tobytes() == m.text_only_logits(ids).data.tobytes()
    ref = ad.cross_entropy(ad.slice_rows(m.text_only_logits(ids), 0, len(ids) - 1), ids[1:],
                           m.prepare(ex).seq.loss_mask[1:])
    assert float(loss.data) == float(ref.data)


def test_gate_zero_x_equals_text_only(rng):
    m = NVLMModel("X", seed=5)
    for _ in range(10):
        ex = TrainingExample("describe", "ok", random_image(rng))
        logits, _ = m.forward(ex)
        ids = m.prepare(ex).seq.expanded_ids(m.tokenizer[IMAGE])
        assert logits.data.tobytes() == m.text_only_logits(ids).data.tobytes()
    m.set_gates(0.2)
    assert not np.array_equal(m.forward(ex)[0].data, m.text_only_logits(ids).data)


def test_d_h_single_tile_equivalence(rng):
    d = NVLMModel("D", seed=6)
    h = NVLMModel("H", seed=6)
    h.set_gates(0.8)  # irrelevant: no regular tiles reach cross-attention
    for size in [(32, 32), (40, 37), (9, 8)]:
        ex = TrainingExample("q", "answer", random_image(rng, *size))
        assert d.prepare(ex).seq.items == h.prepare(ex).seq.items
        np.testing.assert_allclose(d.forward(ex)[0].data, h.forward(ex)[0].data, rtol=0, atol=1e-12)


def test_d_h_differ_with_many_tiles(rng):
    d, h = NVLMModel("D", seed=6), NVLMModel("H", seed=6)
    ex = TrainingExample("q", "answer", random_image(rng, 64, 32))
    assert d.prepare(ex).seq.decoder_len > h.prepare(ex).seq.decoder_len


@pytest.mark.parametrize("arch", ARCHS)
def test_forward_deterministic(arch, rng):
    ex = TrainingExample("q", "xyz", random_image(rng))
    a = NVLMModel(arch, seed=8).loss(ex)
    assert a == NVLMModel(arch, seed=8).loss(ex)


@pytest.mark.parametrize("arch", ARCHS)
def test_initial_loss_near_uniform(arch):
    m = NVLMModel(arch, seed=1234)
    corpus = make_ocr_corpus(8, seed=1234)
    curve = overfit_harness(m, corpus, TrainConfig(steps=0))
    ln_v = math.log(m.tokenizer.vocab_size)
    assert curve.steps == [] and abs(curve.final_loss - ln_v) < 0.2 * ln_v


def test_lr_zero_leaves_params(rng):
    m = NVLMModel("H", seed=2)
    before = m.hash()
    ex = TrainingExample("q", "ab", random_image(rng, 64, 32))
    loss = train_step(m, [ex], AdamW(lr=0.0))
    assert m.hash() == before and np.isfinite(loss) and loss > 0


@pytest.mark.parametrize("arch", ARCHS)
def test_stage_one_freezes_backbone(arch, rng):
    m = NVLMModel(arch, seed=2)
    ex = TrainingExample("q", "ab", random_image(rng, 64, 32))
    bb, al, vis = m.hash(m.backbone_names()), m.hash(m.alignment_names()), m.hash(m.vision_names())
    train_step(m, [ex], AdamW(lr=1e-2), stage=1)
    assert m.hash(m.backbone_names()) == bb
    assert m.hash(m.vision_names()) == vis
    assert m.hash(m.alignment_names()) != al
    train_step(m, [ex], AdamW(lr=1e-2), stage=2)
    assert m.hash(m.backbone_names()) != bb
    assert m.hash(m.vision_names()) == vis


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        train_step(NVLMModel("D", seed=0), [], AdamW())


@pytest.mark.parametrize("arch", ARCHS)
def test_small_step_descent_is_monotone(arch, rng):
    m = NVLMModel(arch, seed=9)
    m.set_gates(0.3)
    ex = TrainingExample("q", "hello", random_image(rng, 64, 32))
    losses = [sgd_step(m, [ex], lr=1e-3) for _ in range(11)]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_adamw_matches_hand_computation():
    from nvlm_micro.autodiff import Tensor

    p = {"w": Tensor(np.array([1.0, -2.0]), True)}
    p["w"].grad = np.array([0.5, 0.1])
    opt = AdamW(lr=0.1, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.01)
    opt.step(p, ["w"])
    # after one step m_hat = g and v_hat = g^2, so the update is sign(g) (up to eps)
    g = np.array([0.5, 0.1])
    expected = np.array([1.0, -2.0]) - 0.1 * (g / (np.abs(g) + 1e-8) + 0.01 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(p["w"].data, expected, rtol=1e-14)


def test_corpus_properties():
    corpus = make_ocr_corpus(32, seed=1)
    assert len({ex.response for ex in corpus}) == 32
    assert all(ex.image.width == 64 and ex.image.height == 16 for ex in corpus)
    glyphs = make_glyphs(seed=1)
    assert len({g.tobytes() for g in glyphs.values()}) == len(glyphs)
    np.testing.assert_array_equal(render("0", glyphs, 1).pixels[:, :, 0], glyphs["0"])
    with pytest.raises(ValueError):
        make_ocr_corpus(65)


def test_single_example_overfit():
    m = NVLMModel("X", seed=1234)
    ex = make_ocr_corpus(1, seed=1234)
    curve = overfit_harness(m, ex, TrainConfig(steps=500, batch_size=1), seed=1234)
    assert curve.final_loss < 0.05


def test_generate_after_overfit():
    m = NVLMModel("D", seed=1234)
    ex = make_ocr_corpus(1, seed=3)
    overfit_harness(m, ex, TrainConfig(steps=300, batch_size=1, target_loss=0.01), seed=3)
    assert m.generate(ex[0].image, ex[0].prompt, 4) == ex[0].response


def test_loss_curve_csv():
    c = LossCurve([1, 2], [2.5, 2.0], {0: 3.0, 2: 1.5})
    assert c.to_csv() == "step,batch_loss,corpus_loss\n0,,3.0000000000\n1,2.5000000000,\n2,2.0000000000,1.5000000000\n"
    assert c.final_loss == 1.5


def test_cosine_schedule():
    tc = TrainConfig(lr=1.0, min_lr=0.1, warmup_steps=2, schedule="cosine", steps=12)
    assert [tc.lr_at(s) for s in (0, 1)] == [0.5, 1.0]
    assert tc.lr_at(2) == pytest.approx(1.0)
    assert tc.lr_at(12) == pytest.approx(0.1)
