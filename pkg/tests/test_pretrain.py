import math
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from assocdetr.autodiff.tensor import Tensor
from assocdetr.background import UNKNOWN_ID, attach_head
from assocdetr.pipeline import DetectionEncoder, PipelineConfig
from assocdetr.pretrain import (AdamW, DatasetError, NonFiniteLossError, Rect, RegionFormatError, RegionLabelMap,
                                TrainConfig, evaluate, evaluate_predictions, load_directory, parse_region_file,
                                patch_label, serialize_region_map, synth_corpus, train)
from assocdetr.pretrain.synth import LabeledPatch
from assocdetr.pretrain.train import stratified_split

FIXTURES = Path(__file__).parent / "fixtures"


# --- region files ----------------------------------------------------------------------

def test_parse_example():
    m = parse_region_file("0 0\n7 -1")
    assert (m.width, m.height) == (2, 2)
    assert m.labels.tolist() == [[0, 0], [7, -1]]


def test_ragged_rows_name_the_row():
    with pytest.raises(RegionFormatError, match="row 3"):
        parse_region_file("0 1 2\n3 4 5\n6 7\n")


@pytest.mark.parametrize("text", ["0 8\n", "-2 0\n", "0 x\n", "\n\n"])
def test_invalid_region_files(text):
    with pytest.raises(RegionFormatError):
        parse_region_file(text)


@pytest.mark.parametrize("path", sorted((FIXTURES / "regions").glob("*.regions.txt")), ids=lambda p: p.name)
def test_fixture_round_trip(path):
    text = path.read_text()
    m = parse_region_file(text)
    assert serialize_region_map(m) == text
    again = parse_region_file(serialize_region_map(m))
    assert np.array_equal(again.labels, m.labels) and (again.width, again.height) == (m.width, m.height)


label_grids = st.integers(1, 6).flatmap(
    lambda w: st.lists(st.lists(st.integers(-1, 7), min_size=w, max_size=w), min_size=1, max_size=6))


@given(label_grids)
def test_round_trip_property(rows):
    m = RegionLabelMap(len(rows[0]), len(rows), np.array(rows))
    back = parse_region_file(serialize_region_map(m))
    assert np.array_equal(back.labels, m.labels)


# --- patch labels ------------------------------------------------------------------------

def counting_oracle(labels, rect):
    counts = Counter()
    for y in range(rect.y0, rect.y1):
        for x in range(rect.x0, rect.x1):
            v = int(labels[y][x])
            counts[UNKNOWN_ID if v == -1 else v] += 1
    best = max(counts.values())
    return min(c for c, n in counts.items() if n == best)


def test_patch_label_examples():
    sky = RegionLabelMap(2, 2, np.zeros((2, 2), dtype=int))
    assert patch_label(sky, Rect(0, 0, 2, 2)).name == "sky"
    mostly = RegionLabelMap(2, 2, np.array([[0, 0], [0, 2]]))
    assert patch_label(mostly, Rect(0, 0, 2, 2)).name == "sky"
    tie = RegionLabelMap(2, 2, np.array([[2, 0], [2, 0]]))
    assert patch_label(tie, Rect(0, 0, 2, 2)).name == "sky"
    unknown = RegionLabelMap(2, 1, np.array([[-1, -1]]))
    assert patch_label(unknown, Rect(0, 0, 1, 2)).name == "unknown"


def test_patch_label_counting_oracle_1000_rects():
    rng = np.random.default_rng(0)
    # few classes per map so ties are common
    labels = rng.choice([-1, 0, 2, 5], size=(20, 30))
    m = RegionLabelMap(30, 20, labels)
    for _ in range(1000):
        y0, y1 = sorted(rng.choice(21, 2, replace=False))
        x0, x1 = sorted(rng.choice(31, 2, replace=False))
        rect = Rect(int(y0), int(x0), int(y1), int(x1))
        assert patch_label(m, rect).id == counting_oracle(labels, rect)


def test_patch_label_errors():
    m = RegionLabelMap(2, 2, np.zeros((2, 2), dtype=int))
    with pytest.raises(ValueError):
        patch_label(m, Rect(1, 1, 1, 2))
    with pytest.raises(ValueError):
        patch_label(m, Rect(0, 0, 3, 2))


@given(st.lists(st.integers(-1, 7), min_size=1, max_size=24), st.randoms(use_true_random=False))
def test_patch_label_permutation_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    a = RegionLabelMap(len(values), 1, np.array([values]))
    b = RegionLabelMap(len(values), 1, np.array([shuffled]))
    r = Rect(0, 0, 1, len(values))
    assert patch_label(a, r) == patch_label(b, r)


# --- dataset directory --------------------------------------------------------------------

def test_load_fixture_directory():
    patches = load_directory(FIXTURES / "dataset", patch=32)
    # the middle bottom tile is half road, half unknown: the tie goes to road (smaller id)
    assert [p.label.name for p in patches] == ["sky", "sky", "sky", "road", "road", "unknown"]
    assert all(p.pixels.shape == (3, 32, 32) for p in patches)
    flipped = load_directory(FIXTURES / "dataset", patch=32, flip=True)
    assert len(flipped) == 12
    assert np.array_equal(flipped[1].pixels, flipped[0].pixels[:, :, ::-1])


def test_missing_dataset(tmp_path):
    with pytest.raises(DatasetError):
        load_directory(tmp_path / "nope")
    (tmp_path / "images").mkdir()
    (tmp_path / "labels").mkdir()
    with pytest.raises(DatasetError):
        load_directory(tmp_path)


# --- synthetic corpus ----------------------------------------------------------------------

def test_synth_counts_and_determinism():
    a = synth_corpus(3, 10, patch=32)
    assert len(a) == 90
    assert Counter(p.label.id for p in a) == {c: 10 for c in range(9)}
    b = synth_corpus(3, 10, patch=32)
    assert all(np.array_equal(x.pixels, y.pixels) and x.label == y.label for x, y in zip(a, b))
    assert all(0.0 <= p.pixels.min() and p.pixels.max() <= 1.0 for p in a)


def test_patch_divisibility():
    with pytest.raises(ValueError):
        LabeledPatch(np.zeros((3, 12, 12)), None)
    with pytest.raises(ValueError):
        synth_corpus(0, 0)


# --- optimizer ------------------------------------------------------------------------------

class P:
    def __init__(self, v):
        self.data = np.array([v], dtype=float)
        self.grad = None


def test_adamw_hand_computed_steps():
    lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.01
    p = P(1.0)
    opt = AdamW([p], lr, (b1, b2), eps, wd)
    theta, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate([0.5, -0.3, 2.0], start=1):
        p.grad = np.array([g])
        opt.step()
        theta = theta * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(p.data[0] - theta) < 1e-12


def test_adamw_skips_parameters_without_grad():
    a, b = P(1.0), P(2.0)
    opt = AdamW([a, b], 0.1, weight_decay=0.5)
    a.grad = np.array([1.0])
    opt.step()
    assert b.data[0] == 2.0 and a.data[0] != 1.0
    opt.zero_grad()
    assert a.grad is None


def test_adamw_rejects_bad_hyperparameters():
    with pytest.raises(ValueError):
        AdamW([], lr=-1)


# --- metrics -----------------------------------------------------------------------------------

def test_evaluate_predictions_examples():
    true = np.repeat(np.arange(9), 5)
    perfect = evaluate_predictions(true, true)
    assert perfect.accuracy == 1.0 and np.array_equal(perfect.confusion, np.diag(np.full(9, 5)))
    const = evaluate_predictions(true, np.zeros_like(true))
    assert const.accuracy == pytest.approx(1 / 9)
    rng = np.random.default_rng(0)
    rand = evaluate_predictions(true, rng.integers(0, 9, true.size))
    assert rand.confusion.sum(axis=1).tolist() == [5] * 9


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate_predictions([], [])


def test_stratified_split_disjoint_and_balanced():
    labels = np.repeat(np.arange(9), 10)
    tr, va = stratified_split(labels, 0.2, 0)
    assert set(tr).isdisjoint(va) and len(tr) + len(va) == 90
    assert Counter(labels[va]) == {c: 2 for c in range(9)}


def test_cosine_schedule_endpoints():
    cfg = TrainConfig(learning_rate=1.0)
    assert cfg.lr_at(0, 11) == 1.0
    assert cfg.lr_at(5, 11) == pytest.approx(0.5)
    assert cfg.lr_at(10, 11) == pytest.approx(0.0, abs=1e-15)
    assert TrainConfig(learning_rate=0.3, schedule="constant").lr_at(7, 11) == 0.3


@pytest.mark.parametrize("kw", [dict(learning_rate=-1), dict(epochs=0), dict(val_fraction=1.0),
                                dict(schedule="step")])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# --- training loop ------------------------------------------------------------------------------

def classifier(seed=0):
    det = DetectionEncoder(PipelineConfig(embed_dim=32, reduced_channels=4, heads=4, ffn_dim=64, seed=seed))
    return attach_head(det.bam, det.backbone, np.random.default_rng(seed + 7))


@pytest.fixture(scope="module")
def small_corpus():
    return synth_corpus(0, 6, patch=32)


def test_zero_lr_leaves_parameters_unchanged(small_corpus):
    clf = classifier()
    before = {n: p.data.copy() for n, p in clf.named_parameters()}
    train(clf, small_corpus, TrainConfig(learning_rate=0.0, epochs=2, batch_size=8))
    for n, p in clf.named_parameters():
        assert np.array_equal(p.data, before[n]), n


def test_initial_loss_near_ln9(small_corpus):
    res = train(classifier(), small_corpus, TrainConfig(learning_rate=1e-3, epochs=1, batch_size=8))
    assert abs(res.initial_loss - math.log(9)) < 0.1


def test_training_is_deterministic(small_corpus):
    a, b = classifier(), classifier()
    cfg = TrainConfig(learning_rate=3e-3, epochs=2, batch_size=8, seed=4)
    ra, rb = train(a, small_corpus, cfg), train(b, small_corpus, cfg)
    assert [m.line() for m in ra.metrics] == [m.line() for m in rb.metrics]
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and np.array_equal(pa, pb)


def test_stem_stays_frozen(small_corpus):
    clf = classifier()
    stem = {n: p.data.copy() for n, p in clf.named_parameters() if n.startswith("backbone.")}
    head = clf.head.weight.data.copy()
    train(clf, small_corpus, TrainConfig(learning_rate=1e-2, epochs=1, batch_size=8))
    for n, p in clf.named_parameters():
        if n in stem:
            assert np.array_equal(p.data, stem[n])
    assert not np.array_equal(clf.head.weight.data, head)


def test_metrics_log_lines(small_corpus):
    seen = []
    res = train(classifier(), small_corpus, TrainConfig(learning_rate=1e-3, epochs=2, batch_size=8), log=seen.append)
    assert [(m.epoch, m.split) for m in seen] == [(1, "train"), (1, "val"), (2, "train"), (2, "val")]
    epoch, split, loss, acc = seen[0].line().split(",")
    assert epoch == "1" and split == "train" and 0.0 <= float(acc) <= 1.0
    assert res.steps == 2 * math.ceil(43 / 8) - 0  # 54 samples, 11 held out


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_non_finite_loss_reports_step():
    corpus = synth_corpus(0, 4, patch=32)
    bad = LabeledPatch(np.full((3, 32, 32), np.nan), corpus[0].label)
    with pytest.raises(NonFiniteLossError) as info:
        train(classifier(), [bad] * 4 + corpus, TrainConfig(epochs=1, batch_size=4, seed=0))
    assert isinstance(info.value.step, int) and info.value.step >= 0
    assert f"step {info.value.step}" in str(info.value)


def test_evaluate_accounting(small_corpus):
    res = evaluate(classifier(), small_corpus)
    assert res.confusion.sum(axis=1).tolist() == [6] * 9
    assert 0.0 <= res.accuracy <= 1.0 and np.isfinite(res.loss)
