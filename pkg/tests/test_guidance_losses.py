import numpy as np
import pytest

from utils import grid as G
from utils.attention import AttentionEngine
from utils.config import EngineConfig, LossWeights
from utils.errors import InputError
from utils.grad_check import check_gradients
from utils.grid import Grid2D, Tape
from utils.guidance_losses import (
    aggregation_loss,
    boundary_loss,
    build_concept_maps,
    dynamic_threshold,
    foreground_mask,
    loss_report,
    mbr,
    normalize_map,
    pair_overlaps,
    rasterize_box,
    region_loss,
    separation_loss,
    soft_iou,
    straight_through_box,
)


def test_rasterize_box_uses_cell_centers():
    assert rasterize_box((0, 0, 512, 512)).data.sum() == 64 * 64
    quadrant = rasterize_box((0, 0, 256, 256)).data
    assert quadrant[:32, :32].all() and quadrant.sum() == 32 * 32
    # centers sit at 4, 12, 20, ... so a box ending at 12 covers one column
    assert rasterize_box((0, 0, 12, 512)).data.sum() == 64


def test_normalize_map_spans_zero_to_one():
    m = Grid2D(np.random.default_rng(0).normal(size=(8, 8)))
    norm = normalize_map(m).data
    assert norm.min() == 0.0 and norm.max() == 1.0
    assert np.all(normalize_map(Grid2D.full(4, 4, 2.5)).data == 0.0)


def test_dynamic_threshold_mixes_inside_and_outside_means():
    norm = np.zeros((4, 4))
    norm[:2, :2] = [[1.0, 0.8], [0.6, 0.6]]
    norm[2:, 2:] = 0.4
    box = np.zeros((4, 4))
    box[:2, :2] = 1.0
    inside, outside = 3.0 / 4, 1.6 / 12
    tau = dynamic_threshold(Grid2D(norm), Grid2D(box), lam=0.6)
    assert tau == pytest.approx(0.6 * inside + 0.4 * outside)


def test_dynamic_threshold_needs_cells_on_both_sides():
    with pytest.raises(InputError):
        dynamic_threshold(Grid2D.ones(4, 4), Grid2D.ones(4, 4), lam=0.6)
    with pytest.raises(InputError):
        dynamic_threshold(Grid2D.ones(4, 4), Grid2D.zeros(4, 4), lam=0.6)


def test_foreground_mask_is_inclusive():
    mask = foreground_mask(Grid2D([[0.2, 0.5, 0.9]]), 0.5).data
    np.testing.assert_array_equal(mask, [[0.0, 1.0, 1.0]])


def test_mbr_matches_brute_force_on_random_masks():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        shape = tuple(rng.integers(1, 24, size=2))
        density = rng.choice([0.0, 0.01, 0.05, 0.3])
        mask = (rng.random(shape) < density).astype(float)
        expected = np.zeros(shape)
        ys, xs = np.nonzero(mask)
        if ys.size:
            expected[ys.min():ys.max() + 1, xs.min():xs.max() + 1] = 1.0
        np.testing.assert_array_equal(mbr(Grid2D(mask)).data, expected, err_msg=f"trial {trial}")


def test_soft_iou_cases(indicator):
    box = indicator(8, (2, 6), (2, 6))
    assert soft_iou(box, box) == 1.0
    assert soft_iou(indicator(8, (0, 2), (0, 2)), box) == 0.0
    assert soft_iou(Grid2D.zeros(8, 8), Grid2D.zeros(8, 8)) == 0.0
    half = indicator(8, (2, 6), (2, 4))
    assert soft_iou(half, box) == pytest.approx(0.5)


def test_straight_through_box_value_and_gradient():
    tape = Tape()
    norm = tape.leaf(np.random.default_rng(1).random((5, 5)))
    rect = Grid2D(np.pad(np.ones((2, 3)), ((1, 2), (1, 1))))
    out = straight_through_box(rect, norm)
    np.testing.assert_array_equal(out.data, rect.data)
    grads = tape.backward(G.reduce_sum(out))
    np.testing.assert_array_equal(grads[norm.node].data, np.ones((5, 5)))


def _concepts(raw_maps, boxes, weights):
    return [build_concept_maps(raw, box, weights) for raw, box in zip(raw_maps, boxes)]


def test_separation_is_zero_for_disjoint_masks(indicator, weights):
    boxes = [indicator(64, (4, 24), (4, 24)), indicator(64, (36, 60), (36, 60))]
    concepts = _concepts(boxes, boxes, weights)
    assert separation_loss(concepts).item() == 0.0
    assert pair_overlaps(concepts) == {(0, 1): 0.0, (1, 0): 0.0}


def test_separation_is_one_for_identical_maps(indicator, weights):
    ys, xs = np.mgrid[0:64, 0:64]
    bump = Grid2D(np.exp(-((ys - 30.0) ** 2 + (xs - 26.0) ** 2) / 80.0))
    box = indicator(64, (20, 40), (16, 36))
    concepts = _concepts([bump, bump], [box, box], weights)
    assert abs(separation_loss(concepts).item() - 1.0) <= 1e-9


def test_aggregation_is_zero_for_perfect_placement(indicator, weights):
    boxes = [indicator(64, (8, 30), (10, 40)), indicator(64, (34, 60), (20, 50))]
    concepts = _concepts(boxes, boxes, weights)
    assert all(c.soft_iou == 1.0 for c in concepts)
    assert abs(aggregation_loss(concepts, weights).item()) <= 1e-9


def test_misplaced_attention_is_penalised(indicator, weights):
    box = indicator(64, (8, 30), (10, 40))
    elsewhere = indicator(64, (40, 60), (40, 60))
    concepts = _concepts([elsewhere], [box], weights)
    assert concepts[0].soft_iou == 0.0
    assert aggregation_loss(concepts, weights).item() > 1.0


def test_separation_of_one_concept_is_zero(indicator, weights):
    box = indicator(64, (8, 30), (10, 40))
    assert separation_loss(_concepts([box], [box], weights)).item() == 0.0
    with pytest.raises(InputError):
        aggregation_loss([], weights)


def test_frozen_state_reproduces_the_forward_value(engine, overlap_layout, weights):
    e = engine.encode_prompt(overlap_layout.prompt)
    raw_maps = engine.concept_maps(engine.init_latent(), e, overlap_layout)
    boxes = [rasterize_box(b) for b in overlap_layout.boxes]
    live = _concepts(raw_maps, boxes, weights)
    frozen = [build_concept_maps(raw, box, weights, c.detached_state())
              for raw, box, c in zip(raw_maps, boxes, live)]
    assert aggregation_loss(frozen, weights).item() == pytest.approx(aggregation_loss(live, weights).item(), abs=1e-12)
    assert separation_loss(frozen).item() == pytest.approx(separation_loss(live).item(), abs=1e-12)


def test_loss_report_keys(engine, overlap_layout, weights):
    e = engine.encode_prompt(overlap_layout.prompt)
    raw_maps = engine.concept_maps(engine.init_latent(), e, overlap_layout)
    report = loss_report(_concepts(raw_maps, [rasterize_box(b) for b in overlap_layout.boxes], weights), weights)
    assert set(report) == {"per_concept", "l_agg", "l_sep", "pair_overlaps"}
    assert set(report["per_concept"][0]) == {"tau", "iou", "region", "boundary"}
    assert set(report["pair_overlaps"]) == {"0->1", "1->0"}
    assert report["l_sep"] == pytest.approx(np.mean(list(report["pair_overlaps"].values())))


def test_loss_gradients_match_finite_differences_over_twenty_seeds():
    report = check_gradients(EngineConfig(), LossWeights(), seeds=20, probes=16)
    assert len(report.errors["l_agg"]) == 20
    assert report.max_error <= 1e-3, report.to_dict()


def test_normalize_map_hand_example():
    np.testing.assert_array_equal(normalize_map(Grid2D([[0.0, 2.0], [4.0, 8.0]])).data, [[0.0, 0.25], [0.5, 1.0]])


def test_dynamic_threshold_hand_example():
    corner = Grid2D([[1.0, 0.0], [0.0, 0.0]])
    assert dynamic_threshold(corner, corner, lam=0.5) == 0.5
    assert dynamic_threshold(corner, corner, lam=1.0) == 1.0


def _engine_concepts(engine_config, seed, layout, weights, scale=1.0):
    engine = AttentionEngine(engine_config, seed)
    raw_maps = engine.concept_maps(engine.init_latent(), engine.encode_prompt(layout.prompt), layout)
    boxes = [rasterize_box(b) for b in layout.boxes]
    return _concepts([G.scale(raw, scale) for raw in raw_maps], boxes, weights)


@pytest.mark.parametrize("seed", range(5))
def test_separation_ignores_concept_order(engine_config, overlap_layout, weights, seed):
    concepts = _engine_concepts(engine_config, seed, overlap_layout, weights)
    forward = separation_loss(concepts).item()
    assert separation_loss(concepts[::-1]).item() == pytest.approx(forward, abs=1e-12)
    three = concepts + [concepts[0]]
    assert separation_loss([three[i] for i in (2, 0, 1)]).item() == pytest.approx(separation_loss(three).item(),
                                                                                 abs=1e-12)


@pytest.mark.parametrize("factor", [0.125, 4.0, 1024.0])
def test_scaling_a_map_leaves_derived_quantities_unchanged(engine_config, overlap_layout, weights, factor):
    base = _engine_concepts(engine_config, 3, overlap_layout, weights)
    scaled = _engine_concepts(engine_config, 3, overlap_layout, weights, scale=factor)
    for a, b in zip(base, scaled):
        np.testing.assert_array_equal(a.norm.data, b.norm.data)
        assert a.tau == b.tau
        np.testing.assert_array_equal(a.mask.data, b.mask.data)
        np.testing.assert_array_equal(a.mbr.data, b.mbr.data)
        assert a.soft_iou == b.soft_iou


@pytest.mark.parametrize("seed", range(10))
def test_region_loss_is_bounded_by_the_iou_prefactor(engine_config, disjoint_layout, overlap_layout, seed):
    weights = LossWeights(lambda_s=0.7, lambda_a=1.3)
    for layout in (overlap_layout, disjoint_layout):
        for concept in _engine_concepts(engine_config, seed, layout, weights):
            value = region_loss(concept, weights).item()
            assert 0.0 <= value <= (1.0 - concept.soft_iou) * (weights.lambda_s + weights.lambda_a) + 1e-12


def test_aggregation_is_the_sum_of_per_concept_losses(engine_config, overlap_layout, weights):
    concepts = _engine_concepts(engine_config, 1, overlap_layout, weights)
    per_concept = [region_loss(c, weights).item() + boundary_loss(c).item() for c in concepts]
    assert aggregation_loss(concepts, weights).item() == pytest.approx(sum(per_concept), abs=1e-12)
    assert aggregation_loss(concepts[:1], weights).item() == pytest.approx(per_concept[0], abs=1e-12)


def test_uniform_map_region_term(indicator):
    # a flat map normalizes to zeros, so tau is 0 and the sharpened map is 0.5 everywhere
    box = indicator(64, (0, 16), (0, 64))
    rho = 0.25
    only_sharp = LossWeights(lambda_s=1.5, lambda_a=0.0)
    concept = build_concept_maps(Grid2D.full(64, 64, 0.3), box, only_sharp)
    np.testing.assert_array_equal(concept.sharp.data, 0.5)
    assert concept.soft_iou == rho
    assert region_loss(concept, only_sharp).item() == pytest.approx((1 - rho) * 1.5 * (1 - rho))
    both = LossWeights(lambda_s=1.5, lambda_a=0.5)
    concept = build_concept_maps(Grid2D.full(64, 64, 0.3), box, both)
    assert region_loss(concept, both).item() == pytest.approx((1 - rho) ** 2 * 2.0)


def test_region_loss_vanishes_when_iou_is_one(indicator, weights):
    box = indicator(64, (8, 30), (10, 40))
    # faint mass outside the box stays below the threshold, so the rectangle matches the box
    spread = Grid2D(box.data + 0.2 * indicator(64, (40, 60), (40, 60)).data)
    concept = build_concept_maps(spread, box, weights)
    assert concept.soft_iou == 1.0
    assert region_loss(concept, weights).item() == 0.0


def _step_map():
    step = np.zeros((64, 64))
    step[:, 32:] = 1.0
    return Grid2D(step)


def test_boundary_loss_of_a_step_edge(indicator, weights):
    step = _step_map()
    around_edge = build_concept_maps(step, indicator(64, (0, 64), (24, 40)), weights)
    assert boundary_loss(around_edge).item() == 0.0
    assert around_edge.soft_iou < 1.0

    away_from_edge = build_concept_maps(step, indicator(64, (0, 64), (40, 60)), weights)
    assert away_from_edge.soft_iou < 1.0
    assert boundary_loss(away_from_edge).item() == pytest.approx(1.0 - away_from_edge.soft_iou, abs=1e-12)


def test_boundary_loss_of_a_flat_map_is_zero(indicator, weights):
    concept = build_concept_maps(Grid2D.full(64, 64, 2.0), indicator(64, (8, 30), (10, 40)), weights)
    assert boundary_loss(concept).item() == 0.0
