import itertools

import numpy as np
import pytest

from adsmarket.creation import (COMPONENT_SIZES, AdFormat, InfeasibleCanvas, Material, Rect, Slot, Template,
                                best_fill, build_formats, check_design_rules, componentize, evaluate_templates,
                                generate_templates, select_format)

from oracles import exhaustive_best_area, packing_instances

# material kind -> unit kinds, written out independently of the module table
PAIRINGS = {
    "text-title": ["title"],
    "text-description": ["description"],
    "image": ["image"],
    "phone": ["call-button"],
    "app-package": ["download-button"],
    "sitelink": ["sitelink-row"],
    "product-link": ["sitelink-row", "image"],
}


def _materials(rng, n):
    kinds = list(PAIRINGS)
    out = [Material("text-title", "t"), Material("text-description", "d")]
    for i in range(n):
        k = kinds[int(rng.integers(len(kinds)))]
        out.append(Material(k, f"p{i}", 4, 3) if k == "image" else Material(k, f"p{i}"))
    return out


def _overlaps(slots):
    for a, b in itertools.combinations(slots, 2):
        ax, ay, aw, ah = a.rect.x, a.rect.y, a.rect.w, a.rect.h
        bx, by, bw, bh = b.rect.x, b.rect.y, b.rect.w, b.rect.h
        if ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah:
            return True
    return False


# -- components ------------------------------------------------------------------

def test_phone_becomes_call_button():
    comps, skipped = componentize([Material("phone", "555-0100")])
    assert [c.kind for c in comps] == ["call-button"] and not skipped


def test_text_only_materials_have_no_images():
    comps, _ = componentize([Material("text-title", "a"), Material("text-description", "b")])
    assert all(c.kind != "image" for c in comps)


def test_component_count_matches_pairing_table():
    rng = np.random.default_rng(0)
    for _ in range(50):
        mats = _materials(rng, int(rng.integers(0, 10)))
        comps, _ = componentize(mats)
        assert len(comps) == sum(len(PAIRINGS[m.kind]) for m in mats)
        assert all((c.w, c.h) == COMPONENT_SIZES[c.kind] for c in comps)


def test_material_validation():
    with pytest.raises(ValueError):
        Material("video", "x")
    with pytest.raises(ValueError):
        Material("image", "x")
    with pytest.raises(ValueError):
        Material("phone", "")


# -- packing and templates ----------------------------------------------------------

def test_exact_tiling():
    fill, placed = best_fill(100, 50, [(100, 20), (100, 30)])
    assert fill == 1.0 and all(r is not None for r in placed)
    comps, _ = componentize([Material("text-title", "t"), Material("text-description", "d")])
    templates = generate_templates((16, 5), comps)
    assert len(templates) == 1 and templates[0].fill_ratio == 1.0


def test_oversized_components_are_absent():
    comps, _ = componentize([Material("text-title", "t"), Material("text-description", "d"),
                             Material("sitelink", "s")])
    for t in generate_templates((16, 12), comps):
        assert "sitelink-row" not in t.kinds


def test_infeasible_canvas():
    comps, _ = componentize([Material("text-title", "t"), Material("text-description", "d")])
    with pytest.raises(InfeasibleCanvas):
        generate_templates((10, 10), comps)


def test_packing_close_to_exhaustive_optimum():
    worst = 1.0
    for W, H, sizes in packing_instances(seed=1, per_canvas=8):
        fill, placed = best_fill(W, H, sizes)
        optimum = exhaustive_best_area(W, H, sizes) / (W * H)
        worst = min(worst, fill / optimum)
        rects = [r for r in placed if r is not None]
        assert not any(a.intersects(b) for a, b in itertools.combinations(rects, 2))
    assert worst >= 0.9


def test_generated_templates_never_overlap_and_pass_rules():
    rng = np.random.default_rng(2)
    count = 0
    while count < 2000:
        comps, _ = componentize(_materials(rng, int(rng.integers(0, 6))))
        canvas = (int(rng.integers(16, 33)), int(rng.integers(5, 21)))
        for t in generate_templates(canvas, comps, max_templates=8):
            assert not _overlaps(t.slots)
            assert check_design_rules(t) == []
            count += 1


def test_design_rules_catch_violations():
    title = Slot(Rect(0, 5, 16, 2), "title")
    desc_above = Slot(Rect(0, 0, 16, 3), "description")
    assert "title-above-description" in check_design_rules(Template((20, 10), (title, desc_above)))
    assert "title-present" in check_design_rules(Template((20, 10), (desc_above,)))
    close = Slot(Rect(0, 7.5, 16, 2), "image")
    assert "min-margin" in check_design_rules(Template((20, 10), (title, close)))
    overlap = Slot(Rect(1, 5, 4, 1), "image")
    assert "overlap" in check_design_rules(Template((20, 10), (title, overlap)))
    outside = Slot(Rect(15, 0, 8, 2), "image")
    assert "outside-canvas" in check_design_rules(Template((20, 10), (title, outside)))


def test_formats_resolve_without_dangling_references():
    rng = np.random.default_rng(3)
    for _ in range(100):
        mats = _materials(rng, 5)
        comps, _ = componentize(mats)
        by_id = {c.id: c for c in comps}
        for fmt in build_formats("ad", generate_templates((32, 16), comps), comps):
            fmt.check()
            for i, c in fmt.assignment:
                assert by_id[c.id] is c
                assert c.material in mats
                assert fmt.template.slots[i].kind == c.kind


# -- evaluation and selection -----------------------------------------------------------

def _some_templates():
    comps, _ = componentize([Material("text-title", "t"), Material("text-description", "d"),
                             Material("image", "i", 4, 3), Material("phone", "p")])
    return generate_templates((32, 12), comps)


def test_evaluation_is_mean_of_predictions():
    templates = _some_templates()
    contexts = list(range(7))

    def predict(ctx, t):
        return 0.01 * ctx + 0.1 * t.fill_ratio

    scored = evaluate_templates(templates + templates[:1], predict, contexts)
    for t, s in scored:
        assert s == pytest.approx(np.mean([predict(c, t) for c in contexts]))
    dup = [s for t, s in scored if t.id == templates[0].id]
    assert dup[0] == dup[1]


def test_image_templates_rank_higher_under_image_bonus(small_world):
    gt = small_world.market.ground_truth
    ad = small_world.market.ads[0]
    queries = [small_world.market.make_query(i, seg, 0) for i in range(20) for seg in (0, 1, 2)]
    text_only, _ = componentize([Material("text-title", "t"), Material("text-description", "d")])
    templates = _some_templates() + generate_templates((32, 12), text_only)
    scored = evaluate_templates(templates, lambda q, t: gt.ctr(q, ad, t), queries)
    image = [s for t, s in scored if "image" in t.kinds]
    text = [s for t, s in scored if "image" not in t.kinds]
    assert image and text and np.mean(image) > np.mean(text)


def _formats(n):
    t = _some_templates()[0]
    return [AdFormat(f"f{i}", t, ()) for i in range(n)]


def test_select_single_and_arithmetic():
    one = _formats(1)
    assert select_format(one, 10, None, lambda c, f: (0.1, 0.1)) is one[0]
    a, b = _formats(2)
    preds = {"f0": (0.2, 0.1), "f1": (0.05, 0.2)}  # (ctr, cvr): scores 0.2 vs 0.1
    assert select_format([b, a], 10, None, lambda c, f: preds[f.id]) is a
    with pytest.raises(ValueError):
        select_format([], 10, None, lambda c, f: (0, 0))


def test_select_matches_full_scan_and_is_scale_invariant():
    rng = np.random.default_rng(4)
    for _ in range(200):
        fmts = _formats(int(rng.integers(1, 8)))
        preds = {f.id: (float(rng.choice([0.1, 0.2, 0.3])), float(rng.choice([0.1, 0.2]))) for f in fmts}
        pick = select_format(fmts, 10, None, lambda c, f: preds[f.id])
        want = min(fmts, key=lambda f: (-preds[f.id][0] * preds[f.id][1], f.id))
        assert pick is want
        for scale in (0.01, 3.0, 1e4):
            assert select_format(fmts, 10 * scale, None, lambda c, f: preds[f.id]) is want


def test_every_feasible_canvas_gets_a_template():
    comps, _ = componentize([Material("text-title", "t"), Material("text-description", "d"),
                             Material("phone", "p")])
    for W in range(16, 49, 4):
        for H in range(5, 21, 3):
            templates = generate_templates((W, H), comps)
            assert templates, (W, H)
            assert all(check_design_rules(t) == [] for t in templates)
