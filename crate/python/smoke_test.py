"""Quick end-to-end check of the Python extension.

    maturin develop -m crates/py/Cargo.toml --release
    python python/smoke_test.py
"""

import math

import spatialrl

SUBGRAPH = {
    "objects": [
        {"id": "cup.1", "label": "cup", "bbox": [50, 60, 150, 200]},
        {"id": "plate.1", "label": "plate", "bbox": [300, 80, 480, 190]},
    ],
    "relations": [["cup.1", "left of", "plate.1"]],
}
ANSWER = "(B) The cup is left of the plate"


def perfect_response():
    scene = spatialrl.canonical_scene(SUBGRAPH)
    return (
        "<observe>A cup and a plate.</observe>"
        f"<scene>{scene}</scene>"
        "<think>The cup is further left.</think>"
        f"<answer>{ANSWER}</answer>"
    )


def main():
    scorer = spatialrl.Scorer()
    best = scorer.score(perfect_response(), ANSWER, SUBGRAPH)
    assert abs(best["total"] - 1.0) < 1e-12, best

    no_format = spatialrl.total_reward(f"<answer>{ANSWER}</answer>", ANSWER, SUBGRAPH)
    assert no_format["total"] == 0.0

    batch = scorer.score_batch([perfect_response(), "junk"], [(ANSWER, SUBGRAPH)] * 2)
    assert [round(b["total"], 9) for b in batch] == [1.0, 0.0]

    hand = spatialrl.ciou([0, 0, 10, 10], [20, 0, 30, 10])
    assert abs(hand["ciou"] + 0.4) < 1e-9
    assert abs(spatialrl.iou([0, 0, 2, 2], [1, 1, 3, 3]) - 1 / 7) < 1e-12

    match = spatialrl.match_objects(SUBGRAPH, SUBGRAPH)
    assert match["pairs"] == [[0, 0], [1, 1]]

    adv = spatialrl.group_advantages([1.0, 0.0, 0.0, 0.0])
    assert abs(adv[0] - math.sqrt(3)) < 1e-3

    loss = spatialrl.grpo_loss([1.0, 0.0], [[-0.9], [-1.0]], [[-1.0], [-1.0]], [[-1.0], [-1.0]])
    assert len(loss["grad_logp_new"]) == 2

    sub = spatialrl.extract_subgraph(SUBGRAPH, "Where is the cup?")
    assert [o["label"] for o in sub["objects"]] == ["cup"]

    sample = {
        "image_id": "kitchen",
        "width": 640,
        "height": 480,
        "question": "Where is the cup relative to the plate?",
        "options": {"A": "right of", "B": "left of", "C": "above", "D": "below"},
        "answer_key": "B",
        "category": "relation",
        "rating": 7,
        "difficulty": "medium",
        "subgraph": SUBGRAPH,
    }
    prompt = spatialrl.build_prompt(sample)
    assert "(B) left of" in prompt and "640" in prompt

    summary = spatialrl.simulate(episodes=100, seed=42)
    assert summary["spam_beats_honest_spatial"] and summary["spam_below_focused_total"], summary

    assert spatialrl.gradcheck()["max_rel_error"] < 1e-4
    assert spatialrl.gradcheck(inject_fault=True)["max_rel_error"] > 1e-4

    try:
        spatialrl.parse_scene('{"objects": [{"id": "a", "label": "cup", "bbox": [5, 5, 5, 9]}], "relations": []}')
    except ValueError:
        pass
    else:
        raise AssertionError("degenerate box accepted")

    print("smoke test ok")


if __name__ == "__main__":
    main()
