"""Smoke test for the compiled extension: python python/smoke_test.py"""

import math

import decode_align as da


def main():
    lm = da.TabularLM(
        ["a", "b", "</s>"],
        "</s>",
        [([], [], [0.5, 0.45, 0.05]), ([], [0], [0.1, 0.1, 0.8]), ([], [1], [0.05, 0.05, 0.9])],
    )
    greedy = da.greedy(lm, max_len=2)
    beam = da.beam(lm, num_beams=2, max_len=2)
    assert lm.decode(greedy.best) == "a </s>", greedy
    assert lm.decode(beam.best) == "b </s>", beam
    assert math.isclose(math.exp(beam.logprob), 0.405)

    space = lm.enumerate(2)
    assert math.isclose(sum(math.exp(lp) for _, lp in space), 1.0)

    value = da.ValueModel.lookahead([([0, 2], 1.0), ([1, 2], 0.0)])
    guided = da.vgbs(lm, value, alpha=0.01, num_beams=2, candidates_per_beam=3, max_len=2)
    assert guided.best == [0, 2], guided
    tree = da.mcts(lm, value, simulations=10, max_len=2)
    assert tree.value_calls == 20, tree

    task = da.MisalignedTask(7, vocab_size=4, max_len=3, rho=-0.8)
    lp = [r[1] for r in task.table]
    u = [r[2] for r in task.table]
    assert abs(da.spearman(lp, u) + 0.8) <= 0.05
    r, p = da.pearson(lp, u)
    assert -1.0 <= r <= 1.0 and 0.0 <= p <= 1.0
    assert math.isclose(da.bleu4([0, 1, 2, 3], [0, 1, 2, 3, 4]), math.exp(1 - 5 / 4))

    try:
        da.beam(lm, num_beams=0)
    except da.DecodeAlignError:
        pass
    else:
        raise AssertionError("num_beams=0 accepted")

    print("smoke test passed:", beam, tree)


if __name__ == "__main__":
    main()
