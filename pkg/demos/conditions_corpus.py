"""Structural conditions on approximating density families.

Each corpus family is checked condition by condition; the table shows the
first and last evaluated values and the verdict on the sequence.

Run: python3 demos/conditions_corpus.py
"""

from pcaf_lab import conditions as cnd


if __name__ == "__main__":
    for name in cnd.CORPUS:
        family = cnd.corpus_example(name)
        report = cnd.verify_membership(family)
        print(f"{name}: {report.verdict} (Ab via {report.ab_branch}, Ac via {report.ac_branch})")
        for which, rep in report.reports.items():
            first, last = rep.values[0], rep.values[-1]
            print(f"  {which:<4} {first:>11.4g} -> {last:<11.4g} {rep.verdict}")
        print()

    # Parity split: the odd subsequence of the second counterexample behaves.
    family = cnd.corpus_example("counterexample_ii")
    odd = cnd.check_condition(family, "Ac2", [5, 9, 17, 33, 65, 129])
    even = cnd.check_condition(family, "Ac2", [4, 8, 16, 32, 64, 128])
    print("counterexample_ii, Ac2 on odd indices: ", odd.verdict)
    print("counterexample_ii, Ac2 on even indices:", even.verdict)
