from madtls.access import Access
from madtls.bench import check_rows, measure, run_bench


def test_hop_mac_counts_follow_closed_form():
    for c in (1, 3, 5):
        assert measure(c, 8, Access.READ, reps=1).hop_macs == 2 * c
        assert measure(c, 8, Access.WRITE, reps=1).hop_macs == 4 * c


def test_counts_do_not_depend_on_context_size():
    rows = run_bench(contexts=[2], sizes=[1, 20], reps=1)
    assert len({(r.access, r.hop_macs) for r in rows}) == 2
    assert check_rows(rows) == []


def test_check_rows_flags_broken_rows():
    rows = run_bench(contexts=[1, 2], sizes=[4], reps=1)
    rows[0].hop_macs += 1
    assert check_rows(rows)
