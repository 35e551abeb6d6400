from r2b.experiments import check_ordering

GOOD = {"sb": [80.0, 80.4, 79.8], "sb-att": [81.0, 81.2, 80.9], "sb-att-hkd": [82.0, 82.1, 81.7],
        "sb-g": [80.1, 80.3, 80.0], "real-to-bin": [82.5, 82.3, 82.9]}


def test_expected_ordering_passes():
    assert check_ordering(GOOD) == []


def test_small_inversion_within_tolerance():
    res = dict(GOOD, **{"real-to-bin": [81.8, 81.9, 81.7]})  # 0.2 below sb-att-hkd
    assert check_ordering(res) == []


def test_inversion_beyond_tolerance():
    res = dict(GOOD, **{"sb-att": [79.0, 79.2, 79.1]})
    assert any("sb-att" in p for p in check_ordering(res))


def test_gating_alone_must_not_help():
    res = dict(GOOD, **{"sb-g": [81.5, 81.6, 81.4]})
    assert any("sb-g" in p for p in check_ordering(res))
