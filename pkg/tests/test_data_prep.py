import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spmc import data_prep
from spmc.data_prep import (
    DataError,
    DatasetParseError,
    ElectionData,
    RawStation,
    covariate_density,
    corpus_stats,
    emit_dataset,
    join_rounds,
    load_dataset,
    merge_small_candidates,
    merge_small_stations,
    parse_round,
)
from spmc.ei_models import StationData


def raw(registered, **votes):
    return RawStation(registered, dict(votes))


class TestJoin:
    def test_equal_registered(self):
        d = join_rounds({"1-1-1": raw(100, A=40, B=30)}, {"1-1-1": raw(100, A=50, B=45)})
        st_ = d.stations[0]
        np.testing.assert_array_equal(st_.round1, [30, 40, 30])
        np.testing.assert_array_equal(st_.round2, [5, 50, 45])
        assert d.options1 == ["Abstention", "A", "B"]

    def test_padding_goes_to_smaller_round(self):
        d = join_rounds({"s": raw(1000, A=600)}, {"s": raw(1030, A=700)})
        st_ = d.stations[0]
        assert st_.round1[0] == 400 + 30 and st_.n == 1030
        assert st_.round2.sum() == 1030

    def test_large_difference_rejected(self):
        d = join_rounds({"s": raw(1000, A=600)}, {"s": raw(1051, A=700)})
        assert d.stations == []
        assert d.rejections[0].station_id == "s"
        d = join_rounds({"s": raw(1000, A=600)}, {"s": raw(1050, A=700)})
        assert len(d.stations) == 1

    def test_full_abstention_after_padding_rejected(self):
        d = join_rounds({"s": raw(100, A=0)}, {"s": raw(100, A=10)})
        assert d.stations == [] and "abstention" in d.rejections[0].reason

    def test_exclusion_list(self):
        d = join_rounds({"s": raw(10, A=5), "t": raw(10, A=5)},
                        {"s": raw(10, A=5), "t": raw(10, A=5)}, exclude=["t"])
        assert [s.station_id for s in d.stations] == ["s"]
        assert d.rejections[0].reason == "excluded"

    def test_row_order_does_not_matter(self):
        text = ["station_id,option,votes,registered", "b,X,3,10", "a,Y,2,5", "a,X,1,5", "b,Y,4,10"]
        r1 = parse_round(text)
        r2 = parse_round([text[0]] + text[1:][::-1])
        d1, d2 = join_rounds(r1, r1), join_rounds(r2, r2)
        assert d1.stations == d2.stations and d1.options1 == d2.options1


class TestParseRound:
    def test_duplicate_rows(self):
        with pytest.raises(DatasetParseError, match=":3:"):
            parse_round(["station_id,option,votes,registered", "a,X,1,5", "a,X,2,5"])

    def test_bad_header_and_values(self):
        with pytest.raises(DatasetParseError):
            parse_round(["station,option,votes,registered"])
        with pytest.raises(DatasetParseError, match=":2:"):
            parse_round(["station_id,option,votes,registered", "a,X,one,5"])

    def test_more_votes_than_registered(self):
        with pytest.raises(DataError):
            parse_round(["station_id,option,votes,registered", "a,X,4,5", "a,Y,2,5"])


class TestMerges:
    def test_small_stations_pooled_per_group(self):
        stations = [StationData("01-01-1", [10, 20], [15, 15]),
                    StationData("01-02-2", [25, 15], [20, 20]),
                    StationData("01-01-3", [50, 50], [60, 40]),
                    StationData("02-01-4", [5, 5], [5, 5])]
        out = merge_small_stations(stations, "department")
        ids = [s.station_id for s in out]
        assert ids == ["01-01-3", "01-merged", "02-merged"]
        merged = out[1]
        assert merged.n == 70
        np.testing.assert_array_equal(merged.round1, [35, 35])
        out_c = merge_small_stations(stations, "constituency")
        assert [s.station_id for s in out_c] == ["01-01-3", "01-01-merged", "01-02-merged",
                                                 "02-01-merged"]

    def test_no_small_stations_is_identity(self):
        stations = [StationData("1-1-1", [50, 50], [60, 40])]
        assert merge_small_stations(stations) == stations

    def test_merged_covariate_is_weighted_mean(self):
        stations = [StationData("1-1-1", [10, 20], [15, 15], 1.0),
                    StationData("1-1-2", [5, 5], [5, 5], -2.0)]
        out = merge_small_stations(stations)
        np.testing.assert_allclose(out[0].covariate, (30 * 1.0 + 10 * -2.0) / 40)

    def test_small_candidates(self):
        # shares of votes cast: A 47%, B 47%, C 2%, D 2%, E 2%
        stations = [StationData("s", [100, 470, 470, 20, 20, 20], [100, 500, 500])]
        d = ElectionData(stations, ["Abstention", "A", "B", "C", "D", "E"],
                         ["Abstention", "A", "B"])
        out = merge_small_candidates(d)
        assert out.options1 == ["Abstention", "A", "B", "other"]
        np.testing.assert_array_equal(out.stations[0].round1, [100, 470, 470, 60])
        assert out.option_map["round1"] == {"C": "other", "D": "other", "E": "other"}
        assert out.options2 == d.options2

    def test_abstention_never_merged(self):
        stations = [StationData("s", [1, 500, 499], [1, 999])]
        d = ElectionData(stations, ["Abstention", "A", "B"], ["Abstention", "A"])
        assert merge_small_candidates(d).options1 == ["Abstention", "A", "B"]

    def test_too_few_options_left(self):
        # every candidate is below 5%, so only Abstention and "other" would be
        # left in round 1; round 2 lists no candidate at all
        stations = [StationData("s", [10] + [1] * 30, [40])]
        d = ElectionData(stations, ["Abstention"] + [f"c{i}" for i in range(30)],
                         ["Abstention"])
        with pytest.raises(DataError):
            merge_small_candidates(d)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_merges_conserve_votes(self, seed):
        rng = np.random.default_rng(seed)
        stations = []
        for k in range(int(rng.integers(1, 12))):
            n = int(rng.integers(1, 200))
            r = rng.multinomial(n, rng.dirichlet(np.ones(5)))
            s = rng.multinomial(n, rng.dirichlet(np.ones(3)))
            stations.append(StationData(f"{k % 3:02d}-{k % 2}-{k}", r, s))
        total = sum(s.n for s in stations)
        merged = merge_small_stations(stations)
        assert sum(s.n for s in merged) == total
        d = ElectionData(merged, ["Abstention"] + list("ABCD"), ["Abstention", "X", "Y"])
        try:
            out = merge_small_candidates(d)
        except DataError:
            return
        assert sum(s.n for s in out.stations) == total
        for a, b in zip(d.stations, out.stations):
            assert a.n == b.n


class TestCovariate:
    def test_clamp_at_one_person_per_km2(self):
        stats = (1.0, 2.0)
        np.testing.assert_allclose(covariate_density(5.0, 5.0, stats), -0.5)
        np.testing.assert_allclose(covariate_density(1.0, 10.0, stats), -0.5)
        np.testing.assert_allclose(covariate_density(math.e**3, 1.0, stats), 1.0)

    def test_degenerate_corpus(self):
        stats = corpus_stats([10.0, 20.0], [1.0, 2.0])
        assert stats[1] == 0.0
        with pytest.raises(DataError):
            covariate_density(10.0, 1.0, stats)


class TestDataset:
    def test_round_trip(self, tmp_path):
        stations = [StationData("a", [1, 2, 3], [4, 2], 0.1 + 0.2),
                    StationData("b", [0, 5, 0], [3, 2], None)]
        d = ElectionData(stations, ["Abstention", "X", "Y"], ["Abstention", "Z"])
        path = tmp_path / "d.csv"
        emit_dataset(d, path)
        back = load_dataset(path)
        assert back.stations == stations
        assert back.options1 == d.options1 and back.options2 == d.options2
        assert back.stations[0].covariate == 0.1 + 0.2

    def test_missing_covariate_column(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("station_id,n,r_1,r_2,s_1,s_2\na,3,1,2,2,1\n")
        back = load_dataset(path)
        assert back.stations[0].covariate is None and back.I == 2

    def test_header_mismatch(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("station_id,n,covariate,r_1,s_2,s_1\n")
        with pytest.raises(DatasetParseError, match=":1:"):
            load_dataset(path)

    def test_malformed_row_reports_line(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("station_id,n,covariate,r_1,r_2,s_1,s_2\na,3,,1,2,2,1\nb,3,,1,2,2\n")
        with pytest.raises(DatasetParseError, match=":3:"):
            load_dataset(path)
        path.write_text("station_id,n,covariate,r_1,r_2,s_1,s_2\na,4,,1,2,2,1\n")
        with pytest.raises(DatasetParseError, match=":2:"):
            load_dataset(path)

    def test_empty_dataset(self, tmp_path):
        path = tmp_path / "d.csv"
        emit_dataset(ElectionData([], ["a", "b"], ["c", "d"]), path)
        assert path.read_text() == "station_id,n,covariate,r_1,r_2,s_1,s_2\n"
        assert load_dataset(path).stations == []


def test_rejection_log(tmp_path):
    path = tmp_path / "rej.csv"
    data_prep.write_rejections([data_prep.Rejection("x", "excluded")], path)
    assert path.read_text() == "station_id,reason\nx,excluded\n"
