import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokentraj.errors import (
    DataError,
    DuplicateNameError,
    DuplicatePatientError,
    MalformedTimestampError,
    ParseError,
    StaticTimestampError,
    UnknownLabelError,
    UnknownVariableError,
)
from tokentraj.schema import (
    Observation,
    StayRecord,
    VariableDictionary,
    VariableSpec,
    load_dictionary,
    load_observations,
    load_outcomes,
    load_stay_lengths,
    window_stay,
    write_dictionary,
    write_observations,
)

HEADER = "name,kind,static,category,intervention,physician_impression\n"


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def dictionary(tmp_path):
    return load_dictionary(write(tmp_path / "dict.csv", HEADER + "Age,numeric,true,demo,false,false\n"
                                 "GCSm,categorical,false,neuro,false,true\n"
                                 "HR,numeric,false,vitals,false,false\n"))


def test_three_row_dictionary(dictionary):
    assert len(dictionary) == 3
    assert dictionary.names == ["Age", "GCSm", "HR"]
    age = dictionary.get("Age")
    assert age.kind == "numeric" and age.static
    assert dictionary.get("GCSm").physician_impression


def test_duplicate_name_rejected(tmp_path):
    path = write(tmp_path / "d.csv", HEADER + "Age,numeric,true,,false,false\nAge,numeric,false,,false,false\n")
    with pytest.raises(DuplicateNameError, match="Age"):
        load_dictionary(path)


def test_dictionary_bad_kind_and_bool(tmp_path):
    with pytest.raises(ParseError, match=r"a\.csv:2:"):
        load_dictionary(write(tmp_path / "a.csv", HEADER + "X,ordinal,true,,false,false\n"))
    with pytest.raises(ParseError, match="static"):
        load_dictionary(write(tmp_path / "b.csv", HEADER + "X,numeric,yes,,false,false\n"))
    with pytest.raises(ParseError, match="header"):
        load_dictionary(write(tmp_path / "c.csv", "name,kind\nX,numeric\n"))


def test_dictionary_round_trip(tmp_path, dictionary):
    write_dictionary(dictionary, tmp_path / "out.csv")
    assert load_dictionary(tmp_path / "out.csv") == dictionary


def test_observations_two_patients(tmp_path, dictionary):
    path = write(tmp_path / "obs.csv", "patient_id,variable,value,t_hours\n"
                 "A,Age,40,\nA,HR,80,1.5\nB,Age,70,\nB,GCSm,5,0.5\nB,HR,90,7.0\n")
    stays = load_observations(path, dictionary)
    assert [s.patient_id for s in stays] == ["A", "B"]
    assert len(stays[1].observations) == 3
    assert stays[1].stay_length_hours == 7.0


def test_observations_jsonl(tmp_path, dictionary):
    lines = [{"patient_id": "A", "variable": "Age", "value": 40, "t_hours": None},
             {"patient_id": "A", "variable": "HR", "value": 80.5, "t_hours": 3}]
    path = write(tmp_path / "obs.jsonl", "\n".join(json.dumps(x) for x in lines) + "\n")
    (stay,) = load_observations(path, dictionary)
    assert stay.observations[1] == Observation("HR", 80.5, 3.0)


@pytest.mark.parametrize("row, error", [
    ("A,Foo,1,2\n", UnknownVariableError),
    ("A,HR,80,-1\n", MalformedTimestampError),
    ("A,HR,80,abc\n", MalformedTimestampError),
    ("A,HR,80,\n", MalformedTimestampError),
    ("A,Age,40,2\n", StaticTimestampError),
])
def test_observation_errors(tmp_path, dictionary, row, error):
    path = write(tmp_path / "obs.csv", "patient_id,variable,value,t_hours\n" + row)
    with pytest.raises(error):
        load_observations(path, dictionary)


def test_second_static_value_rejected(tmp_path, dictionary):
    path = write(tmp_path / "obs.csv", "patient_id,variable,value,t_hours\nA,Age,40,\nA,Age,41,\n")
    with pytest.raises(DataError, match="second value"):
        load_observations(path, dictionary)


def test_stay_lengths(tmp_path, dictionary):
    obs = write(tmp_path / "obs.csv", "patient_id,variable,value,t_hours\nA,HR,80,1\n")
    lengths = load_stay_lengths(write(tmp_path / "stays.csv", "patient_id,stay_length_hours\nA,6\nB,4\n"))
    stays = load_observations(obs, dictionary, lengths)
    assert [(s.patient_id, s.stay_length_hours) for s in stays] == [("A", 6.0), ("B", 4.0)]
    with pytest.raises(MalformedTimestampError, match="beyond"):
        load_observations(write(tmp_path / "o2.csv", "patient_id,variable,value,t_hours\nA,HR,80,7\n"),
                          dictionary, lengths)
    with pytest.raises(DuplicatePatientError):
        load_stay_lengths(write(tmp_path / "s2.csv", "patient_id,stay_length_hours\nA,6\nA,4\n"))


def test_outcome_encoding(tmp_path):
    path = write(tmp_path / "out.csv", "patient_id,gose\nA,2_3\nB,8\nC,1\n")
    assert [o.gose_index for o in load_outcomes(path)] == [1, 6, 0]


def test_outcome_errors(tmp_path):
    with pytest.raises(UnknownLabelError, match="2_3"):
        load_outcomes(write(tmp_path / "a.csv", "patient_id,gose\nA,3\n"))
    with pytest.raises(DuplicatePatientError):
        load_outcomes(write(tmp_path / "b.csv", "patient_id,gose\nA,4\nA,5\n"))


def test_data_errors_are_value_errors():
    assert issubclass(UnknownLabelError, ValueError)


# ---------------------------------------------------------------------------
# windowing

DICT = VariableDictionary((VariableSpec("Age", "numeric", True), VariableSpec("HR", "numeric", False)))


def test_six_hours_three_windows():
    stay = StayRecord("A", (Observation("Age", "40"),), 6.0)
    ws = window_stay(stay, 2.0, dictionary=DICT)
    assert len(ws) == 3
    assert all(w.values == (("Age", "40"),) for w in ws.windows)


def test_floor_rule_and_boundary():
    stay = StayRecord("A", (Observation("HR", "1", 3.9), Observation("HR", "2", 4.0), Observation("HR", "3", 6.0)),
                      6.0)
    ws = window_stay(stay, 2.0, dictionary=DICT)
    assert ws.windows[1].values == (("HR", "1"),)
    # a boundary belongs to the later window; the stay end is folded into the last
    assert ws.windows[2].values == (("HR", "2"), ("HR", "3"))


def test_window_limit():
    stay = StayRecord("A", (Observation("HR", "1", 199.0),), 200.0)
    ws = window_stay(stay, 2.0, window_limit=84, dictionary=DICT)
    assert len(ws) == 84
    assert all(not w.values for w in ws.windows)


def test_short_stay_one_window():
    assert len(window_stay(StayRecord("A", (), 0.5), 2.0)) == 1
    assert len(window_stay(StayRecord("A", (), 0.0), 2.0)) == 1


def test_bad_window_hours():
    with pytest.raises(ValueError):
        window_stay(StayRecord("A", (), 4.0), 0.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.1, 300.0), st.sampled_from([0.5, 1.0, 2.0, 6.0]), st.one_of(st.none(), st.integers(1, 100)),
       st.lists(st.floats(0.0, 1.0), max_size=20))
def test_windows_cover_stay(length, w, limit, fractions):
    obs = (Observation("Age", "1"),) + tuple(Observation("HR", str(i), f * length) for i, f in enumerate(fractions))
    ws = window_stay(StayRecord("A", obs, length), w, limit, DICT)
    n = len(ws)
    full = max(1, -(-length // w))
    assert n == (full if limit is None else min(full, limit))
    assert [x.index for x in ws.windows] == list(range(n))
    statics = {x.values[0] for x in ws.windows}
    assert statics == {("Age", "1")}
    dynamic = sum(len(x.values) - 1 for x in ws.windows)
    kept = sum(1 for f in fractions if min(int(f * length // w), int(full) - 1) < n)
    assert dynamic == kept


def test_round_trip_serialization(tmp_path):
    stays = [StayRecord("A", (Observation("Age", "40"), Observation("HR", "80", 1.25)), 1.25)]
    write_observations(stays, tmp_path / "o.csv")
    back = load_observations(tmp_path / "o.csv", DICT)
    assert window_stay(back[0], 2.0, dictionary=DICT).windows == window_stay(stays[0], 2.0, dictionary=DICT).windows
