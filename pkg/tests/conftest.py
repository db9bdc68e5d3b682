"""Shared fixtures: a three-state raw corpus with known injected defects."""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field
from pathlib import Path

import pytest

CO_SCHEMA = """
[schema]
state = CO
date_formats = %Y-%m-%d
datetime_formats = %Y-%m-%d %H:%M
dedup_key = x_officer_id, x_officer_name, x_driver_first_name, x_driver_last_name, x_dob, x_milepost, stop_date, stop_time

[columns]
stop_datetime = stop_datetime
location = county
driver_race = race
driver_ethnicity = ethnicity
driver_gender = gender
driver_birth_date = dob
violations = violation
search_conducted = search
search_types = search_type
contraband_found = contraband
outcome = outcome
x_officer_id = officer_id
x_officer_name = officer_last
x_driver_first_name = driver_first
x_driver_last_name = driver_last
x_dob = dob
x_milepost = milepost

[violation]
SPEED = speeding
EQUIP = equipment
"""

NC_SCHEMA = """
[schema]
state = NC
date_formats = %m/%d/%Y
midnight_is_missing = true

[columns]
stop_date = date
stop_time = time
location = district
driver_race = race
driver_ethnicity = ethnicity
driver_gender = sex
driver_age = age
violations = violation1, violation2
search_conducted = search_driver, search_vehicle, search_passenger
contraband_found = contraband
outcome = outcome

[violation]
Speed Limit = speeding
Seat Belt = seat belt
"""

TX_SCHEMA = """
[schema]
state = TX
delimiter = tab
date_formats = %m/%d/%Y

[columns]
stop_date = stop_date
stop_time = stop_time
location = county
driver_race = race
driver_gender = gender
driver_birth_year = birth_year
violations = violations
search_conducted = searched
search_types = search_reason
contraband_found = contraband
outcome = outcome
x_driver_last_name = last_name

[violation]
speeding = speeding
"""

SURNAMES = [("name", "pcthispanic"), ("GARCIA", "92.03"), ("LOPEZ", "92.92"), ("SMITH", "2.4"), ("LUNA", "60.0"), ("CRUZ", "86.1")]
LOCATIONS = [
    ("state", "raw", "location"),
    ("CO", "DENVER", "08031"),
    ("CO", "BOULDER", "08013"),
    ("CO", "EL PASO", "08041"),
]


@dataclass
class Corpus:
    root: Path
    config: Path
    expected: dict = field(default_factory=dict)


def _write(path: Path, header, rows, delimiter=","):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def build_corpus(root: Path, seed: int = 7) -> Corpus:
    """Write raw exports, schemas, reference tables and a pipeline config.

    Injected defects (counted in ``expected``): exact and contraband-variant
    duplicates (CO), out-of-range ages (CO, NC), midnight times (NC),
    contraband flagged without a search (CO, NC), a malformed line (NC), an
    ambiguous two-digit-year date (TX), Hispanic surnames (TX).
    """
    rng = random.Random(seed)
    root.mkdir(parents=True, exist_ok=True)
    raw = root / "raw"
    schemas = root / "schemas"
    raw.mkdir(exist_ok=True)
    schemas.mkdir(exist_ok=True)
    (schemas / "co.ini").write_text(CO_SCHEMA)
    (schemas / "nc.ini").write_text(NC_SCHEMA)
    (schemas / "tx.ini").write_text(TX_SCHEMA)
    _write(root / "surnames.csv", SURNAMES[0], SURNAMES[1:])
    _write(root / "locations.csv", LOCATIONS[0], LOCATIONS[1:])
    exp = {"rows_read": 0, "error_sink": 0, "duplicates_removed": 0, "age_out_of_range": 0}
    exp.update({"midnight_time_missing": 0, "contraband_without_search": 0, "surname_reclassified": 0})
    races = ["W", "B", "H"]

    # CO: unique keys via officer id / minute; 30 base rows
    co_header = [
        "officer_id", "officer_first", "officer_last", "driver_first", "driver_last", "dob", "milepost",
        "stop_datetime", "county", "race", "ethnicity", "gender", "violation", "search", "search_type",
        "contraband", "outcome",
    ]  # fmt: skip
    co = []
    for i in range(30):
        searched = i % 5 == 0
        co.append(
            [
                f"OF{i % 4}", "Pat", f"Officer{i % 4}", f"D{i}", f"Last{i}", f"19{70 + i % 20}-0{1 + i % 9}-15",
                f"{100 + i}.5", f"2013-0{1 + i % 9}-1{i % 10} {8 + i % 10:02d}:{i:02d}",
                rng.choice(["Denver", "Boulder", "El Paso"]), races[i % 3], "N", rng.choice(["M", "F"]),
                "SPEED" if i % 2 else "EQUIP", "Y" if searched else "N", "Consent" if searched else "",
                "N", rng.choice(["Citation", "Written Warning", "Arrest"]),
            ]  # fmt: skip
        )
    co[3][5] = "2005-01-01"  # age 8 at a 2013 stop
    co[4][5] = "1905-01-01"  # age 108
    exp["age_out_of_range"] += 2
    for i in (6, 7):  # contraband without a search
        co[i][13], co[i][14], co[i][15] = "N", "", "Y"
    exp["contraband_without_search"] += 2
    dup_a = list(co[1])
    dup_b = list(co[2])
    dup_c = list(co[2])
    dup_c[13], dup_c[15] = "Y", "Y"  # copy carrying the contraband flag
    dup_d = list(co[8])
    co += [dup_a, dup_b, dup_c, dup_d]
    exp["duplicates_removed"] += 4
    co_rows = len(co)
    _write(raw / "co.csv", co_header, co)

    # NC: district-coded, separate date/time, OR-ed search flags
    nc_header = [
        "date", "time", "district", "race", "ethnicity", "sex", "age", "violation1", "violation2",
        "search_driver", "search_vehicle", "search_passenger", "contraband", "outcome",
    ]  # fmt: skip
    nc = []
    for i in range(30):
        searched = i % 4 == 0
        nc.append(
            [
                f"0{1 + i % 9}/1{i % 10}/2014", f"{(i * 7) % 24:02d}:{(i * 13) % 60:02d}", f"D{i % 3}",
                races[i % 3], "N", "M" if i % 2 else "F", str(18 + i), "Speed Limit",
                "Seat Belt" if i % 3 == 0 else "", "N", "Y" if searched else "N", "N",
                "TRUE" if searched and i % 8 == 0 else "FALSE", "Citation|Verbal Warning" if i % 5 == 0 else "Citation",
            ]  # fmt: skip
        )
    for i in (1, 2, 3, 5, 6):
        nc[i][1] = "00:00"
    # row 0 is already at 00:00
    exp["midnight_time_missing"] += 6
    nc[9][6] = "112"
    exp["age_out_of_range"] += 1
    for i in (10, 11):
        nc[i][9] = nc[i][10] = nc[i][11] = "N"
        nc[i][12] = "TRUE"
    exp["contraband_without_search"] += 2
    with open(raw / "nc.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(nc_header)
        w.writerows(nc[:15])
        fh.write("01/01/2014,bad line\n")
        w.writerows(nc[15:])
    exp["error_sink"] += 1
    nc_rows = len(nc) + 1

    # TX: tab-delimited, surnames, a quoted field with an embedded tab
    tx_header = [
        "stop_date", "stop_time", "county", "race", "gender", "birth_year", "last_name", "violations",
        "searched", "search_reason", "contraband", "outcome",
    ]  # fmt: skip
    tx = []
    for i in range(30):
        tx.append(
            [
                f"1{i % 3}/0{1 + i % 9}/2012", f"{i % 24:02d}:15", f"County{i % 4}", races[i % 3],
                "M" if i % 3 else "F", str(1960 + i), f"SMITH{i}", "speeding", "N", "", "", "Citation",
            ]  # fmt: skip
        )
    tx[0][6], tx[0][3] = "GARCIA JR.", "W"
    tx[1][6], tx[1][3] = "Lopez", "W"
    tx[2][6], tx[2][3] = "de la Cruz", ""
    exp["surname_reclassified"] += 3
    tx[4][6], tx[4][3] = "GARCIA", "B"  # recorded black: unchanged
    tx[5][6], tx[5][3] = "LUNA", "W"  # below cutoff: unchanged
    tx[6][6] = "O'BRIEN\tII"  # embedded delimiter inside quotes
    tx[7][0] = "03/04/13"  # two-digit year
    exp["error_sink"] += 1
    _write(raw / "tx.tsv", tx_header, tx, delimiter="\t")
    tx_rows = len(tx)

    exp["rows_read"] = co_rows + nc_rows + tx_rows
    exp["records_out"] = exp["rows_read"] - exp["error_sink"] - exp["duplicates_removed"]
    config = root / "pipeline.ini"
    config.write_text(
        "\n".join(
            [
                "[pipeline]",
                "output_dir = out",
                "schema_dir = schemas",
                "seed = 11",
                "max_error_rate = 0.05",
                "",
                "[inputs]",
                "CO = raw/co.csv",
                "NC = raw/nc.csv",
                "TX = raw/tx.tsv",
                "",
                "[reference]",
                "locations = locations.csv",
                "surnames = surnames.csv",
                "reclassify_states = TX",
                "",
                "[analyze]",
                "analyses = outcome_test",
                "",
            ]
        )
    )
    return Corpus(root, config, exp)


@pytest.fixture
def corpus(tmp_path) -> Corpus:
    return build_corpus(tmp_path / "corpus")


# -- acceptance report -------------------------------------------------------

_ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number: int, title: str, passed: bool | None, detail: str = "") -> None:
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        line = f"{status} [{number}] {title}" + (f": {detail}" if detail else "")
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)
        if passed is None:
            pytest.skip(detail)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
