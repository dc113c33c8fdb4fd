"""Standard feature list and how each synthetic database style stores it.

Three storage patterns are covered: row-coded items behind a definition
table (codes + names), measurements held directly in named columns, and
row-stored items identified only by a free-text name.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass


class Style(str, enum.Enum):
    MIMIC_LIKE = "MimicLike"
    EICU_LIKE = "EicuLike"
    SIC_LIKE = "SicLike"

    @classmethod
    def parse(cls, text: str) -> "Style":
        key = text.replace("-", "").replace("_", "").lower()
        for s in cls:
            if s.value.lower() == key or s.value.lower().removesuffix("like") == key:
                return s
        raise ValueError(f"unknown fixture style {text!r}; expected one of {[s.value for s in cls]}")


# standard feature name -> (low, high) plausible value range
CONCEPTS: dict[str, tuple[float, float]] = {
    "Heart rate": (50, 140),
    "Respiratory rate": (8, 35),
    "Core body temperature": (35, 40),
    "Systolic blood pressure": (80, 180),
    "Diastolic blood pressure": (40, 100),
    "Mean arterial pressure": (55, 120),
    "Oxygen saturation": (85, 100),
    "Central venous pressure": (2, 18),
    "Body weight": (45, 130),
    "Glucose": (60, 300),
    "C-reactive protein": (0.5, 200),
    "Lactate": (0.5, 8),
    "Sodium": (128, 150),
    "Potassium": (3, 6),
    "Creatinine": (0.4, 5),
    "Hemoglobin": (7, 17),
    "Platelet count": (50, 450),
    "White blood cell count": (2, 25),
    "Total bilirubin": (0.2, 6),
    "Albumin": (2, 5),
    "Blood urea nitrogen": (5, 80),
    "Chloride": (95, 115),
    "Magnesium": (1.5, 3),
    "Procalcitonin": (0.05, 20),
    "Troponin T": (0.01, 2),
    "Fibrinogen": (150, 600),
}

FEATURE_LIST: tuple[str, ...] = tuple(CONCEPTS)


@dataclass(frozen=True)
class Item:
    """One mappable item of a fixture.

    ``key`` is the string the evaluator scores: a code, a ``table.column``
    reference or a stored name. ``table`` is where measurements live.
    ``rate`` is the mean number of rows per stay (0 for dictionary-only
    entries).
    """

    key: str
    label: str
    unit: str | None
    table: str
    concept: str | None
    rate: float = 0.0
    group: str = ""


def _coded(table: str, group: str, rows: list[tuple]) -> list[Item]:
    return [Item(str(code), label, unit, table, concept, rate, group)
            for code, label, unit, concept, rate in rows]


MIMIC_ITEMS: tuple[Item, ...] = tuple(
    _coded("chartevents", "d_items", [
        (211, "Heart Rate", "bpm", "Heart rate", 5),
        (220045, "Heart Rate", "bpm", "Heart rate", 5),
        (212, "Heart Rhythm", None, None, 2),
        (220046, "Heart rate Alarm - High", "bpm", None, 1),
        (220047, "Heart Rate Alarm - Low", "bpm", None, 1),
        (618, "Respiratory Rate", "BPM", "Respiratory rate", 4),
        (220210, "Respiratory Rate", "insp/min", "Respiratory rate", 4),
        (676, "Temperature C", "Deg. C", "Core body temperature", 3),
        (223762, "Temperature Celsius", "°C", "Core body temperature", 3),
        (224642, "Temperature Site", None, None, 1),
        (51, "Arterial BP [Systolic]", "mmHg", "Systolic blood pressure", 4),
        (220050, "Arterial Blood Pressure systolic", "mmHg", "Systolic blood pressure", 4),
        (8368, "Arterial BP [Diastolic]", "mmHg", "Diastolic blood pressure", 4),
        (220051, "Arterial Blood Pressure diastolic", "mmHg", "Diastolic blood pressure", 4),
        (52, "Arterial BP Mean", "mmHg", "Mean arterial pressure", 4),
        (220052, "Arterial Blood Pressure mean", "mmHg", "Mean arterial pressure", 4),
        (646, "SpO2", "%", "Oxygen saturation", 4),
        (220277, "O2 saturation pulseoxymetry", "%", "Oxygen saturation", 4),
        (113, "CVP", "mmHg", "Central venous pressure", 2),
        (762, "Admit Wt", "kg", "Body weight", 1),
        (226512, "Admission Weight (Kg)", "kg", "Body weight", 1),
        (198, "GCS Total", None, None, 2),
        (40055, "Urine Out Foley", "mL", None, 2),
        (87, "Braden Score", None, None, 1),
    ])
    + _coded("labevents", "d_labitems", [
        (50931, "Glucose", "mg/dL", "Glucose", 9),
        (50809, "Glucose", "mg/dL", "Glucose", 9),
        (50889, "C-Reactive Protein", "mg/L", "C-reactive protein", 1),
        (50813, "Lactate", "mmol/L", "Lactate", 2),
        (50983, "Sodium", "mEq/L", "Sodium", 3),
        (50824, "Sodium, Whole Blood", "mEq/L", "Sodium", 1),
        (50971, "Potassium", "mEq/L", "Potassium", 3),
        (50822, "Potassium, Whole Blood", "mEq/L", "Potassium", 1),
        (50912, "Creatinine", "mg/dL", "Creatinine", 2),
        (51222, "Hemoglobin", "g/dL", "Hemoglobin", 2),
        (50811, "Hemoglobin", "g/dL", "Hemoglobin", 1),
        (51265, "Platelet Count", "K/uL", "Platelet count", 2),
        (51301, "White Blood Cells", "K/uL", "White blood cell count", 2),
        (50885, "Bilirubin, Total", "mg/dL", "Total bilirubin", 1),
        (50862, "Albumin", "g/dL", "Albumin", 1),
        (51006, "Urea Nitrogen", "mg/dL", "Blood urea nitrogen", 2),
        (50902, "Chloride", "mEq/L", "Chloride", 2),
        (50960, "Magnesium", "mg/dL", "Magnesium", 2),
        (51003, "Troponin T", "ng/mL", "Troponin T", 1),
        (51214, "Fibrinogen, Functional", "mg/dL", "Fibrinogen", 1),
        (50868, "Anion Gap", "mEq/L", None, 2),
        (50882, "Bicarbonate", "mEq/L", None, 2),
        (50893, "Calcium, Total", "mg/dL", None, 1),
        (51221, "Hematocrit", "%", None, 2),
        (51237, "INR(PT)", None, None, 1),
        (51248, "MCH", "pg", None, 1),
        (50820, "pH", "units", None, 1),
    ])
)

EICU_COLUMN_ITEMS: tuple[Item, ...] = (
    Item("vitalperiodic.heartrate", "heartrate", "bpm", "vitalperiodic", "Heart rate", 8, "columns"),
    Item("vitalperiodic.temperature", "temperature", "°C", "vitalperiodic", "Core body temperature", 5, "columns"),
    Item("vitalperiodic.st1", "st1", "mm", "vitalperiodic", None, 4, "columns"),
    Item("vitalperiodic.etco2", "etco2", "mmHg", "vitalperiodic", None, 3, "columns"),
    Item("patient.weight", "weight", "kg", "patient", "Body weight", 0, "columns"),
)

EICU_NAMED_ITEMS: tuple[Item, ...] = tuple(
    Item(name, name, unit, table, concept, rate, table)
    for name, unit, table, concept, rate in [
        ("Non-Invasive BP Systolic", "mmHg", "nursecharting", "Systolic blood pressure", 3),
        ("Invasive BP Systolic", "mmHg", "nursecharting", "Systolic blood pressure", 3),
        ("Non-Invasive BP Diastolic", "mmHg", "nursecharting", "Diastolic blood pressure", 3),
        ("Invasive BP Diastolic", "mmHg", "nursecharting", "Diastolic blood pressure", 3),
        ("Non-Invasive BP Mean", "mmHg", "nursecharting", "Mean arterial pressure", 3),
        ("Invasive BP Mean", "mmHg", "nursecharting", "Mean arterial pressure", 3),
        ("Respiratory Rate", "/min", "nursecharting", "Respiratory rate", 4),
        ("O2 Saturation", "%", "nursecharting", "Oxygen saturation", 4),
        ("GCS Total", None, "nursecharting", None, 2),
        ("Pain Score", None, "nursecharting", None, 2),
        ("glucose", "mg/dL", "lab", "Glucose", 9),
        ("bedside glucose", "mg/dL", "lab", "Glucose", 9),
        ("CRP", "mg/dL", "lab", "C-reactive protein", 1),
        ("lactate", "mmol/L", "lab", "Lactate", 2),
        ("sodium", "mmol/L", "lab", "Sodium", 3),
        ("potassium", "mmol/L", "lab", "Potassium", 3),
        ("creatinine", "mg/dL", "lab", "Creatinine", 2),
        ("Hgb", "g/dL", "lab", "Hemoglobin", 2),
        ("platelets x 1000", "K/mcL", "lab", "Platelet count", 2),
        ("WBC x 1000", "K/mcL", "lab", "White blood cell count", 2),
        ("total bilirubin", "mg/dL", "lab", "Total bilirubin", 1),
        ("albumin", "g/dL", "lab", "Albumin", 1),
        ("BUN", "mg/dL", "lab", "Blood urea nitrogen", 2),
        ("chloride", "mmol/L", "lab", "Chloride", 2),
        ("magnesium", "mg/dL", "lab", "Magnesium", 2),
        ("troponin - T", "ng/mL", "lab", "Troponin T", 1),
        ("anion gap", None, "lab", None, 2),
        ("bicarbonate", "mmol/L", "lab", None, 2),
        ("Hct", "%", "lab", None, 2),
        ("PT - INR", "ratio", "lab", None, 1),
        ("pH", None, "lab", None, 1),
    ]
)

EICU_ITEMS: tuple[Item, ...] = EICU_COLUMN_ITEMS + EICU_NAMED_ITEMS

SIC_COLUMN_ITEMS: tuple[Item, ...] = (
    Item("cases.bodyweight", "bodyweight", "kg", "cases", "Body weight", 0, "columns"),
)

# reference entries that are not measurements (codes used by coded columns)
SIC_SEX_CODES = {"Male": 23, "Female": 24}
SIC_DISCHARGE_CODES = {"Alive": 2202, "Dead": 2215}

SIC_REFERENCE_ITEMS: tuple[Item, ...] = tuple(
    _coded("data_float_h", "d_references", [
        (708, "HeartRateECG", "bpm", "Heart rate", 6),
        (719, "RespRate", "/min", "Respiratory rate", 4),
        (725, "TemperatureCore", "°C", "Core body temperature", 3),
        (701, "ArterialBloodPressureSystolic", "mmHg", "Systolic blood pressure", 4),
        (702, "ArterialBloodPressureDiastolic", "mmHg", "Diastolic blood pressure", 4),
        (703, "ArterialBloodPressureMean", "mmHg", "Mean arterial pressure", 4),
        (710, "SpO2", "%", "Oxygen saturation", 4),
        (715, "PulseRateSpO2Alarm", "bpm", None, 1),
        (730, "UrineOutput", "mL", None, 2),
    ])
    + _coded("laboratory", "d_references", [
        (656, "Glukose (BGA)", "mg/dL", "Glucose", 9),
        (348, "Glukose (ZL)", "mg/dL", "Glucose", 9),
        (480, "CRP", "mg/L", "C-reactive protein", 1),
        (657, "Laktat (BGA)", "mmol/L", "Lactate", 2),
        (371, "Natrium", "mmol/L", "Sodium", 3),
        (658, "Natrium (BGA)", "mmol/L", "Sodium", 1),
        (368, "Kalium", "mmol/L", "Potassium", 3),
        (367, "Kreatinin", "mg/dL", "Creatinine", 2),
        (289, "Hämoglobin", "g/dL", "Hemoglobin", 2),
        (315, "Thrombozyten", "G/L", "Platelet count", 2),
        (301, "Leukozyten", "G/L", "White blood cell count", 2),
        (362, "Bilirubin gesamt", "mg/dL", "Total bilirubin", 1),
        (356, "Albumin", "g/dL", "Albumin", 1),
        (369, "Harnstoff", "mg/dL", "Blood urea nitrogen", 2),
        (364, "Chlorid", "mmol/L", "Chloride", 2),
        (370, "Magnesium", "mmol/L", "Magnesium", 2),
        (484, "PCT", "ng/mL", "Procalcitonin", 1),
        (329, "Fibrinogen", "mg/dL", "Fibrinogen", 1),
        (290, "Hämatokrit", "%", None, 2),
        (660, "pH (BGA)", None, None, 1),
        (327, "Quick", "%", None, 1),
        (328, "INR", None, None, 1),
        (661, "Bicarbonat (BGA)", "mmol/L", None, 1),
    ])
    + _coded("cases", "d_references", [
        (23, "Male", None, None, 0),
        (24, "Female", None, None, 0),
        (2202, "Discharged alive", None, None, 0),
        (2215, "Deceased", None, None, 0),
    ])
)

SIC_ITEMS: tuple[Item, ...] = SIC_COLUMN_ITEMS + SIC_REFERENCE_ITEMS

STYLE_ITEMS: dict[Style, tuple[Item, ...]] = {
    Style.MIMIC_LIKE: MIMIC_ITEMS,
    Style.EICU_LIKE: EICU_ITEMS,
    Style.SIC_LIKE: SIC_ITEMS,
}

# the "clinical record" lookups used by min-record cohort criteria
GLUCOSE_KEYS: dict[Style, tuple[str, ...]] = {
    Style.MIMIC_LIKE: ("50931", "50809"),
    Style.EICU_LIKE: ("glucose", "bedside glucose"),
    Style.SIC_LIKE: ("656", "348"),
}
