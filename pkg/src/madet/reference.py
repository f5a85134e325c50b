"""Published FROC operating-point sensitivities and CPM scores for this
method and the comparison detectors, bundled for report juxtaposition."""

import csv
from dataclasses import dataclass
from importlib import resources

from .errors import FormatError
from .evaluate import CPM_OPERATING_POINTS


@dataclass(frozen=True)
class ReferenceTable:
    dataset: str
    method: str
    sensitivities: tuple  # per CPM_OPERATING_POINTS; None if unpublished
    cpm: float

    def row_mean(self):
        if any(s is None for s in self.sensitivities):
            return None
        return sum(self.sensitivities) / len(self.sensitivities)


# The e-ophtha row mean (0.4714) does not equal the reported CPM (0.42);
# both values are preserved as published and the gap is surfaced here
# instead of being "corrected".
KNOWN_DISCREPANCIES = {
    ("e-ophtha", "proposed"): "row mean 0.4714 vs reported cpm 0.42",
}


def load_reference_tables():
    """Parse the bundled reference CSV into ReferenceTable rows."""
    text = resources.files("madet").joinpath("data/reference_tables.csv").read_text()
    rows = list(csv.reader(text.strip().splitlines()))
    header = rows[0]
    expected = ["dataset", "method"] + [f"fp_{q:g}" for q in CPM_OPERATING_POINTS] \
        + ["cpm"]
    if header != expected:
        raise FormatError(f"reference table header mismatch: {header}")
    tables = []
    for row in rows[1:]:
        dataset, method = row[0], row[1]
        sens = tuple(float(v) if v else None for v in row[2:9])
        tables.append(ReferenceTable(dataset, method, sens, float(row[9])))
    return tables


def find_reference(tables, dataset, method):
    for table in tables:
        if table.dataset == dataset and table.method == method:
            return table
    raise KeyError(f"no reference row for ({dataset}, {method})")
