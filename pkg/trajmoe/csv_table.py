from csv import DictWriter
from logging import getLogger
from pathlib import Path

from pandas import DataFrame

logger = getLogger(__name__)


class CsvTable:
    """
    Rows of named columns written as CSV.
    Args:
        fieldnames (list): Column names, in output order.
        float_format (str, optional): %-format for floats. Defaults to "%.9g".
    Methods:
        add_row(row): Appends a dict keyed by column name.
        write_to_file(path, append): Writes header and rows.
        get_df(): Rows as a pandas.DataFrame.
    """

    def __init__(self, fieldnames, float_format="%.9g"):
        self.fieldnames = list(fieldnames)
        self.float_format = float_format
        self.rows = []

    def add_row(self, row: dict):
        unknown = set(row) - set(self.fieldnames)
        if unknown:
            raise KeyError("Unknown columns %s" % sorted(unknown))
        self.rows.append(dict(row))

    def _format(self, value):
        if value is None:
            return ""
        if isinstance(value, float):
            return self.float_format % value
        if hasattr(value, "dtype") and value.dtype.kind == "f":
            return self.float_format % float(value)
        return value

    def write_to_file(self, path, append: bool = False):
        """
        Write to file: creates the parent folder if needed. With ``append``,
        rows are added to an existing file and the header is written only once.
        """
        output_file_path = Path(path)
        if not output_file_path.parent.exists():
            output_file_path.parent.mkdir(parents=True)
        mode = "a" if append and output_file_path.is_file() else "w"
        with open(output_file_path, mode, newline="") as csv_file:
            writer = DictWriter(csv_file, fieldnames=self.fieldnames, lineterminator="\n")
            if mode == "w":
                writer.writeheader()
            for row in self.rows:
                writer.writerow({key: self._format(row.get(key)) for key in self.fieldnames})
        logger.info("Results saved to %s", output_file_path)

    def get_df(self):
        return DataFrame(self.rows, columns=self.fieldnames)
