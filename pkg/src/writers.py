import csv
import os
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from xlsxwriter import Workbook
from xlsxwriter.utility import xl_rowcol_to_cell

from .discretize import Mesh


@dataclass(kw_only=True)
class Table:
    name: str
    header: list[str]
    rows: list[list[Any]] = field(default_factory=list)

    def append(self, *row: Any) -> None:
        if len(row) != len(self.header):
            raise RowWidthError(self.name, len(self.header), len(row))
        self.rows.append(list(row))


@dataclass(kw_only=True)
class ReportEntry:
    """One `key = value` report line; numeric values carry their provenance."""

    key: str
    value: Any
    level: int | None = None
    h: float | None = None
    tolerance: float | None = None


def format_value(value: Any) -> str:
    match value:
        case bool() | np.bool_():
            return "true" if value else "false"
        case int() | np.integer():
            return str(int(value))
        case float() | np.floating():
            return "%.17g" % float(value)
        case _:
            return str(value)


def write_csv(path: str, table: Table) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(table.header)
        for row in table.rows:
            writer.writerow([format_value(value) for value in row])


def write_vtk(path: str, m: Mesh, fields: dict[str, np.ndarray], title: str = "branchlab") -> None:
    """Legacy ASCII unstructured grid with one POINT_DATA scalar per field."""
    cell_type = _vtk_cell_types.get(m.elements.shape[1])
    if cell_type is None:
        raise UnsupportedCellError(m.elements.shape[1])
    points = np.zeros((m.n_nodes, 3))
    points[:, : m.nodes.shape[1]] = m.nodes
    lines = [
        "# vtk DataFile Version 3.0",
        title.replace("\n", " ")[:255],
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {m.n_nodes} double",
    ]
    lines.extend(" ".join(format_value(x) for x in point) for point in points)
    n_elements, width = m.elements.shape
    lines.append(f"CELLS {n_elements} {n_elements * (width + 1)}")
    lines.extend(f"{width} " + " ".join(str(int(i)) for i in element) for element in m.elements)
    lines.append(f"CELL_TYPES {n_elements}")
    lines.extend(str(cell_type) for _ in range(n_elements))
    if len(fields) >= 1:
        lines.append(f"POINT_DATA {m.n_nodes}")
    for name, values in fields.items():
        values = np.asarray(values, dtype=float)
        if values.shape != (m.n_nodes,):
            raise FieldShapeError(name, values.shape, m.n_nodes)
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(format_value(x) for x in values)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def node_table(name: str, m: Mesh, fields: dict[str, np.ndarray]) -> Table:
    axes = ["x", "y", "z"][: m.nodes.shape[1]]
    table = Table(name=name, header=["node", *axes, *fields.keys()])
    columns = [np.asarray(values, dtype=float) for values in fields.values()]
    for field_name, values in zip(fields.keys(), columns):
        if values.shape != (m.n_nodes,):
            raise FieldShapeError(field_name, values.shape, m.n_nodes)
    for i in range(m.n_nodes):
        table.append(i, *(float(x) for x in m.nodes[i]), *(float(c[i]) for c in columns))
    return table


def write_node_table(path: str, m: Mesh, fields: dict[str, np.ndarray]) -> Table:
    table = node_table(os.path.splitext(os.path.basename(path))[0], m, fields)
    write_csv(path, table)
    return table


def format_report(entries: Sequence[ReportEntry]) -> str:
    lines: list[str] = []
    for entry in entries:
        line = f"{entry.key} = {format_value(entry.value)}"
        if entry.level is not None or entry.h is not None or entry.tolerance is not None:
            provenance = [
                f"level={format_value(entry.level) if entry.level is not None else '-'}",
                f"h={format_value(entry.h) if entry.h is not None else '-'}",
                f"tol={format_value(entry.tolerance) if entry.tolerance is not None else '-'}",
            ]
            line += " [" + " ".join(provenance) + "]"
        lines.append(line)
    return "\n".join(lines) + "\n"


def write_report(path: str, entries: Sequence[ReportEntry]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_report(entries))


def write_workbook(path: str, tables: Sequence[Table]) -> None:
    WorkbookWriter(tables, path).dump_tables()


class WorkbookWriter:
    __slots__ = (
        "_tables",
        "_output_file_name",
        "_workbook",
        "_hdr_fmt",
        "_cell_fmt",
        "_hyperlink_cell_fmt",
    )

    def __init__(self, tables: Sequence[Table], output_file_name: str) -> None:
        self._tables = tables
        self._output_file_name = output_file_name

    def dump_tables(self) -> None:
        self._workbook = Workbook(self._output_file_name, {"nan_inf_to_errors": True})
        self._set_formats()

        index_worksheet = self._workbook.add_worksheet("Index")
        worksheet_names = [self._worksheet_name(i, table) for i, table in enumerate(self._tables)]
        for table, worksheet_name in zip(self._tables, worksheet_names):
            self._dump_table(table, self._workbook.add_worksheet(worksheet_name))
        self._dump_index(index_worksheet, worksheet_names)

        self._workbook.close()

    def _set_formats(self) -> None:
        common_format_properties = {
            "border": True,
            "font_size": 8,
            "valign": "vcenter",
        }

        self._hdr_fmt = self._workbook.add_format(
            {
                "align": "center",
                "bg_color": "#D9D9D9",
                "bold": True,
                **common_format_properties,
            }
        )
        self._cell_fmt = self._workbook.add_format(
            {
                "num_format": "0.000000000000E+00",
                **common_format_properties,
            }
        )
        self._hyperlink_cell_fmt = self._workbook.add_format(
            {
                "font_color": "blue",
                "underline": 1,
                **common_format_properties,
            }
        )

    def _worksheet_name(self, index: int, table: Table) -> str:
        # sheet names are limited to 31 characters and must be unique
        name = "".join("_" if c in "[]:*?/\\" else c for c in table.name)
        return f"{index + 1}_{name}"[:31]

    def _dump_table(self, table: Table, worksheet) -> None:
        for column_index, title in enumerate(table.header):
            worksheet.set_column(column_index, column_index, max(12, len(title) + 2))
            worksheet.write_string(0, column_index, title, self._hdr_fmt)
        worksheet.freeze_panes(1, 0)

        for row_index, row in enumerate(table.rows, start=1):
            for column_index, value in enumerate(row):
                match value:
                    case bool() | np.bool_():
                        worksheet.write_boolean(row_index, column_index, bool(value), self._cell_fmt)
                    case int() | float() | np.integer() | np.floating():
                        worksheet.write_number(row_index, column_index, float(value), self._cell_fmt)
                    case _:
                        worksheet.write_string(row_index, column_index, str(value), self._cell_fmt)

    def _dump_index(self, worksheet, worksheet_names: list[str]) -> None:
        worksheet.set_column(0, 0, 40)
        worksheet.set_column(1, 1, 12)
        worksheet.write_string(0, 0, "Table", self._hdr_fmt)
        worksheet.write_string(0, 1, "Rows", self._hdr_fmt)
        for row_index, (table, worksheet_name) in enumerate(zip(self._tables, worksheet_names), start=1):
            url = f"internal:'{worksheet_name}'!{xl_rowcol_to_cell(0, 0)}"
            worksheet.write_url(row_index, 0, url, self._hyperlink_cell_fmt, string=table.name)
            worksheet.write_number(row_index, 1, len(table.rows))


_vtk_cell_types = {2: 3, 3: 5, 4: 10}


class Error(Exception):
    pass


class RowWidthError(Error):
    def __init__(self, table: str, expected: int, actual: int) -> None:
        super().__init__(f"table {repr(table)}: row has {actual} values, header has {expected}")


class UnsupportedCellError(Error):
    def __init__(self, width: int) -> None:
        super().__init__(f"no VTK cell type for elements with {width} nodes")


class FieldShapeError(Error):
    def __init__(self, name: str, shape: tuple[int, ...], n_nodes: int) -> None:
        super().__init__(f"field {repr(name)} has shape {shape}, expected ({n_nodes},)")
