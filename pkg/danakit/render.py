"""Rendering of result rows as aligned text tables or CSV.
"""
__copyright__ = "Copyright (C) 2024  The danakit Authors"
__license__ = "GNU GPLv2"

import csv


class RenderContext:
    """Formatting options shared by the renderers of a table."""

    def __init__(self, digits=9, listsep='+', spaced=False):
        self.digits = digits
        self.listsep = listsep
        self.spaced = spaced


# Column dtype to renderer class, filled in as ColumnRenderer is subclassed.
RENDERERS = {}


class ColumnRenderer:
    """Render the values of one column to strings of a common width.

    Values are fed through update() to measure the column; prepare() fixes
    the width and format() pads every value to it. A renderer that measured
    nothing pads nothing, which is how CSV cells are produced.
    """
    dtype = None

    def __init__(self, ctx):
        self.maxwidth = 0
        self.prepared = False

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        RENDERERS[cls.dtype] = cls

    def text(self, value):
        """The unpadded string of a value."""
        raise NotImplementedError

    def update(self, value):
        self.maxwidth = max(self.maxwidth, len(self.text(value)))

    def prepare(self):
        """Fix the column width and return it."""
        self.prepared = True
        return self.maxwidth

    @property
    def width(self):
        if not self.prepared:
            raise RuntimeError('width property access before calling prepare()')
        return self.maxwidth

    def format(self, value):
        return self.text(value).ljust(self.maxwidth)


class StringRenderer(ColumnRenderer):
    dtype = str

    def text(self, value):
        return value


class TupleRenderer(ColumnRenderer):
    """Renderer for name tuples such as sensor subsets."""
    dtype = tuple

    def __init__(self, ctx):
        super().__init__(ctx)
        self.sep = ctx.listsep

    def text(self, value):
        return self.sep.join(value)


class IntRenderer(ColumnRenderer):
    dtype = int

    def text(self, value):
        return str(value)

    def format(self, value):
        return self.text(value).rjust(self.maxwidth)


class FloatRenderer(IntRenderer):
    """Renderer for floats with a fixed number of significant digits."""
    dtype = float

    def __init__(self, ctx):
        super().__init__(ctx)
        self.frmt = f'%.{ctx.digits}g'

    def text(self, value):
        return self.frmt % value


def make_renderers(columns, rows, ctx, headers=False):
    """Create and prepare one renderer per column.

    Args:
      columns: A list of (name, dtype) tuples.
      rows: Rows to measure; pass no rows for unpadded output.
      ctx: A RenderContext.
      headers: Make the columns at least as wide as their names.
    Returns:
      A list of prepared ColumnRenderer instances.
    """
    renderers = [RENDERERS[dtype](ctx) for _, dtype in columns]
    for row in rows:
        for renderer, value in zip(renderers, row):
            if value is not None:
                renderer.update(value)
    if headers:
        for renderer, (name, _) in zip(renderers, columns):
            renderer.maxwidth = max(renderer.maxwidth, len(name))
    for renderer in renderers:
        renderer.prepare()
    return renderers


def render_rows(rows, renderers, ctx):
    """Render result rows; missing values render as blank cells."""
    blanks = [' ' * renderer.width for renderer in renderers]
    for row in rows:
        yield [blank if value is None else renderer.format(value)
               for renderer, value, blank in zip(renderers, row, blanks)]
        if ctx.spaced:
            yield blanks


def render_text(columns, rows, file, boxed=False, spaced=False):
    """Render rows as an aligned text table.

    Args:
      columns: A list of (name, dtype) tuples describing the table columns.
      rows: A list of tuples holding the table data; None marks a missing value.
      file: A file object to render the results to.
      boxed: Draw ascii-art borders around the table.
      spaced: Insert an empty line between rows.
    """
    ctx = RenderContext(spaced=spaced)
    renderers = make_renderers(columns, rows, ctx, headers=True)
    rules = ['-' * renderer.width for renderer in renderers]
    headers = [name.center(renderer.width) for (name, _), renderer in zip(columns, renderers)]

    if boxed:
        line = '| {} |\n'.format
        sep = ' | '
        border = '+-{}-+\n'.format('-+-'.join(rules))
    else:
        line = '{}\n'.format
        sep = ' '
        border = ''

    file.write(border)
    file.write(line(sep.join(headers)))
    file.write(border if boxed else line(' '.join(rules)))
    for cells in render_rows(rows, renderers, ctx):
        file.write(line(sep.join(cells)))
    file.write(border)


def render_csv(columns, rows, file):
    """Render rows as CSV with a header row and unpadded cells.

    Args:
      columns: A list of (name, dtype) tuples describing the table columns.
      rows: A list of tuples holding the table data; None renders empty.
      file: A file object to render the results to.
    """
    ctx = RenderContext()
    renderers = make_renderers(columns, [], ctx)
    writer = csv.writer(file, lineterminator='\n')
    writer.writerow([name for name, _ in columns])
    writer.writerows(render_rows(rows, renderers, ctx))
