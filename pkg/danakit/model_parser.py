"""Parser for the layer notation of model architectures.

A model is a comma-separated sequence of layers, each written as a name
followed by a parenthesized argument list, for example:

  Conv2D(5, (3,3), same, relu), Conv2D(5, (3,3), same, relu),
  DAP(5, 6), LSTM(5), Dense(5, softmax)

Arguments are integers, decimals, bare words, or integer pairs. Comments run
from '#' to the end of the line.
"""
__copyright__ = "Copyright (C) 2024  The danakit Authors"
__license__ = "GNU GPLv2"

import collections

import ply.lex
import ply.yacc


# pylint: disable=invalid-name

# A parsed layer.
#
# Attributes:
#   name: A string, the layer name as written (e.g. 'Conv2D').
#   arguments: A list of arguments: ints, floats, strings (bare words), or
#     tuples of two ints.
#   position: The offset of the layer name in the source text.
Layer = collections.namedtuple('Layer', 'name arguments position')


class ParseError(Exception):
    """A parser error."""


class Lexer:
    """PLY lexer for the layer notation.
    """

    # List of valid tokens from the lexer.
    tokens = [
        'ID', 'INTEGER', 'DECIMAL', 'COMMA', 'LPAREN', 'RPAREN',
    ]

    def t_COMMENT(self, token):
        r"\#[^\n]*"

    # A layer name or a bare word argument (padding, activation).
    def t_ID(self, token):
        "[a-zA-Z_][a-zA-Z0-9_]*"
        return token

    # Constant tokens.
    t_COMMA    = r","
    t_LPAREN   = r"\("
    t_RPAREN   = r"\)"

    # Numbers.
    def t_DECIMAL(self, token):
        r"([0-9]+\.[0-9]*|[0-9]*\.[0-9]+)"
        token.value = float(token.value)
        return token

    def t_INTEGER(self, token):
        r"[0-9]+"
        token.value = int(token.value)
        return token

    # Ignore whitespace.
    t_ignore = " \t\r\n"

    # Error handler.
    def t_error(self, token):
        raise ParseError("Unknown token: {!r} (at {})".format(token.value[0], token.lexpos))


class ModelParser(Lexer):
    """PLY parser for the layer notation.
    """

    start = 'model'

    def __init__(self, **options):
        self.lexer = ply.lex.lex(module=self,
                                 optimize=False,
                                 debuglog=None,
                                 debug=False)
        self.parser = ply.yacc.yacc(module=self,
                                    optimize=False,
                                    write_tables=False,
                                    debuglog=None,
                                    debug=False,
                                    **options)

    def tokenize(self, text):
        self.lexer.input(text)
        while True:
            tok = self.lexer.token()
            if not tok:
                break
            yield tok

    def parse(self, text, debug=False):
        self.lexer.lineno = 1
        return self.parser.parse(text, lexer=self.lexer, debug=debug)

    def handle_comma_separated_list(self, p):
        """Handle a list of 0, 1 or more comma-separated values.
        Args:
          p: A grammar object.
        """
        if len(p) == 2:
            return [] if p[1] is None else [p[1]]
        return p[1] + [p[3]]

    def p_model(self, p):
        """
        model : layer_list
              | layer_list COMMA
        """
        p[0] = p[1]

    def p_layer_list(self, p):
        """
        layer_list : layer
                   | layer_list COMMA layer
        """
        p[0] = self.handle_comma_separated_list(p)

    def p_layer(self, p):
        """
        layer : ID LPAREN argument_list_opt RPAREN
        """
        p[0] = Layer(p[1], p[3], p.lexpos(1))

    def p_argument_list_opt(self, p):
        """
        argument_list_opt : empty
                          | argument_list
        """
        p[0] = p[1] if p[1] is not None else []

    def p_argument_list(self, p):
        """
        argument_list : argument
                      | argument_list COMMA argument
        """
        p[0] = self.handle_comma_separated_list(p)

    def p_argument(self, p):
        """
        argument : INTEGER
                 | DECIMAL
                 | ID
                 | pair
        """
        p[0] = p[1]

    def p_pair(self, p):
        """
        pair : LPAREN INTEGER COMMA INTEGER RPAREN
        """
        p[0] = (p[2], p[4])

    def p_empty(self, _):
        """
        empty :
        """

    def p_error(self, token):
        if token is None:
            raise ParseError("Model notation ends early; is a closing parenthesis missing?")
        text = self.lexer.lexdata
        raise ParseError(f"Unexpected '{token.value}' at column {token.lexpos} of the model:\n"
                         f"  {text}\n  {' ' * token.lexpos}^")


def parse(text):
    """Parse a model description into a list of Layer nodes.

    Raises:
      ParseError: If the text is not valid layer notation or is empty.
    """
    if not text or not text.strip():
        raise ParseError("Empty model description")
    return ModelParser().parse(text)
