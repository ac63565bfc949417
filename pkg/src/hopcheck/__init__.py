"""KG-grounded verification for multi-hop QA.

Two halves: an offline benchmark verification pipeline that builds a
localized knowledge graph per question and flags instances with no
grounded reasoning path, and an online generator/evaluator loop that
validates each atomic reasoning step against an error taxonomy.
"""

__version__ = "0.1.0"
