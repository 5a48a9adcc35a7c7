"""Evaluation: accuracy, caption metrics, embedding diagnostics, DG protocols and reports.

Protocol runners live in :mod:`gvrt.evalkit.protocols` (they depend on the trainer).
"""

from gvrt.evalkit.accuracy import evaluate_accuracy
from gvrt.evalkit.metrics import bleu4, rouge_l
from gvrt.evalkit.report import ResultsTable, aggregate_report

__all__ = ["evaluate_accuracy", "bleu4", "rouge_l", "ResultsTable", "aggregate_report"]
