"""
Exceptions raised by the bench.

Every error that is expected to reach the command line derives from `BenchError`.
The CLI maps `UsageError` to exit code 2, and everything else to exit code 1.
"""


class BenchError(Exception):
    pass


class UsageError(BenchError):
    pass


class RejectedInputError(BenchError, ValueError):
    pass


class UnsupportedLayerError(BenchError):
    pass


class ModelFormatError(BenchError):

    def __init__(self, field: str, detail: str = ''):
        self.field = field
        super().__init__(f'{field}: {detail}' if detail else field)


class DatasetLoadError(BenchError):

    def __init__(self, sample: str, detail: str):
        self.sample = sample
        super().__init__(f'{sample}: {detail}')


class GenerationError(BenchError):
    pass


class TrainingError(BenchError):
    pass


class UndefinedMassError(BenchError, ValueError):
    pass


class ReportMismatchError(BenchError):

    def __init__(self, cells: list[str]):
        self.cells = cells
        super().__init__('Result sets do not cover identical cells: ' + ', '.join(cells))
