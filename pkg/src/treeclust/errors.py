"""Exception hierarchy; every error carries the exit code the CLI maps it to."""


class TreeclustError(Exception):
    exit_code = 1


class ConfigError(TreeclustError, ValueError):
    exit_code = 2


class DataError(TreeclustError, ValueError):
    exit_code = 4


class NoCentersError(DataError):
    def __init__(self, msg: str = "no centers"):
        super().__init__(msg)


class BudgetExhaustedError(TreeclustError, RuntimeError):
    exit_code = 2


class MemoryOverflowError(TreeclustError, RuntimeError):
    exit_code = 3

    def __init__(self, round_index: int, machine: int, words: float, capacity: float):
        self.round_index = round_index
        self.machine = machine
        self.words = words
        self.capacity = capacity
        super().__init__(f"memory overflow at round {round_index}, machine {machine}")
