# -*- coding: utf-8 -*-
"""Jerarquía de errores del motor. El atributo exit_code lo usa el CLI."""


class EngineError(Exception):
    exit_code = 2


class SchemaError(EngineError):
    exit_code = 2


class NotFoundError(EngineError, KeyError):
    exit_code = 2

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DomainError(EngineError, ValueError):
    exit_code = 2


class EmptyResultError(EngineError):
    exit_code = 2


class BudgetError(EngineError):
    exit_code = 2


class ConfigError(EngineError):
    exit_code = 1


class UsageError(EngineError):
    exit_code = 1


class NumericError(EngineError, ArithmeticError):
    exit_code = 3


class ConvergenceWarning(UserWarning):
    pass
