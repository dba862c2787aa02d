"""Observability utils"""
import logging
import sys

from aws_lambda_powertools import Logger
from src.config import runtime_settings

# Machine-readable outputs go to files; structured logs go to stderr.
logger: Logger = Logger(
    service="rekd",
    level=runtime_settings.log_level,
    logger_handler=logging.StreamHandler(sys.stderr),
)
