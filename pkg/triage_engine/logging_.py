#!/usr/bin/env python
# -*- coding:utf-8 -*-
import logging
import sys

import colorlog

USE_LOGGING = True
LOGLEVEL = logging.INFO
LOG_FORMAT = '%(log_color)s%(asctime)s %(levelname)-8s %(filename)s:%(lineno)-4d %(message)s'
LOG_COLORS = {
    'DEBUG': 'cyan',
    'INFO': 'green',
    'WARNING': 'bold_yellow',
    'ERROR': 'bold_red',
    'CRITICAL': 'bold_purple',
}


def logger_config(name: str = 'triage_engine') -> logging.Logger:
    """Attach a single colour console handler to the named logger.
    Calling it twice does not duplicate handlers."""
    log = logging.getLogger(name)
    if any(getattr(h, '_triage_engine', False) for h in log.handlers):
        return log
    handler = colorlog.StreamHandler(sys.stderr)
    handler.setFormatter(colorlog.ColoredFormatter(LOG_FORMAT, log_colors=LOG_COLORS))
    handler._triage_engine = True
    log.addHandler(handler)
    log.propagate = False
    return log


def set_level(level: int) -> None:
    logging.getLogger('triage_engine').setLevel(level)


if USE_LOGGING:
    log = logger_config(name='triage_engine')
    log.setLevel(LOGLEVEL)
else:
    # deactivate all log calls for use as a library
    logging.getLogger('triage_engine').addHandler(logging.NullHandler())
