"""
Console logging setup

Keeps the toolkit's console texture: a [HH:MM:SS] stamp, then the message with its
own status tag ([OK], [WARN], [FAIL], [INFO]).
"""

import logging
import sys

LOG_FORMAT = '[%(asctime)s] %(message)s'
DATE_FORMAT = '%H:%M:%S'


def setup_logging(verbose=False):
    """Install the stdout handler on the package logger"""
    logger = logging.getLogger('rded')
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    console = [h for h in logger.handlers if getattr(h, '_rded_console', False)]
    if console:
        # sys.stdout may have been swapped since the first call
        console[0].setStream(sys.stdout)
    else:
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(logging.Formatter(LOG_FORMAT, DATE_FORMAT))
        handler._rded_console = True
        logger.addHandler(handler)
    logger.propagate = False
    return logger
