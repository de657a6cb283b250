from importlib.metadata import version, PackageNotFoundError
import json
import pathlib
import time
import logging
import logging.config


logger = logging.getLogger("root_logger")

try:
    __version__ = version("xlinfluence")
except PackageNotFoundError:
    __version__ = "0+unknown"

with open(pathlib.Path(pathlib.Path(__file__).parent, "logging_conf.json")) as _conf:
    log_configuration_dict = json.load(_conf)
logging.config.dictConfig(log_configuration_dict)
logging.Formatter.converter = time.gmtime
