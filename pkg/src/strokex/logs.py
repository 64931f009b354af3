import json
import logging

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure(verbosity=0):

    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity > 1:
        level = logging.DEBUG

    logging.basicConfig(level=level, format=LOG_FORMAT)


class EpochLog:
    """Append-only JSON-lines training log, one object per epoch"""

    def __init__(self, path, resume=False):

        self.path = path
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not resume:
            self.path.write_text("")

    def write(self, record):

        with open(self.path, "a") as fp:
            fp.write(json.dumps(record, sort_keys=True) + "\n")

    def read(self):

        if not self.path.exists():
            return []
        with open(self.path) as fp:
            return [json.loads(line) for line in fp if line.strip()]
