"""
Worker Console
--------------
The `worker` verb: binds a socket inbox and serves distributed tasks until
a stop message arrives or the process is interrupted.
"""

from config.constants import MESSAGES
from config.settings import WORKER_BIND
from services.distributed import WorkerRuntime
from services.transport import SocketTransport
from utils.logger import dcsmc_logger


def run_worker(bind=None):
    """
    Serve tasks on `bind` (DCSMC_BIND by default).

    Returns:
        number of tasks handled
    """
    bind = bind or WORKER_BIND
    with SocketTransport(bind) as transport:
        dcsmc_logger.info(MESSAGES["WORKER_READY"].format(address=transport.address))
        try:
            return WorkerRuntime(transport).serve()
        except KeyboardInterrupt:
            dcsmc_logger.info("Worker interrupted")
            return 0
