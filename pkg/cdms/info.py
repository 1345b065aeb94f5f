import time

__version__ = "0.1.0"
__author__ = "CDMS developers"
__author_email__ = "cdms-dev@users.noreply.github.com"
__license__ = "Apache-2.0"
__copyright__ = f'Copyright (c) 2022-{time.strftime("%Y")}, {__author__}'
__homepage__ = "https://github.com/cdms-dev/cdms"
__docs__ = "Context data management over semantic P2P clusters, with a deterministic simulator for its experiments"
