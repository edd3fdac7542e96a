import logging

CORE_LOG = logging.getLogger("core")
DATA_LOG = logging.getLogger("data")
NN_LOG = logging.getLogger("nn")
TRAIN_LOG = logging.getLogger("train")
SEL_LOG = logging.getLogger("select")
LOOP_LOG = logging.getLogger("loop")
REPORT_LOG = logging.getLogger("report")
