import os
import sys

# ctest points this at <build>/python, where the staged package lives
stage = os.environ.get("UNLEARNLAB_PY_STAGE")
if stage and stage not in sys.path:
    sys.path.insert(0, stage)
