"""Sleep per subjob before init, then report release time and pid; optionally hang."""
import json
import os
import sys
import time

delay = float(sys.argv[1]) * int(os.environ.get("GRIDMP_SUBJOB", "0"))
hang = len(sys.argv) > 2 and sys.argv[2] == "hang"
time.sleep(delay)

import gridmp  # noqa: E402

rt = gridmp.init()
print(json.dumps({"rank": rt.rank, "release": rt.release_time, "pid": os.getpid()}), flush=True)
if hang:
    time.sleep(600)
rt.finalize()
