import json

import config
from evaluate import score

reward = score(tuple(config.X))
with open("metrics.jsonl", "w") as f:
    f.write(json.dumps({"step": 0, "name": "reward", "value": reward}) + "\n")
print(f"x={tuple(config.X)} reward={reward!r}")
