"""Line-protocol noise-selection backend used by the tests.

usage: llm_stub.py MODE [REPLY]

MODE is ``reply`` (answer every request with REPLY), ``wrong-id``,
``garbage`` or ``die`` (exit before answering).
"""

import json
import sys


def main():
    mode = sys.argv[1]
    reply = sys.argv[2] if len(sys.argv) > 2 else ""
    for line in sys.stdin:
        req = json.loads(line)
        if mode == "die":
            return 3
        if mode == "garbage":
            out = "not json"
        elif mode == "wrong-id":
            out = json.dumps({"id": "nope", "classes": reply})
        else:
            out = json.dumps({"id": req["id"], "classes": reply})
        sys.stdout.write(out + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
