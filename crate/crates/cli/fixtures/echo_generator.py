#!/usr/bin/env python3
"""Test generator speaking the line protocol on stdin/stdout.

Reads one request {"q": [...], "n_obs": N, "seed": S} and replies with N
normal outcomes centered at q[0] (unit variance), seeded by S.

Flags:
  --fail   print a message to stderr and exit 1
  --short  return one observation fewer than requested
  --junk   reply with text that is not JSON
"""
import json
import random
import sys


def main():
    req = json.loads(sys.stdin.readline())
    if "--fail" in sys.argv:
        print("echo_generator: refusing request as instructed", file=sys.stderr)
        return 1
    if "--junk" in sys.argv:
        print("not json")
        return 0
    n = req["n_obs"] - (1 if "--short" in sys.argv else 0)
    rng = random.Random(req["seed"])
    mu = req["q"][0]
    obs = [[mu + rng.gauss(0.0, 1.0)] for _ in range(n)]
    json.dump({"observations": obs}, sys.stdout)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
