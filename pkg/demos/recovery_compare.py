"""Crash a KV replica under load and compare the two recovery protocols.

Prints throughput of an always-up replica in half-second windows, then the
fetch counts and whether the recovered replica's state matches.
"""
import sys

from mrpaxos import harness, metrics
from mrpaxos.scenarios_gen import recovery


def main(seed=1):
    for protocol in ("new", "old"):
        r = harness.run(recovery(protocol), seed)
        tl = metrics.timeline_for(r.trace.deliveries[100], window=0.5)
        per_window = [m for _, g, m, _ in tl.rows(r.scenario.duration) if g == "1"]
        events = {k: round(t, 2) for t, k, d in r.trace.events
                  if k in ("crash", "restart", "live") and d.startswith("node=102")}
        hashes = r.trace.state_hashes
        print(f"{protocol}: events {events}")
        print(f"  msgs per 0.5 s: {per_window}")
        print(f"  recovery fetches {r.trace.recovery_fetches.get(102, 0)}, "
              f"served by acceptors {sum(r.trace.fetch_served.values())}, "
              f"state matches {hashes.get(102) == hashes.get(100)}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 1)
