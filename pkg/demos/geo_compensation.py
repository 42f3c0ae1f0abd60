"""Five regions with a global ring, with and without latency compensation."""
from mrpaxos import harness, metrics
from mrpaxos.scenarios_gen import geo


def main():
    for comp in (False, True):
        r = harness.run(geo(True, comp), 1)
        p = r.percentiles
        steps = metrics.cdf_steps(r.latencies)
        print(f"compensation {'on ' if comp else 'off'}: p50 {p[50] * 1e3:7.1f} ms  "
              f"p90 {p[90] * 1e3:7.1f} ms  CDF steps at {[s[0] for s in steps]} ms")


if __name__ == "__main__":
    main()
