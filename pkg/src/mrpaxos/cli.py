"""``mrp`` command line: simulation runs, reports, and TCP-mode processes."""
from __future__ import annotations

import argparse
import asyncio
import csv
import json
import logging
import os
import signal
import sys
from typing import Optional

from . import harness, scenarios_gen
from .errors import MRPError
from .scenario import APPS, node_settings, parse_toml, ring_settings

log = logging.getLogger("mrpaxos")


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _overrides(pairs) -> dict:
    """``a.b=1`` style overrides into a nested dict; values are parsed as TOML scalars."""
    out: dict = {}
    for pair in pairs or ():
        key, sep, raw = pair.partition("=")
        if not sep:
            raise SystemExit(f"bad --set {pair!r}, expected key=value")
        try:
            value = parse_toml(f"v = {raw}")["v"]
        except Exception:
            value = raw
        cur = out
        parts = key.split(".")
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = value
    return out


# -- simulation -----------------------------------------------------------

def cmd_sim_run(args) -> int:
    result = harness.run(args.scenario, args.seed, overrides=_overrides(args.set))
    manifest = harness.write_outputs(result, args.out)
    print(harness.report(args.out))
    if args.check:
        bad = {k: v for k, v in result.check().items() if v}
        for name, errs in sorted(bad.items()):
            for e in errs[:5]:
                print(f"VIOLATION {name}: {e}")
        if bad:
            return 1
    log.debug("manifest %s", json.dumps(manifest)[:200])
    return 0


def cmd_sim_list(args) -> int:
    from importlib import resources
    bundled = sorted(p.name[:-5] for p in resources.files("mrpaxos").joinpath("scenarios").iterdir()
                     if p.name.endswith(".toml"))
    print("bundled: " + " ".join(bundled))
    print("generated: " + " ".join(scenarios_gen.NAMES))
    return 0


def cmd_report(args) -> int:
    print(harness.report(args.dir))
    return 0


# -- TCP mode -------------------------------------------------------------

def _config(path: Optional[str]) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        return parse_toml(fh.read())


async def _serve_until(duration: Optional[float]) -> None:
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop.set)
        except (NotImplementedError, RuntimeError):
            pass
    try:
        await asyncio.wait_for(stop.wait(), duration)
    except asyncio.TimeoutError:
        pass


def cmd_registry(args) -> int:
    from . import tcp

    async def main():
        reg, addr = await tcp.start_registry(args.listen, _ints(args.groups),
                                             suspicion_timeout=args.suspicion_ms / 1000.0,
                                             check_interval=args.check_ms / 1000.0)
        print(f"registry {addr}", flush=True)
        await _serve_until(args.duration)
        await tcp.stop(reg)

    asyncio.run(main())
    return 0


def cmd_node(args) -> int:
    from . import tcp
    from .recovery import DirectoryStore

    data = _config(args.config)
    node_cfg, app_kind = node_settings(data)
    if "heartbeat_ms" not in (data.get("network") or {}):
        node_cfg.heartbeat_interval = 0.5
    ring_cfg = ring_settings(data)
    store = DirectoryStore(args.store) if args.store else None

    async def main():
        proc = await tcp.start_node(args.id, args.roles.split(","), _ints(args.rings), listen=args.listen,
                                    registry=args.registry, ring_cfg=ring_cfg, cfg=node_cfg,
                                    app_factory=APPS[app_kind], store=store, recover=args.recover)
        print(f"node {args.id} {proc.address}", flush=True)
        await _serve_until(args.duration)
        if args.out:
            _write_deliveries(args.out, proc.trace.deliveries.get(args.id, []))
        if proc.app is not None:
            print(f"state {proc.state_hash()}", flush=True)
        print(f"delivered {proc.delivered}", flush=True)
        await tcp.stop(proc)

    asyncio.run(main())
    return 0


def _write_deliveries(path: str, recs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_s", "ring", "instance", "global_slot", "client", "seq"])
        for t, g, inst, gs, mid, _ in recs:
            w.writerow([f"{t:.6f}", g, inst, gs, mid.client if mid else "", mid.seq if mid else ""])


def cmd_client(args) -> int:
    from . import tcp

    blob = b"\xab" * args.size

    async def main():
        client = await tcp.start_client(args.id, _ints(args.group), listen=args.listen, registry=args.registry,
                                        payload=lambda: blob, threads=args.threads, duration=args.duration,
                                        resubmit_timeout=args.resubmit_ms / 1000.0)
        await asyncio.sleep(args.duration + 0.5)
        lat = client.latencies
        if args.out:
            with open(args.out, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["latency_ms"])
                for x in lat:
                    w.writerow([f"{x * 1000.0:.3f}"])
        rate = len(lat) / args.duration if args.duration else 0.0
        print(f"client {args.id}: {len(lat)} replies, {rate:.1f} msg/s", flush=True)
        if lat:
            from .metrics import percentiles
            pct = percentiles(lat)
            print("latency " + "  ".join(f"p{q}={v * 1000:.3f}ms" for q, v in pct.items()), flush=True)
        await tcp.stop(client)

    asyncio.run(main())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrp", description="Multi-ring atomic multicast")
    sub = p.add_subparsers(dest="cmd", required=True)

    sim = sub.add_parser("sim", help="simulation mode").add_subparsers(dest="sim_cmd", required=True)
    run = sim.add_parser("run", help="run a scenario file or bundled/generated name")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default="out")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a scenario key")
    run.add_argument("--check", action="store_true", help="run the trace oracles, exit 1 on a violation")
    run.set_defaults(fn=cmd_sim_run)
    ls = sim.add_parser("list", help="list scenario names")
    ls.set_defaults(fn=cmd_sim_list)

    rep = sub.add_parser("report", help="summarise a run directory")
    rep.add_argument("dir")
    rep.set_defaults(fn=cmd_report)

    reg = sub.add_parser("registry", help="run the membership registry (TCP mode)")
    reg.add_argument("--listen", default="127.0.0.1:7000")
    reg.add_argument("--groups", required=True, help="comma separated ring ids")
    reg.add_argument("--suspicion-ms", type=float, default=2000.0)
    reg.add_argument("--check-ms", type=float, default=200.0)
    reg.add_argument("--duration", type=float, default=None)
    reg.set_defaults(fn=cmd_registry)

    node = sub.add_parser("node", help="run a replica process (TCP mode)")
    node.add_argument("--id", type=int, required=True)
    node.add_argument("--roles", default="proposer,acceptor,learner")
    node.add_argument("--rings", required=True)
    node.add_argument("--registry", default="127.0.0.1:7000")
    node.add_argument("--listen", default="127.0.0.1:0")
    node.add_argument("--config", help="TOML with [pacing], [ring], [app], [checkpoint], [network]")
    node.add_argument("--store", help="shared checkpoint directory")
    node.add_argument("--recover", choices=["new", "old"], help="rejoin as a recovering learner")
    node.add_argument("--duration", type=float, default=None)
    node.add_argument("--out", help="write this learner's deliveries as CSV on exit")
    node.set_defaults(fn=cmd_node)

    cl = sub.add_parser("client", help="closed-loop client (TCP mode)")
    cl.add_argument("--id", type=int, required=True)
    cl.add_argument("--group", default="1", help="ring id, or a comma separated list to spread over")
    cl.add_argument("--size", type=int, default=200)
    cl.add_argument("--threads", type=int, default=1)
    cl.add_argument("--duration", type=float, default=10.0)
    cl.add_argument("--resubmit-ms", type=float, default=2000.0)
    cl.add_argument("--registry", default="127.0.0.1:7000")
    cl.add_argument("--listen", default="127.0.0.1:0")
    cl.add_argument("--out", help="write latency samples (ms) as CSV")
    cl.set_defaults(fn=cmd_client)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MRP_LOG", "WARNING").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except MRPError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
