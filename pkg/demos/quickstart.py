"""Multicast to two rings and read the merged stream through the public API.

Runs on the simulator, so it needs no sockets and finishes instantly.
"""
from mrpaxos.api import sim_handle
from mrpaxos.cluster import SimCluster
from mrpaxos.ring import RingConfig

ACC = ["proposer", "acceptor"]


def main():
    cluster = SimCluster(seed=7, groups=(1, 2))
    cfg = RingConfig(lam=1000.0, delta_t=0.005)
    for g in (1, 2):
        for k in range(3):
            cluster.add_node(10 * g + k, ACC, [g], ring_cfg=cfg)
    cluster.add_node(100, ["learner"], [1, 2], ring_cfg=cfg)
    # stop=0 keeps the client quiet except for explicit multicasts
    cluster.add_client(200, [1, 2], payload=lambda: b"", stop=0.0)

    amc = sim_handle(cluster, learner=100, client=200)
    sub = amc.subscribe([1, 2])
    for i in range(6):
        amc.multicast(1 + i % 2, f"hello {i}".encode())
    for _ in range(6):
        d = amc.next_delivery(sub, timeout=1.0)
        print(f"slot {d.global_slot:5d}  ring {d.group}  instance {d.ring_instance:3d}  {d.payload.decode()}")


if __name__ == "__main__":
    main()
