"""Independent reference implementations used as test oracles.

Nothing here imports the production merge or recovery code.
"""
from __future__ import annotations


def reference_merge(rings, m):
    """Brute-force round-robin over unit slots.

    ``rings`` is a list (ascending group order) of lists of ("app", [payloads])
    or ("skip", n).  Returns [(global_slot, ring_index, instance, payload)].
    """
    expanded = []
    for values in rings:
        slots = []
        for inst, (kind, content) in enumerate(values):
            if kind == "app":
                slots.extend((inst, bytes(p)) for p in content)
            else:
                slots.extend((inst, None) for _ in range(content))
        expanded.append(slots)
    k = len(rings)
    used = [0] * k
    out = []
    g = 0
    while True:
        turn = (g // m) % k
        if used[turn] >= len(expanded[turn]):
            break
        inst, payload = expanded[turn][used[turn]]
        used[turn] += 1
        if payload is not None:
            out.append((g, turn, inst, payload))
        g += 1
    return out, used, g


def serialize(rows):
    return b"".join(
        g.to_bytes(8, "big") + r.to_bytes(2, "big") + i.to_bytes(8, "big")
        + len(p).to_bytes(4, "big") + p
        for g, r, i, p in rows
    )


def reference_ewma(samples, weight=0.1):
    est = 0.0
    for s in samples:
        est = est * (1 - weight) + s * weight
    return est
