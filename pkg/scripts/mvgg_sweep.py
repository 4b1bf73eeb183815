#!/usr/bin/env python3
"""Energy/throughput frontier of the grouped VGG family.

Sweeps grouping factors against every operating point and prints one
row per (network, mode) pair that fits, so the frontier between
scratchpad-resident, marshalled, SRAM-direct and off-chip placements
is visible at a glance.

    python3 scripts/mvgg_sweep.py
    python3 scripts/mvgg_sweep.py --groups 1 2 8 f --csv
"""

import argparse

from xnesim.errors import CapacityError, PlanError
from xnesim.networks import make_mvgg
from xnesim.runner import run_network

MODES = ("scm-0v4", "scm-0v5", "marshal-0v6", "sram-0v6", "hyperram")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--groups", nargs="*", default=["1", "2", "4", "8", "f"])
    ap.add_argument("--tp", type=int, default=128)
    ap.add_argument("--csv", action="store_true")
    args = ap.parse_args()

    if args.csv:
        print("network,kib,mode,energy_uj,time_ms,fps,gops")
    else:
        print(f"{'network':<9}{'KiB':>8}{'mode':>13}{'E[uJ]':>10}"
              f"{'t[ms]':>9}{'fps':>8}{'Gop/s':>7}")
    for tag in args.groups:
        net = make_mvgg(tag if tag == "f" else int(tag))
        kib = net.packed_param_bits / 8 / 1024
        for mode in MODES:
            try:
                rep = run_network(net, mode, tp=args.tp)
            except (CapacityError, PlanError):
                if not args.csv:
                    print(f"{net.name:<9}{kib:>8.2f}{mode:>13}"
                          f"{'-':>10}{'-':>9}{'-':>8}{'-':>7}")
                continue
            e = rep.energy.total_j * 1e6
            t = rep.total_seconds * 1e3
            gops = rep.total_ops / rep.total_seconds / 1e9
            if args.csv:
                print(f"{net.name},{kib:.2f},{mode},{e:.4f},{t:.4f},"
                      f"{rep.fps:.2f},{gops:.3f}")
            else:
                print(f"{net.name:<9}{kib:>8.2f}{mode:>13}{e:>10.3f}"
                      f"{t:>9.2f}{rep.fps:>8.2f}{gops:>7.2f}")


if __name__ == "__main__":
    main()
