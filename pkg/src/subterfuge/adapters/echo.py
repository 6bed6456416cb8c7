"""Reference adapter for exercising the external-detector protocol.

    python -m subterfuge.adapters.echo --score 0.9
    python -m subterfuge.adapters.echo --marker deadbeef1337

By default every SCAN is answered with ``SCORE <--score>``. The other flags
inject faults so the engine's timeout, crash and error handling can be tested.
"""

import argparse
import os
import sys
import time


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--score", type=float, default=0.5)
    ap.add_argument("--decision", choices=["malicious", "benign"])
    ap.add_argument("--raw", help="reply with this exact line")
    ap.add_argument("--error", help="reply ERROR <message>")
    ap.add_argument("--marker", help="hex bytes; score 1.0 iff the file contains them")
    ap.add_argument("--hang", action="store_true", help="never answer SCAN")
    ap.add_argument("--no-ready", action="store_true")
    ap.add_argument("--ready-delay", type=float, default=0.0)
    ap.add_argument("--crash-once", metavar="STATEFILE",
                    help="exit abruptly on the first SCAN if STATEFILE does not exist yet")
    ap.add_argument("--crash-after", type=int, default=0,
                    help="exit abruptly on the Nth SCAN of every process lifetime")
    args = ap.parse_args(argv)

    out = sys.stdout
    if args.ready_delay:
        time.sleep(args.ready_delay)
    if not args.no_ready:
        out.write("READY\n")
        out.flush()
    marker = bytes.fromhex(args.marker) if args.marker else None
    seen = 0
    for line in sys.stdin:
        cmd, _, rest = line.strip().partition(" ")
        if cmd == "QUIT":
            return 0
        if cmd != "SCAN":
            out.write(f"ERROR unknown command {cmd}\n")
            out.flush()
            continue
        seen += 1
        if args.crash_once and not os.path.exists(args.crash_once):
            open(args.crash_once, "w").close()
            os._exit(3)
        if args.crash_after and seen >= args.crash_after:
            os._exit(3)
        if args.hang:
            continue
        if args.raw is not None:
            reply = args.raw
        elif args.error is not None:
            reply = f"ERROR {args.error}"
        elif args.decision:
            reply = f"DECISION {args.decision.upper()}"
        elif marker is not None:
            try:
                with open(rest, "rb") as fh:
                    found = marker in fh.read()
            except OSError as exc:
                out.write(f"ERROR {exc}\n")
                out.flush()
                continue
            reply = f"SCORE {1.0 if found else 0.0}"
        else:
            reply = f"SCORE {args.score}"
        out.write(reply + "\n")
        out.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
