from dotenv import load_dotenv
import os
import sys

from services.distributed import ping_workers
from services.transport import parse_roster

# 1. Load Environment Variables
load_dotenv()
roster_text = sys.argv[1] if len(sys.argv) > 1 else os.getenv("DCSMC_WORKERS", "")


def check_workers():
    print("--- DC-SMC Worker Roster Check ---\n")

    roster = parse_roster(roster_text)
    if not roster:
        print("❌ Error: no workers given.")
        print("   Pass host:port,host:port or set DCSMC_WORKERS in your .env file")
        return 1

    print(f"📡 Pinging {len(roster)} worker(s)...")
    try:
        status = ping_workers(roster)
    except Exception as e:
        print(f"\n❌ Unexpected Error: {e}")
        return 1

    for address, alive in status.items():
        print(f"   {'✅' if alive else '❌'} {address}")

    down = [a for a, alive in status.items() if not alive]
    if down:
        print(f"\n⚠️ {len(down)} worker(s) did not answer. Start them with: python app.py worker --bind <address>")
        return 1
    print("\n✅ Success! Every worker answered.")
    return 0


if __name__ == "__main__":
    sys.exit(check_workers())
