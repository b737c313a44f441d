"""Allow ``python3 -m ilgd <subcommand> --config ...``."""

from .cli import main

if __name__ == "__main__":
    raise SystemExit(main())
