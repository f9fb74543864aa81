"""Entry point for python -m flowdense."""

from flowdense.cli import main

if __name__ == "__main__":
    main()
