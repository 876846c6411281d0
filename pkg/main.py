# Thin entrypoint: all logic lives in the latree/ package.
from latree.cli import main

if __name__ == "__main__":
    main()
