from src.cli import main

if __name__ == "__main__":
    # Same entry point as the installed `posetrack` script.
    main()
