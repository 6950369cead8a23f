#!/usr/bin/env python3
"""
Test runner script for the HATK test suite.
Provides convenient commands for running different test categories.
"""

import subprocess
import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parent.parent


def run_tests(args):
    """Run pytest with given arguments"""
    cmd = [sys.executable, "-m", "pytest", "-c", str(PROJECT_ROOT / "tests" / "pytest.ini"),
           "--rootdir", str(PROJECT_ROOT)] + args
    result = subprocess.run(cmd, cwd=PROJECT_ROOT)
    return result.returncode


def main():
    """Main entry point"""
    if len(sys.argv) < 2:
        print("""
HATK Test Runner
═══════════════════════════════════════════════════════════════

Usage: ./tools/run_tests.py [command] [options]

Commands:
  all            Run all tests
  quick          Run fast tests only (excludes slow)
  acceptance     Run the published-sparsity and oracle acceptance tests
  engine         Run attention engine and gradient tests
  cli            Run CLI and sweep tests
  verbose        Run all tests with verbose output

Examples:
  ./tools/run_tests.py all
  ./tools/run_tests.py quick -x
  ./tools/run_tests.py acceptance -v

See pytest --help for more options.
═══════════════════════════════════════════════════════════════
        """)
        return 1

    command = sys.argv[1]
    extra_args = sys.argv[2:]

    commands = {
        'all': ['tests'] + extra_args,
        'quick': ['tests', '-m', 'not slow'] + extra_args,
        'acceptance': ['tests', '-m', 'acceptance'] + extra_args,
        'engine': ['tests/test_attention_engine.py', 'tests/test_attention_backward.py'] + extra_args,
        'cli': ['tests/test_cli.py', 'tests/test_sweep.py'] + extra_args,
        'verbose': ['tests', '-v'] + extra_args,
    }

    if command not in commands:
        print(f"Unknown command: {command}")
        print("Available commands: " + ", ".join(commands.keys()))
        return 1

    return run_tests(commands[command])


if __name__ == "__main__":
    sys.exit(main())
