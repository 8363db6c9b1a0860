"""Test runner executed inside the sandbox child process.

Usage: python3 harness.py <job_file>

The job file is JSON: {"code", "entry_point", "tests", "limits"}. One JSON
verdict line per test is written to stdout:

    {"test_index", "status", "actual", "stderr_excerpt", "elapsed_ms"}

Exit codes: 0 protocol completed, 1 job unreadable, 2 internal harness fault.
A candidate that fails to compile yields a single runtime_error line with
test_index -1 and exit code 0.
"""

import copy
import io
import json
import math
import os
import signal
import sys
import time
import traceback

STDERR_CAP = 4096


class _Timeout(BaseException):
    pass


def _on_alarm(signum, frame):
    raise _Timeout()


def canonical(value):
    if isinstance(value, (list, tuple)):
        return [canonical(v) for v in value]
    if isinstance(value, dict):
        return {str(k): canonical(v) for k, v in value.items()}
    return value


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _close(actual, expected, tol):
    if _is_number(actual) and _is_number(expected):
        if actual == expected:
            return True
        diff = abs(actual - expected)
        return not math.isnan(diff) and diff <= tol
    if isinstance(actual, list) and isinstance(expected, list):
        return len(actual) == len(expected) and all(
            _close(a, e, tol) for a, e in zip(actual, expected)
        )
    if isinstance(actual, dict) and isinstance(expected, dict):
        return actual.keys() == expected.keys() and all(
            _close(actual[k], expected[k], tol) for k in actual
        )
    return actual == expected


def compare_values(actual, expected, comparison):
    try:
        actual, expected = canonical(actual), canonical(expected)
        if (comparison or {}).get("kind") == "float":
            return _close(actual, expected, float(comparison.get("abs_tol", 1e-6)))
        return actual == expected
    except Exception:
        return False


def _encode(value):
    try:
        json.dumps(canonical(value), allow_nan=False)
        return canonical(value)
    except Exception:
        return repr(value)


def _excerpt(text):
    data = text.encode("utf-8", "replace")
    if len(data) <= STDERR_CAP:
        return text
    return data[-STDERR_CAP:].decode("utf-8", "ignore")


def run(code, entry_point, tests, limit_s):
    proto = os.fdopen(os.dup(1), "w", buffering=1)
    devnull = os.open(os.devnull, os.O_WRONLY)
    os.dup2(devnull, 1)
    sys.stdout = io.StringIO()

    def emit(obj):
        proto.write(json.dumps(obj) + "\n")
        proto.flush()

    signal.signal(signal.SIGALRM, _on_alarm)
    namespace = {"__name__": "__candidate__"}
    sys.stderr = io.StringIO()
    try:
        signal.setitimer(signal.ITIMER_REAL, limit_s)
        try:
            exec(compile(code, "<candidate>", "exec"), namespace)
        finally:
            signal.setitimer(signal.ITIMER_REAL, 0)
        fn = namespace[entry_point]
        if not callable(fn):
            raise TypeError("%s is not callable" % entry_point)
    except BaseException:
        emit({
            "test_index": -1,
            "status": "runtime_error",
            "actual": None,
            "stderr_excerpt": _excerpt(traceback.format_exc()),
            "elapsed_ms": 0,
        })
        return 0

    for index, test in enumerate(tests):
        buf = io.StringIO()
        sys.stderr = buf
        actual = None
        start = time.monotonic()
        try:
            args = copy.deepcopy(test.get("input_args", []))
            signal.setitimer(signal.ITIMER_REAL, limit_s)
            try:
                result = fn(*args)
            finally:
                signal.setitimer(signal.ITIMER_REAL, 0)
            actual = _encode(result)
            ok = compare_values(result, test.get("expected_output"), test.get("comparison"))
            status = "pass" if ok else "wrong_answer"
        except _Timeout:
            status = "timeout"
        except BaseException:
            status = "runtime_error"
            buf.write(traceback.format_exc())
        elapsed = int((time.monotonic() - start) * 1000)
        emit({
            "test_index": index,
            "status": status,
            "actual": actual,
            "stderr_excerpt": _excerpt(buf.getvalue()),
            "elapsed_ms": elapsed,
        })
    return 0


def main(argv):
    if len(argv) != 2:
        sys.stderr.write("usage: harness.py <job_file>\n")
        return 1
    try:
        with open(argv[1], "r", encoding="utf-8") as f:
            job = json.load(f)
        code = job["code"]
        entry_point = job["entry_point"]
        tests = job["tests"]
        limit_ms = job.get("limits", {}).get("per_test_timeout_ms", 5000)
    except Exception:
        sys.stderr.write(traceback.format_exc())
        return 1
    real_stderr = sys.stderr
    try:
        return run(code, entry_point, tests, max(limit_ms, 1) / 1000.0)
    except Exception:
        real_stderr.write(traceback.format_exc())
        return 2


if __name__ == "__main__":
    sys.exit(main(sys.argv))
