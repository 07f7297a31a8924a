import os

os.environ.setdefault("OMP_NUM_THREADS", "1")  # small matrices; threading only adds noise

from hypothesis import settings  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_terminal_summary(terminalreporter):
    status, titles = {}, {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            if "criterion" not in props or (outcome == "passed" and rep.when != "call"):
                continue
            n = props["criterion"]
            titles[n] = props["title"]
            status[n] = status.get(n, True) and outcome == "passed"
    if status:
        terminalreporter.section("acceptance criteria")
        for n in sorted(status):
            terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if status[n] else 'FAIL'}  {titles[n]}")
