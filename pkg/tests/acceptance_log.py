"""Shared record of acceptance-criterion outcomes, printed by conftest at the end of the run."""

TITLES = {
    1: "gradient suite",
    2: "attention oracle",
    3: "closed-form loss values",
    4: "weight-sharing invariant",
    5: "dual-task probe",
    6: "ablation ordering (full vs w/o PTM)",
    7: "smoke training gain",
    8: "metric oracles",
    9: "parameter budget",
    10: "determinism",
}

details = {}


def note(n, text):
    details[n] = text
