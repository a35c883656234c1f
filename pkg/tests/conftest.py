import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def tiny_config_dict(**changes):
    """A config that runs every stage in a few seconds."""
    d = {
        "name": "tiny",
        "task": "mortality",
        "data": {"synth": {"n_patients": 120, "pairing_rate": 0.5, "max_episodes": 1, "image_size": 64}},
        "preprocess": {"augment": {"resize_to": 32, "crop": 28}},
        "encoders": {"ehr": {"hidden": 16}, "img": {"width_mult": 0.0625, "blocks": [1, 1, 1, 1]},
                     "epochs": 2, "ehr_lr": 1e-3, "img_lr": 1e-3},
        "fusion": {"kind": "attention", "dim": 16, "heads": 2, "ff_dim": 32, "layers": 1},
        "finetune": {"epochs": 2, "lr": 1e-3},
    }
    d.update(changes)
    return d


@pytest.fixture
def tiny_config():
    return tiny_config_dict()


# --- acceptance summary: one PASS/FAIL line per criterion ---------------------

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    _ACCEPTANCE[props["criterion"]] = (report.outcome == "passed", props.get("title", ""), props.get("detail", ""),
                                      report.duration)


def pytest_runtest_setup(item):
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        number, title = marker.args
        item.user_properties.append(("criterion", number))
        item.user_properties.append(("title", title))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, title, detail, seconds = _ACCEPTANCE[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(f"{line}  ({seconds:.1f}s)")
