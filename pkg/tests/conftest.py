import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from flowrefine.data import MoleculeRecord, ToyDatasetSpec, synth_dataset
from flowrefine.interpolant import Schedule
from flowrefine.model import ModelConfig, VelocityModel, init_model
from flowrefine.pipeline import TrainConfig, train_generator, train_refiner

# toy training recipe shared by the pipeline tests and the acceptance gate
HIDDEN = 32
EPOCHS = 300
LR = 2e-3
LR_FINAL = None
SIGMA_GEN = 1.5
SIGMA_REF = 1.0
PER_REFERENCE = 2


@dataclass
class ToyModels:
    generator: VelocityModel
    refiner: VelocityModel
    sigma_gen: float
    train_records: list[MoleculeRecord]
    eval_records: list[MoleculeRecord]
    train_seconds: float
    histories: dict = field(default_factory=dict)

    def per_molecule(self, rec: MoleculeRecord) -> int:
        return PER_REFERENCE * len(rec.references)

    @property
    def eval_graphs(self):
        return [rec.graph for rec in self.eval_records for _ in range(self.per_molecule(rec))]


@pytest.fixture(scope="session")
def toy_models() -> ToyModels:
    start = time.perf_counter()
    train = synth_dataset(ToyDatasetSpec(seed=0))
    evald = synth_dataset(ToyDatasetSpec(n_molecules=20, seed=1, id_prefix="eval"))
    mcfg = ModelConfig(hidden=HIDDEN)
    gen, h_gen = train_generator(
        train, init_model(mcfg, np.random.default_rng(1)),
        TrainConfig(sigma=SIGMA_GEN, epochs=EPOCHS, lr=LR, lr_final=LR_FINAL, schedule=Schedule("generator_gaussian")),
        np.random.default_rng(2),
    )
    ref, h_ref = train_refiner(
        train, init_model(mcfg, np.random.default_rng(3)),
        TrainConfig(sigma=SIGMA_REF, epochs=EPOCHS, lr=LR, lr_final=LR_FINAL),
        np.random.default_rng(4),
    )
    return ToyModels(gen, ref, SIGMA_GEN, train, evald, time.perf_counter() - start, {"generator": h_gen, "refiner": h_ref})


# --- acceptance reporting: one pass/fail line per criterion in the terminal summary ---

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = mark.args
        detail = dict(item.user_properties).get("detail", "")
        if not rep.passed and not detail:
            detail = "error before the checks completed" if rep.when == "setup" else "assertion failed"
        ACCEPTANCE[number] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
