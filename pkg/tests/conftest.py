import numpy as np
import pytest

from battpinn import pinn, synth

# logistic inverse problem: r=0.01/cycle, K=0.5, C=0.05, u0=0.1, 3 cells x 500 cycles
TRUTH = {"r": 0.01, "K": 0.5, "C": 0.05}
INVERSE_CONFIG = dict(epochs=2000, batch_size=256, lr=3e-3, dropout=0.0, balancing="adpbal",
                      dynamics="verhulst", verhulst_init={"r": 0.02, "K": 0.7, "C": 0.02},
                      verhulst_u0=0.1, features=())


@pytest.fixture(scope="session")
def logistic_data():
    table, truth = synth.generate_dataset(cells=3, noise_std=1e-3, seed=0, n_cycles=500,
                                          truncate_at_eol=False)
    return table, truth


@pytest.fixture(scope="session")
def logistic_inverse_run(logistic_data):
    """Trained PINN-Verhulst on cells 1-2 and its held-out standardized RMSE on cell 3."""
    table, truth = logistic_data
    train = table.only_cells(["sim001", "sim002"])
    held = table.only_cells(["sim003"])
    model = pinn.train(train, pinn.TrainConfig(seed=0, **INVERSE_CONFIG))
    err = (model.predict_table(held) - truth["sim003"]["pcl"]) / model.factors.u_std
    return model, float(np.sqrt(np.mean(err ** 2)))
