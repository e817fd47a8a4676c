import numpy as np
import pytest

from anpvs.analysis import batch_loss, gradient_sign, loss_landscape_grid, read_landscape_csv, write_landscape_csv
from anpvs.errors import ContractError
from anpvs.nn import build_network


@pytest.fixture(scope="module")
def setup():
    net = build_network("mnist-small", np.random.default_rng(0), gate="mask")
    rng = np.random.default_rng(1)
    return net, rng.uniform(size=(6, 1, 28, 28)), np.arange(6)


class TestLandscape:
    def test_centre_is_clean_loss(self, setup):
        net, x, y = setup
        grid = loss_landscape_grid(net, x, y, 5, 0.3, np.random.default_rng(2))
        assert grid.loss[2, 2] == batch_loss(net, x, y)
        assert grid.loss.shape == (5, 5)
        np.testing.assert_allclose(grid.u, [-0.3, -0.15, 0.0, 0.15, 0.3])

    def test_zero_span_is_constant(self, setup):
        net, x, y = setup
        grid = loss_landscape_grid(net, x, y, 3, 0.0, np.random.default_rng(3))
        assert np.all(grid.loss == grid.loss[1, 1])

    def test_one_step_cell_is_fgsm(self, setup):
        net, x, y = setup
        grid = loss_landscape_grid(net, x, y, 5, 0.2, np.random.default_rng(4))
        step = grid.u[3]
        fgsm = np.clip(x + step * gradient_sign(net, x, y), 0.0, 1.0)
        assert grid.loss[3, 2] == batch_loss(net, fgsm, y)

    def test_seeded(self, setup):
        net, x, y = setup
        a = loss_landscape_grid(net, x, y, 3, 0.1, np.random.default_rng(5)).loss
        b = loss_landscape_grid(net, x, y, 3, 0.1, np.random.default_rng(5)).loss
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("n, span", [(4, 0.1), (0, 0.1), (3, -0.1)])
    def test_invalid(self, setup, n, span):
        net, x, y = setup
        with pytest.raises(ContractError):
            loss_landscape_grid(net, x, y, n, span, np.random.default_rng(0))

    def test_csv_round_trip(self, setup, tmp_path):
        net, x, y = setup
        grid = loss_landscape_grid(net, x, y, 3, 0.1, np.random.default_rng(6))
        write_landscape_csv(grid, tmp_path / "g.csv")
        assert (tmp_path / "g.csv").read_text().splitlines()[0] == "u,v,loss"
        back = read_landscape_csv(tmp_path / "g.csv")
        np.testing.assert_array_equal(back.loss, grid.loss)
        np.testing.assert_array_equal(back.u, grid.u)
