import numpy as np
import pytest

from cyclevae.generation import (
    ImageGrid,
    conditional_sample,
    grid_filename,
    interpolation_grid,
    quantize,
    read_image,
    reconstruction,
    swap_grid,
    tile,
    write_image,
)
from cyclevae.model import ModelConfig, decode, encode, init_params
from cyclevae.tensor import no_grad

SMALL = ModelConfig(image_channels=1, image_size=28, z_dim=4, s_dim=3, trunk_channels=(4, 6, 8), branch_width=16)


@pytest.fixture(scope="module")
def params():
    return init_params(SMALL, seed=2, dtype=np.float32)


@pytest.fixture(scope="module")
def sources():
    return np.random.default_rng(0).random((5, 1, 28, 28)).astype(np.float32)


def parse_pgm(raw: bytes) -> np.ndarray:
    """Independent raw-PGM (P5) reader: magic, width, height, maxval, one whitespace, bytes."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    assert tokens[0] == b"P5" and int(tokens[3]) == 255
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1 :]
    assert len(body) == w * h
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------- swap


def test_swap_grid_layout(params, sources):
    grid = swap_grid(sources[:3], sources[3:], params)
    assert (grid.rows, grid.cols) == (3, 4)
    assert grid.cells.shape == (2, 3, 1, 28, 28)
    np.testing.assert_array_equal(grid.layout()[0, 1:], sources[:3])
    np.testing.assert_array_equal(grid.layout()[1:, 0], sources[3:])


def test_swap_grid_diagonal_is_reconstruction(params, sources):
    grid = swap_grid(sources, sources, params)
    for i, x in enumerate(sources):
        np.testing.assert_array_equal(grid.cells[i, i], reconstruction(x, params))


def test_swap_grid_cell_formula_and_determinism(params, sources):
    grid = swap_grid(sources[:2], sources[2:4], params)
    with no_grad():
        mu = encode(sources[3:4], params).mu.data
        s = encode(sources[1:2], params).s.data
        expected = decode(mu, s, params).data[0]
    np.testing.assert_array_equal(grid.cells[1, 1], expected)
    again = swap_grid(sources[:2], sources[2:4], params)
    assert again.cells.tobytes() == grid.cells.tobytes()


def test_swap_grid_rejects_empty(params, sources):
    with pytest.raises(ValueError):
        swap_grid(sources[:0], sources, params)


# ---------------------------------------------------------------- interpolation


def test_interpolation_corners_and_midpoint(params, sources):
    a, b = sources[0], sources[1]
    grid = interpolation_grid(a, b, 5, params)
    assert grid.cells.shape[:2] == (5, 5)
    np.testing.assert_array_equal(grid.cells[0, 0], reconstruction(a, params))
    np.testing.assert_array_equal(grid.cells[4, 4], reconstruction(b, params))
    with no_grad():
        ca, cb = encode(a[None], params), encode(b[None], params)
        mid = decode((ca.mu.data + cb.mu.data) / 2, (ca.s.data + cb.s.data) / 2, params).data[0]
    np.testing.assert_array_equal(grid.cells[2, 2], mid)


def test_interpolation_same_endpoints_constant(params, sources):
    grid = interpolation_grid(sources[2], sources[2], 4, params)
    for cell in grid.cells.reshape(-1, 1, 28, 28):
        np.testing.assert_array_equal(cell, grid.cells[0, 0])


def test_interpolation_steps(params, sources):
    assert interpolation_grid(sources[0], sources[1], 8, params).rows == 8
    with pytest.raises(ValueError):
        interpolation_grid(sources[0], sources[1], 1, params)


# ---------------------------------------------------------------- conditional sampling


def test_conditional_sample_determinism_and_shape(params, sources):
    grid, draws = conditional_sample(sources[:3], 4, params, np.random.default_rng(9))
    again, draws2 = conditional_sample(sources[:3], 4, params, np.random.default_rng(9))
    assert grid.cells.shape[:2] == (3, 4)
    assert (grid.rows, grid.cols) == (3, 5)
    assert grid.cells.tobytes() == again.cells.tobytes()
    np.testing.assert_array_equal(draws, draws2)
    with no_grad():
        s = encode(sources[1:2], params).s.data
        expected = decode(draws[2:3], s, params).data[0]
    np.testing.assert_array_equal(grid.cells[1, 2], expected)


def test_conditional_sample_draws_clt_bound(params, sources):
    n = 400
    _, draws = conditional_sample(sources[:1], n, params, np.random.default_rng(3))
    assert draws.shape == (n, SMALL.z_dim)
    assert abs(draws.mean()) <= 4 / np.sqrt(n * SMALL.z_dim)


# ---------------------------------------------------------------- files


def test_quantize_rules():
    np.testing.assert_array_equal(quantize(np.array([0.0, 0.5, 1.0, 0.2])), [0, 128, 255, 51])
    with pytest.raises(ValueError):
        quantize(np.array([1.01]))
    with pytest.raises(ValueError):
        quantize(np.array([-0.1]))


def test_pgm_roundtrip_with_independent_parser(tmp_path):
    image = np.random.default_rng(4).random((1, 9, 7))
    path = write_image(image, tmp_path / "x.pgm")
    expected = quantize(image)[0]
    np.testing.assert_array_equal(parse_pgm(path.read_bytes()), expected)
    np.testing.assert_array_equal(read_image(path)[0], expected)


def test_png_color_roundtrip(tmp_path):
    image = np.random.default_rng(5).random((3, 6, 5))
    path = write_image(image, tmp_path / "x.png")
    np.testing.assert_array_equal(read_image(path), quantize(image))


def test_pgm_rejects_color(tmp_path):
    with pytest.raises(ValueError):
        write_image(np.zeros((3, 4, 4)), tmp_path / "x.pgm")


def test_tile_separators_and_filename():
    cells = np.zeros((2, 3, 1, 4, 4))
    grid = ImageGrid(cells, header_col=np.zeros((2, 1, 4, 4)))
    canvas = tile(grid)
    assert canvas.shape == (1, 2 * 5 - 1, 4 * 5 - 1)
    assert (canvas[:, 4, :] == 1.0).all() and (canvas[:, :, 4] == 1.0).all()
    assert grid_filename("sample", 7, grid, "PGM") == "sample_7_2x4.pgm"
