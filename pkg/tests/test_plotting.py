import numpy as np
import pytest

from ardode.plotting import (EmptyReportError, plot_latent_boxes, plot_latent_heatmap,
                             plot_score_boxes, plot_training_log, plot_trajectories,
                             read_data_comment)


def test_trajectory_plot_embeds_every_point(tmp_path):
    t = np.arange(101) * 0.1
    p = plot_trajectories(tmp_path / "t.svg", t, {"a": np.sin(t), "b": np.cos(t)},
                          observed={"x": np.sin(t) + 0.01})
    data = read_data_comment(p)
    assert len(data["t"]) == 101 and len(data["series"]["a"]) == 101
    assert p.read_text().startswith("<?xml")


def test_heatmap_cell_count(tmp_path):
    lam = np.linspace(0.01, 2, 12)
    data = read_data_comment(plot_latent_heatmap(tmp_path / "h.svg", lam))
    assert data["cells"] == 12


def test_box_plots(tmp_path):
    r = np.random.default_rng(0)
    read_data_comment(plot_latent_boxes(tmp_path / "b.svg", r.normal(size=(20, 5)),
                                        mask=[1, 0, 0, 1, 0]))
    data = read_data_comment(plot_score_boxes(
        tmp_path / "s.svg", {"3": {"encoder": [1.0, 2.0], "reidentified": [0.1, 0.2]}}))
    assert data["3"]["reidentified"] == [0.1, 0.2]


def test_svg_output_is_deterministic(tmp_path):
    t = np.arange(11.0)
    a = plot_trajectories(tmp_path / "a.svg", t, {"s": t**2}).read_bytes()
    b = plot_trajectories(tmp_path / "b.svg", t, {"s": t**2}).read_bytes()
    assert a == b


def test_empty_inputs_raise(tmp_path):
    with pytest.raises(EmptyReportError):
        plot_trajectories(tmp_path / "x.svg", [], {})
    with pytest.raises(EmptyReportError):
        plot_latent_heatmap(tmp_path / "x.svg", [])
    with pytest.raises(EmptyReportError):
        plot_score_boxes(tmp_path / "x.svg", {})
    with pytest.raises(EmptyReportError):
        plot_training_log(tmp_path / "x.svg", {"epoch": np.array([])})
