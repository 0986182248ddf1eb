import numpy as np
import pytest

from gfflab.data import POLE, SceneSpec, generate
from gfflab.gates import ablate_gate, export_gates, gate_maps, quantize, read_pgm, write_ablation, write_pgm
from gfflab.network import ModelConfig, build_model

TINY = dict(width=4, backbone_widths=(4, 4, 8, 8), ppm_bins=(1, 2))


@pytest.fixture(scope="module")
def samples():
    return generate(SceneSpec(height=48, width=48, seed=11), 3)


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7), dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")
    assert read_pgm(tmp_path / "a.pgm").tobytes() == img.tobytes()


def test_pgm_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "a.pgm", np.zeros((2, 2), dtype=np.float32))
    (tmp_path / "b.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(5))
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "b.pgm")


def test_quantization_bound():
    g = np.random.default_rng(1).uniform(0, 1, 10_000)
    assert np.abs(quantize(g) / 255.0 - g).max() <= 0.5 / 255 + 1e-12
    assert quantize(np.array([0.0, 0.5, 1.0])).tolist() == [0, 128, 255]


def test_untrained_gates_export_mid_grey(tmp_path, samples):
    model = build_model(ModelConfig(**TINY), 0)
    stats = export_gates(model, samples[:2], tmp_path)
    files = sorted(tmp_path.iterdir())
    assert len(files) == 4 * 2
    for f in files:
        assert (read_pgm(f) == 128).all()
    assert [s["level"] for s in stats] == [1, 2, 3, 4]
    assert all(s["mean"] == 0.5 and s["std"] == 0.0 for s in stats)


def test_exported_gates_reparse(tmp_path, samples):
    model = build_model(ModelConfig(**TINY), 0)
    for g in model.fusion.gate:
        g.weight.data[...] = np.random.default_rng(2).normal(size=g.weight.shape)
    export_gates(model, samples[:1], tmp_path)
    maps = gate_maps(model, samples[0].image[None])
    for lvl, m in enumerate(maps, start=1):
        back = read_pgm(tmp_path / f"gate_L{lvl}_{samples[0].id}.pgm") / 255.0
        assert back.shape == m.shape[1:]
        assert np.abs(back - m[0]).max() <= 0.5 / 255 + 1e-7


def test_ablation_requires_gates(samples):
    with pytest.raises(ValueError):
        ablate_gate(build_model(ModelConfig(fusion="addition", **TINY), 0), samples, (1,))


def test_ablation_level_range(samples):
    with pytest.raises(IndexError):
        ablate_gate(build_model(ModelConfig(**TINY), 0), samples, (5,))


def test_ablation_report(tmp_path, samples):
    model = build_model(ModelConfig(**TINY), 0)
    rng = np.random.default_rng(3)
    for g in model.fusion.gate:
        g.weight.data[...] = rng.normal(size=g.weight.shape)
    model.classifier.weight.data[...] = rng.normal(size=model.classifier.weight.shape)
    rep = ablate_gate(model, samples, (1, 2, 3, 4), batch=2)
    assert rep.total_pixels == 3 * 48 * 48
    assert len(rep.changed) == 3 and all(c >= 0 for c in rep.changed)
    assert sum(rep.changed) == sum(int(m.sum()) for m in rep.masks)
    assert len(rep.delta()) == 5
    write_ablation(rep, samples, tmp_path)
    assert len((tmp_path / "changed_pixels.csv").read_text().splitlines()) == 4
    assert (tmp_path / "iou_delta.csv").read_text().splitlines()[0] == "class,iou_gated,iou_ablated,delta"
    mask = read_pgm(tmp_path / f"changed_{samples[0].id}.pgm")
    assert set(np.unique(mask)) <= {0, 255}
    assert int((mask == 255).sum()) == rep.changed[0]


def test_ablation_is_deterministic(samples):
    model = build_model(ModelConfig(**TINY), 4)
    a = ablate_gate(model, samples, (1,))
    b = ablate_gate(model, samples, (1,))
    assert a.changed == b.changed and a.iou_before == b.iou_before
    assert a.delta()[POLE] == b.delta()[POLE]
