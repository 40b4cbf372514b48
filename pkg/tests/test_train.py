import numpy as np
import pytest
import torch

from voxdiff._rng import make_rng
from voxdiff.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from voxdiff.diffusion import ChannelSchedules, NoiseSchedule, Normalizer, TorchDenoiser, ancestral_sample
from voxdiff.nn import UNetConfig
from voxdiff.train import TrainConfig, Trainer, write_trace_csv


def setup(seed=0, **kw):
    data = np.random.default_rng(seed).normal(size=(3, 4, 4, 4, 4))
    unet = UNetConfig(width=4, levels=1, resolution=4, res_blocks=1)
    cfg = TrainConfig(lr=1e-3, batch_size=2, iterations=6, warmup=3, **kw)
    sch = ChannelSchedules(NoiseSchedule(16), NoiseSchedule(16, "linear"))
    return data, unet, cfg, sch


def test_clip_norm_contract():
    data, unet, _, sch = setup()
    tr = Trainer(data, unet, TrainConfig(batch_size=2, iterations=4, clip_norm=0.001), sch)
    tr.run()
    for row in tr.trace:
        assert row.clipped_norm <= 0.001 + 1e-12
        assert row.grad_norm > 0.001


def test_warmup_schedule():
    data, unet, cfg, sch = setup()
    tr = Trainer(data, unet, cfg, sch)
    assert [tr.lr_at(s) for s in range(5)] == pytest.approx([1e-3 / 3, 2e-3 / 3, 1e-3, 1e-3, 1e-3])


def test_resume_matches_uninterrupted(tmp_path):
    data, unet, cfg, sch = setup(weighting="snr", visibility=True)
    norm = Normalizer(-3.0, 2.0, 1.0, 1.5)
    full = Trainer(data, unet, cfg, sch, norm).run()
    part = Trainer(data, unet, cfg, sch, norm).run(until=3)
    save_checkpoint(part.checkpoint(), tmp_path / "c.vxck")
    resumed = Trainer.resume(load_checkpoint(tmp_path / "c.vxck"), data).run()
    assert resumed.step == 6
    for a, b in zip(full.trace, resumed.trace):
        assert abs(a.loss - b.loss) <= 1e-9
    for p, q in zip(full.model.parameters(), resumed.model.parameters()):
        assert torch.equal(p, q)


def test_checkpoint_roundtrip_forward(tmp_path):
    data, unet, cfg, sch = setup()
    tr = Trainer(data, unet, cfg, sch, Normalizer(1.0, 2.0, 3.0, 4.0)).run()
    ck = tr.checkpoint()
    save_checkpoint(ck, tmp_path / "a.vxck")
    back = load_checkpoint(tmp_path / "a.vxck")
    assert back.normalizer == ck.normalizer and back.step == 6
    assert back.schedules.to_json() == sch.to_json()
    x = torch.as_tensor(data[:2])
    assert torch.equal(back.build()(x, torch.tensor([3, 9])), tr.model(x, torch.tensor([3, 9])))
    save_checkpoint(back, tmp_path / "b.vxck")
    assert (tmp_path / "a.vxck").read_bytes() == (tmp_path / "b.vxck").read_bytes()


def test_checkpoint_errors(tmp_path):
    data, unet, cfg, sch = setup()
    save_checkpoint(Trainer(data, unet, cfg, sch).checkpoint(), tmp_path / "a.vxck")
    blob = bytearray((tmp_path / "a.vxck").read_bytes())
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.vxck")
    blob[-20] ^= 1
    (tmp_path / "bad.vxck").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="CRC32"):
        load_checkpoint(tmp_path / "bad.vxck")
    (tmp_path / "magic.vxck").write_bytes(b"NOPE" + bytes(blob[4:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.vxck")


def test_training_deterministic():
    data, unet, cfg, sch = setup()
    a = Trainer(data, unet, cfg, sch).run()
    b = Trainer(data, unet, cfg, sch).run()
    assert [r.loss for r in a.trace] == [r.loss for r in b.trace]


def test_double_variant_trains():
    data, _, cfg, sch = setup()
    unet = UNetConfig(width=4, levels=1, resolution=4, res_blocks=1, variant="double")
    tr = Trainer(data, unet, cfg, sch).run()
    assert all(np.isfinite(r.loss) for r in tr.trace)
    out = ancestral_sample(TorchDenoiser(tr.model), sch, make_rng(0), (1, 4, 4, 4, 4))
    assert np.all(np.isfinite(out))


def test_trace_csv(tmp_path):
    data, unet, cfg, sch = setup()
    tr = Trainer(data, unet, cfg, sch).run()
    write_trace_csv(tmp_path / "t.csv", tr.trace)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "step,loss,grad_norm,lr" and len(lines) == 7


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        Trainer(np.zeros((2, 4, 8, 8, 8)), UNetConfig(width=4, levels=1, resolution=4), TrainConfig(), ChannelSchedules.shared(4))
