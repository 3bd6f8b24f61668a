import numpy as np
import pytest

from fisgan import checkpoint, data, train
from fisgan.errors import FormatError


def ring_dataset(count=512, seed=0):
    spec = data.SyntheticSpec(kind="ring", count=count, sigma=0.05)
    return data.make_synthetic(spec, np.random.default_rng(seed))


def fake_clock():
    tick = [0.0]

    def clock():
        tick[0] += 1.0
        return tick[0]

    return clock


def cfg(**over):
    base = dict(
        latent_dim=6,
        refresh_t=4,
        flow_epochs=1,
        flow_batch=64,
        augment_N=96,
        batch_size=32,
        seed=5,
        mode="fis",
        flow_depth=2,
        flow_hidden=12,
    )
    base.update(over)
    return train.TrainConfig(**base)


@pytest.mark.parametrize("flow_kind", ("realnvp", "maf"))
def test_save_load_round_trip(tmp_path, flow_kind):
    ds = ring_dataset()
    config = cfg(max_iters=8, flow_kind=flow_kind)
    summary = train.train(config, ds, clock=fake_clock(),
                          eval_options=train.EvalOptions(interval=4, samples=64))
    path = tmp_path / "state.ckpt"
    checkpoint.save_checkpoint(path, summary.state, experiment={"note": "t"})
    loaded, experiment = checkpoint.load_checkpoint(path, ds)
    assert experiment == {"note": "t"}
    assert loaded.iteration == summary.state.iteration
    for a, b in zip(loaded.gen.parameters(), summary.state.gen.parameters()):
        assert np.array_equal(a, b)
    for a, b in zip(loaded.disc.parameters(), summary.state.disc.parameters()):
        assert np.array_equal(a, b)
    assert loaded.model_rng.bit_generator.state == summary.state.model_rng.bit_generator.state
    if summary.state.flow is not None:
        for a, b in zip(loaded.flow.parameters(), summary.state.flow.parameters()):
            assert np.array_equal(a, b)
        same = train.sample_noise(loaded, 32)
        loaded.model_rng.bit_generator.state = summary.state.model_rng.bit_generator.state
        other = train.sample_noise(summary.state, 32)
        assert np.array_equal(same, other)


def test_resume_matches_uninterrupted_run(tmp_path):
    ds = ring_dataset()
    eval_options = train.EvalOptions(interval=4, samples=64)

    full = train.train(cfg(max_iters=16), ds, clock=fake_clock(),
                       eval_options=eval_options)

    first = train.train(cfg(max_iters=8), ds, clock=fake_clock(),
                        eval_options=eval_options)
    path = tmp_path / "half.ckpt"
    checkpoint.save_checkpoint(path, first.state)
    resumed_state, _ = checkpoint.load_checkpoint(path, ds)
    second = train.train(cfg(max_iters=16), ds, clock=fake_clock(),
                         eval_options=eval_options, state=resumed_state)

    stitched = first.rows + second.rows
    assert len(stitched) == len(full.rows)
    for a, b in zip(stitched, full.rows):
        assert a.iteration == b.iteration
        assert a.proxy_fid == b.proxy_fid
        assert a.d_loss == b.d_loss
        assert a.g_loss == b.g_loss


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError) as err:
        checkpoint.load_checkpoint(path, ring_dataset())
    assert "magic" in str(err.value)


def test_version_mismatch(tmp_path):
    import struct

    path = tmp_path / "vx.ckpt"
    path.write_bytes(checkpoint.MAGIC + struct.pack("<II", 99, 0))
    with pytest.raises(FormatError) as err:
        checkpoint.load_checkpoint(path, ring_dataset())
    assert "version" in str(err.value)
