import numpy as np
import pytest

from fedaria.data import synth_blobs
from fedaria.errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    SpecMismatchError,
    ValidationError,
)
from fedaria.models import ModelSpec, init_params, layout, param_count
from fedaria.numkit import RngStream
from fedaria.pretrain import (
    InitStrategy,
    SSLConfig,
    initialize,
    load_checkpoint,
    save_checkpoint,
    ssl_pretrain,
)

SPEC = ModelSpec(8, 4, (16,))


@pytest.fixture(scope="module")
def blobs():
    return synth_blobs(4, 8, 100, 2.0, 1.0, RngStream(0))


class TestSSL:
    def test_zero_epochs_keeps_init_but_redraws_head(self, blobs):
        res = ssl_pretrain(SPEC, blobs, SSLConfig(epochs=0), RngStream(4))
        ref = init_params(SPEC, "kaiming_normal", RngStream(4))
        head = layout(SPEC)[-1].W.start
        np.testing.assert_array_equal(res.state.params[:head], ref.params[:head])
        assert not np.array_equal(res.state.params[head:], ref.params[head:])
        assert len(res.losses) == 1

    def test_loss_decreases_over_first_epochs(self, blobs):
        curves = []
        for seed in range(5):
            ds = synth_blobs(4, 8, 100, 2.0, 1.0, RngStream(seed))
            res = ssl_pretrain(SPEC, ds, SSLConfig(epochs=5, lr=1e-2, noise_std=0.3), RngStream(seed))
            curves.append(res.losses)
        mean = np.mean(curves, axis=0)
        assert np.all(np.diff(mean) < 0)

    def test_identity_recoverable(self):
        ds = synth_blobs(4, 4, 100, 2.0, 0.5, RngStream(0))
        res = ssl_pretrain(ModelSpec(4, 4, (32,)), ds, SSLConfig(epochs=100, lr=1e-2, noise_std=0.0),
                           RngStream(1))
        assert res.losses[-1] < 1e-3

    @pytest.mark.parametrize("norm", ["none", "batch_norm", "layer_norm", "weight_standardized"])
    def test_layout_contract(self, blobs, norm):
        spec = ModelSpec(8, 4, (6, 5), norm_kind=norm)
        res = ssl_pretrain(spec, blobs, SSLConfig(epochs=1), RngStream(0))
        assert res.state.spec == spec and res.state.params.size == param_count(spec)
        assert np.all(np.isfinite(res.state.params))

    def test_needs_hidden_layer(self, blobs):
        with pytest.raises(ValidationError):
            ssl_pretrain(ModelSpec(8, 4), blobs, SSLConfig(), RngStream(0))

    def test_dim_mismatch(self, blobs):
        with pytest.raises(ValidationError):
            ssl_pretrain(ModelSpec(5, 4, (3,)), blobs, SSLConfig(), RngStream(0))


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        spec = ModelSpec(3, 2, (4,), norm_kind="batch_norm")
        s = init_params(spec, "kaiming_normal", RngStream(0))
        s.running_mean = [np.array([0.1, -0.2, 1e-300, 3.0])]
        s.running_var = [np.array([1.5, 2.0, 0.25, 7.0])]
        save_checkpoint(s, tmp_path / "c")
        back = load_checkpoint(tmp_path / "c", spec)
        assert back.params.tobytes() == s.params.tobytes()
        assert back.stats_vector().tobytes() == s.stats_vector().tobytes()

    def test_header_bytes(self, tmp_path):
        save_checkpoint(init_params(SPEC, "kaiming_normal", RngStream(0)), tmp_path / "c")
        raw = (tmp_path / "c").read_bytes()
        assert raw[:4] == b"FSCK"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[16:24], "little") == param_count(SPEC)
        assert len(raw) == 24 + 8 * param_count(SPEC)

    def write(self, tmp_path):
        p = tmp_path / "c"
        save_checkpoint(init_params(SPEC, "kaiming_normal", RngStream(0)), p)
        return p

    def test_spec_mismatch(self, tmp_path):
        p = self.write(tmp_path)
        with pytest.raises(SpecMismatchError):
            load_checkpoint(p, ModelSpec(8, 4, (16,), activation="tanh"))

    def test_truncated(self, tmp_path):
        p = self.write(tmp_path)
        raw = p.read_bytes()
        for cut in (2, 10, len(raw) - 1):
            p.write_bytes(raw[:cut])
            with pytest.raises(CheckpointTruncatedError):
                load_checkpoint(p, SPEC)

    def test_bad_magic_and_version(self, tmp_path):
        p = self.write(tmp_path)
        raw = p.read_bytes()
        p.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(CheckpointMagicError):
            load_checkpoint(p, SPEC)
        p.write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(p, SPEC)

    def test_trailing_bytes(self, tmp_path):
        p = self.write(tmp_path)
        p.write_bytes(p.read_bytes() + b"\0")
        with pytest.raises(CheckpointError):
            load_checkpoint(p, SPEC)

    def test_errors_are_distinct(self):
        classes = {CheckpointMagicError, CheckpointVersionError, SpecMismatchError, CheckpointTruncatedError}
        assert len(classes) == 4 and all(issubclass(c, CheckpointError) for c in classes)


class TestInitialize:
    def test_random_matches_init_params(self):
        a = initialize(InitStrategy("random", "xavier_uniform"), SPEC, RngStream(3))
        b = init_params(SPEC, "xavier_uniform", RngStream(3))
        assert a.params.tobytes() == b.params.tobytes()

    def test_checkpoint_of_random(self, tmp_path):
        s = init_params(SPEC, "kaiming_normal", RngStream(3))
        save_checkpoint(s, tmp_path / "c")
        back = initialize(InitStrategy("checkpoint", None, str(tmp_path / "c")), SPEC, RngStream(0))
        assert back.params.tobytes() == s.params.tobytes()

    def test_ssl_deterministic(self, blobs):
        strat = InitStrategy("ssl_autoencoder", None, None, SSLConfig(epochs=2))
        a = initialize(strat, SPEC, RngStream(5), blobs)
        b = initialize(strat, SPEC, RngStream(5), blobs)
        assert a.params.tobytes() == b.params.tobytes()
        with pytest.raises(ValidationError):
            initialize(strat, SPEC, RngStream(5))

    @pytest.mark.parametrize("kwargs", [
        dict(kind="random", scheme=None),
        dict(kind="checkpoint", scheme=None),
        dict(kind="random", path="x"),
        dict(kind="ssl_autoencoder", scheme=None, ssl=SSLConfig(), path="x"),
        dict(kind="imagenet"),
    ])
    def test_exclusive_fields(self, kwargs):
        with pytest.raises(ValidationError):
            InitStrategy(**kwargs)
