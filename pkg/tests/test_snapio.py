"""File-format and data-utility tests: byte-level snapshot layout oracle,
bit-exact round trips, manifests, normalization, resampling against an
independent interpolator, checkpoint fidelity, and CSV/PGM export."""

import json
import struct

import numpy as np
import pytest
from scipy.interpolate import RegularGridInterpolator

import diano.models as md
import diano.snapio as sio
import diano.training as tr
from diano.autodiff import Tensor
from diano.fdm import GridField


def rand_field(shape, extents=None, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    if extents is None:
        extents = tuple((0.0, 1.0) for _ in shape)
    vals = rng.standard_normal(shape).astype(dtype)
    return GridField(vals, extents)


class TestSnapshotFormat:
    def test_byte_layout_matches_hand_packed_reference(self, tmp_path):
        # Independent, struct-by-struct construction of the expected bytes.
        vals = np.arange(6, dtype=np.float64).reshape(2, 3) + 0.5
        f = GridField(vals, ((0.0, 2.0), (-1.0, 1.0)))
        p = sio.save_snapshot(f, tmp_path / "a.diaf")
        want = struct.pack("<4sHHH", b"DIAF", 1, 2, 2)
        want += struct.pack("<2I", 2, 3)
        want += struct.pack("<4d", 0.0, 2.0, -1.0, 1.0)
        want += vals.astype("<f8").tobytes()
        assert p.read_bytes() == want

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip_bitwise(self, tmp_path, dtype):
        f = rand_field((16, 16), extents=((0.0, 3.0), (0.5, 2.0)), dtype=dtype)
        sio.save_snapshot(f, tmp_path / "s.diaf")
        g, meta = sio.load_snapshot(tmp_path / "s.diaf")
        assert g.values.data.tobytes() == f.values.data.tobytes()
        assert g.values.dtype == np.dtype(dtype)
        assert g.extents == f.extents
        assert meta is None

    def test_round_trip_1d_and_3d(self, tmp_path):
        for shape, ext in [((7,), ((0.0, 1.0),)),
                           ((4, 5, 6), ((0.0, 1.0), (0.0, 2.0), (1.0, 3.0)))]:
            f = rand_field(shape, extents=ext, seed=3)
            sio.save_snapshot(f, tmp_path / "s.diaf")
            g, _ = sio.load_snapshot(tmp_path / "s.diaf")
            assert g.spatial_shape == shape
            assert g.extents == ext
            np.testing.assert_array_equal(g.values.data, f.values.data)

    def test_special_values_survive(self, tmp_path):
        vals = np.array([[0.0, -0.0], [np.inf, -np.inf]])
        f = GridField(vals, ((0.0, 1.0), (0.0, 1.0)))
        sio.save_snapshot(f, tmp_path / "s.diaf")
        g, _ = sio.load_snapshot(tmp_path / "s.diaf")
        assert g.values.data.tobytes() == vals.tobytes()

    def test_sidecar_round_trip(self, tmp_path):
        f = rand_field((4, 4))
        meta = {"normalization": {"kind": "maxabs", "scale": 2.5},
                "dt": 0.01, "provenance": "test"}
        sio.save_snapshot(f, tmp_path / "s.diaf", meta=meta)
        assert (tmp_path / "s.diaf.json").exists()
        _, got = sio.load_snapshot(tmp_path / "s.diaf")
        assert got == meta

    def test_channel_axis_squeezed(self, tmp_path):
        vals = np.random.default_rng(0).standard_normal((1, 4, 4))
        f = GridField(vals, ((0.0, 1.0), (0.0, 1.0)))
        sio.save_snapshot(f, tmp_path / "s.diaf")
        g, _ = sio.load_snapshot(tmp_path / "s.diaf")
        assert g.values.ndim == 2
        np.testing.assert_array_equal(g.values.data, vals[0])

    def test_multichannel_rejected(self, tmp_path):
        vals = np.zeros((2, 4, 4))
        f = GridField(vals, ((0.0, 1.0), (0.0, 1.0)))
        with pytest.raises(ValueError, match="one scalar field"):
            sio.save_snapshot(f, tmp_path / "s.diaf")

    def test_int_input_coerced_to_float64(self, tmp_path):
        # Tensor construction coerces integer arrays, so payloads are always
        # one of the two supported float dtypes.
        f = GridField(np.arange(9, dtype=np.int32).reshape(3, 3), ((0, 1), (0, 1)))
        sio.save_snapshot(f, tmp_path / "s.diaf")
        g, _ = sio.load_snapshot(tmp_path / "s.diaf")
        assert g.values.dtype == np.float64
        np.testing.assert_array_equal(g.values.data, np.arange(9.0).reshape(3, 3))

    def test_bad_magic(self, tmp_path):
        f = rand_field((4, 4))
        p = sio.save_snapshot(f, tmp_path / "s.diaf")
        buf = bytearray(p.read_bytes())
        buf[:4] = b"DIAX"
        p.write_bytes(bytes(buf))
        with pytest.raises(sio.FileFormatError, match="magic"):
            sio.load_snapshot(p)

    def test_bad_version(self, tmp_path):
        f = rand_field((4, 4))
        p = sio.save_snapshot(f, tmp_path / "s.diaf")
        buf = bytearray(p.read_bytes())
        struct.pack_into("<H", buf, 4, 99)
        p.write_bytes(bytes(buf))
        with pytest.raises(sio.FileFormatError, match="version"):
            sio.load_snapshot(p)

    def test_unknown_dtype_code(self, tmp_path):
        p = sio.save_snapshot(rand_field((4, 4)), tmp_path / "s.diaf")
        buf = bytearray(p.read_bytes())
        struct.pack_into("<H", buf, 6, 7)
        p.write_bytes(bytes(buf))
        with pytest.raises(sio.FileFormatError, match="dtype code"):
            sio.load_snapshot(p)

    def test_truncated_payload(self, tmp_path):
        p = sio.save_snapshot(rand_field((4, 4)), tmp_path / "s.diaf")
        buf = p.read_bytes()
        p.write_bytes(buf[:-8])
        with pytest.raises(sio.FileFormatError, match="truncated payload"):
            sio.load_snapshot(p)

    def test_trailing_bytes(self, tmp_path):
        p = sio.save_snapshot(rand_field((4, 4)), tmp_path / "s.diaf")
        p.write_bytes(p.read_bytes() + b"xx")
        with pytest.raises(sio.FileFormatError, match="trailing"):
            sio.load_snapshot(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "s.diaf"
        p.write_bytes(b"DIA")
        with pytest.raises(sio.FileFormatError, match="truncated header"):
            sio.load_snapshot(p)

    def test_loaded_array_is_writable(self, tmp_path):
        p = sio.save_snapshot(rand_field((4, 4)), tmp_path / "s.diaf")
        g, _ = sio.load_snapshot(p)
        g.values.data[0, 0] = 42.0  # must not raise


class TestManifest:
    def make(self, n=3):
        entries = [{"file": f"vorticity_{k:04d}.diaf", "role": "vorticity"}
                   for k in range(n)]
        return sio.DatasetManifest(entries, split_seed=7, dt=0.01,
                                   waveform=[1.0, 2.0, 1.0])

    def test_round_trip(self, tmp_path):
        m = self.make()
        sio.save_manifest(m, tmp_path)
        got = sio.load_manifest(tmp_path)
        assert got.entries == m.entries
        assert got.split_seed == 7
        assert got.dt == 0.01
        assert got.waveform == [1.0, 2.0, 1.0]

    def test_load_from_file_path(self, tmp_path):
        p = sio.save_manifest(self.make(), tmp_path)
        got = sio.load_manifest(p)
        assert got.split_seed == 7

    def test_files_filters_by_role(self):
        entries = [{"file": "mask.diaf", "role": "mask"},
                   {"file": "u_0000.diaf", "role": "u"},
                   {"file": "u_0001.diaf", "role": "u"}]
        m = sio.DatasetManifest(entries)
        assert m.files("u") == ["u_0000.diaf", "u_0001.diaf"]
        assert m.files("mask") == ["mask.diaf"]
        assert m.files("pressure") == []

    def test_unknown_role_rejected(self):
        with pytest.raises(ValueError, match="role"):
            sio.DatasetManifest([{"file": "a.diaf", "role": "temperature"}])

    def test_malformed_entry_rejected(self):
        with pytest.raises(ValueError, match="file and role"):
            sio.DatasetManifest([{"file": "a.diaf"}])

    def test_bad_json(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{nope")
        with pytest.raises(sio.FileFormatError, match="JSON"):
            sio.load_manifest(tmp_path)

    def test_missing_entries_key(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"version": 1}))
        with pytest.raises(sio.FileFormatError, match="bad manifest"):
            sio.load_manifest(tmp_path)

    def test_unsupported_version(self, tmp_path):
        (tmp_path / "manifest.json").write_text(
            json.dumps({"version": 9, "entries": []}))
        with pytest.raises(sio.FileFormatError, match="version"):
            sio.load_manifest(tmp_path)


class TestLoadDataset:
    def write(self, tmp_path, shapes, roles=None):
        entries = []
        for k, shape in enumerate(shapes):
            name = f"snap_{k:04d}.diaf"
            sio.save_snapshot(rand_field(shape, seed=k), tmp_path / name)
            entries.append({"file": name, "role": (roles or ["vorticity"] * len(shapes))[k]})
        sio.save_manifest(sio.DatasetManifest(entries, split_seed=3), tmp_path)

    def test_groups_by_role_in_order(self, tmp_path):
        self.write(tmp_path, [(4, 4)] * 3 + [(4, 4)],
                   roles=["u", "pressure", "u", "mask"])
        ds = sio.load_dataset(tmp_path)
        assert [len(v) for v in (ds.fields["u"], ds.fields["pressure"],
                                 ds.fields["mask"])] == [2, 1, 1]
        assert ds.manifest.split_seed == 3
        # order preserved: first u file is snap_0000
        first, _ = sio.load_snapshot(tmp_path / "snap_0000.diaf")
        np.testing.assert_array_equal(ds.fields["u"][0].values.data,
                                      first.values.data)

    def test_grid_mismatch_rejected(self, tmp_path):
        self.write(tmp_path, [(4, 4), (6, 4)])
        with pytest.raises(ValueError, match="share grid"):
            sio.load_dataset(tmp_path)

    def test_dtype_mismatch_rejected(self, tmp_path):
        sio.save_snapshot(rand_field((4, 4)), tmp_path / "a.diaf")
        sio.save_snapshot(rand_field((4, 4), dtype=np.float32), tmp_path / "b.diaf")
        entries = [{"file": "a.diaf", "role": "vorticity"},
                   {"file": "b.diaf", "role": "vorticity"}]
        sio.save_manifest(sio.DatasetManifest(entries), tmp_path)
        with pytest.raises(ValueError, match="share grid and dtype"):
            sio.load_dataset(tmp_path)

    def test_sidecars_align_with_fields(self, tmp_path):
        sio.save_snapshot(rand_field((4, 4)), tmp_path / "a.diaf",
                          meta={"dt": 0.5})
        sio.save_snapshot(rand_field((4, 4), seed=1), tmp_path / "b.diaf")
        entries = [{"file": "a.diaf", "role": "vorticity"},
                   {"file": "b.diaf", "role": "vorticity"}]
        sio.save_manifest(sio.DatasetManifest(entries), tmp_path)
        ds = sio.load_dataset(tmp_path)
        assert ds.sidecars["vorticity"] == [{"dt": 0.5}, None]


class TestNormalize:
    def test_maxabs_divides_by_peak(self):
        f = GridField(np.array([[1.0, -5.0], [2.0, 0.0]]), ((0, 1), (0, 1)))
        out, c = sio.normalize(f, "maxabs")
        assert c == {"kind": "maxabs", "scale": 5.0}
        np.testing.assert_allclose(out.values.data,
                                   [[0.2, -1.0], [0.4, 0.0]])

    def test_minmax_maps_endpoints_exactly(self):
        f = GridField(np.array([[2.0, 10.0], [6.0, 4.0]]), ((0, 1), (0, 1)))
        out, c = sio.normalize(f, "minmax")
        assert c == {"kind": "minmax", "min": 2.0, "max": 10.0}
        assert out.values.data.min() == 0.0
        assert out.values.data.max() == 1.0

    def test_constants_shared_across_sequence(self):
        fs = [GridField(np.full((2, 2), v), ((0, 1), (0, 1)))
              for v in (1.0, -4.0, 2.0)]
        out, c = sio.normalize(fs, "maxabs")
        assert c["scale"] == 4.0
        assert out[0].values.data[0, 0] == 0.25
        assert out[1].values.data[0, 0] == -1.0

    def test_all_zero_is_identity(self):
        f = GridField(np.zeros((3, 3)), ((0, 1), (0, 1)))
        for kind in ("maxabs", "minmax"):
            out, c = sio.normalize(f, kind)
            np.testing.assert_array_equal(out.values.data, 0.0)
            back = sio.denormalize(out, c)
            np.testing.assert_array_equal(back.values.data, 0.0)

    def test_round_trip_to_1e12(self):
        f = rand_field((8, 8), seed=5)
        for kind in ("maxabs", "minmax"):
            out, c = sio.normalize(f, kind)
            back = sio.denormalize(out, c)
            np.testing.assert_allclose(back.values.data, f.values.data,
                                       rtol=0, atol=1e-12)

    def test_sequence_round_trip(self):
        fs = [rand_field((4, 4), seed=k) for k in range(3)]
        out, c = sio.normalize(fs, "minmax")
        back = sio.denormalize(out, c)
        for b, f in zip(back, fs):
            np.testing.assert_allclose(b.values.data, f.values.data, atol=1e-12)

    def test_float32_payload_keeps_dtype_f64_constants(self):
        f = rand_field((4, 4), dtype=np.float32)
        out, c = sio.normalize(f, "maxabs")
        assert out.values.dtype == np.float32
        assert isinstance(c["scale"], float)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="kind"):
            sio.normalize(rand_field((2, 2)), "zscore")
        with pytest.raises(ValueError, match="kind"):
            sio.denormalize(rand_field((2, 2)), {"kind": "zscore"})

    def test_empty_sequence(self):
        with pytest.raises(ValueError, match="no fields"):
            sio.normalize([], "maxabs")


class TestResample:
    def test_same_size_identity(self):
        f = rand_field((9, 7), seed=2)
        g = sio.resample(f, (9, 7))
        np.testing.assert_array_equal(g.values.data, f.values.data)
        assert g.extents == f.extents

    def test_exact_on_bilinear_fields(self):
        # a*x + b*y + c*x*y is reproduced exactly by bilinear interpolation.
        ext = ((0.0, 2.0), (1.0, 3.0))
        x = np.linspace(*ext[0], 12)[:, None]
        y = np.linspace(*ext[1], 8)[None, :]
        f = GridField(1.5 * x + 0.5 * y - 2.0 * x * y + 3.0, ext)
        for target in [(5, 5), (25, 31), (2, 2)]:
            g = sio.resample(f, target)
            xt = np.linspace(*ext[0], target[0])[:, None]
            yt = np.linspace(*ext[1], target[1])[None, :]
            want = 1.5 * xt + 0.5 * yt - 2.0 * xt * yt + 3.0
            np.testing.assert_allclose(g.values.data, want, atol=1e-12)

    def test_trilinear_exact_on_linear_3d(self):
        ext = ((0.0, 1.0), (0.0, 1.0), (0.0, 1.0))
        grids = np.meshgrid(*[np.linspace(0, 1, 6)] * 3, indexing="ij")
        f = GridField(2.0 * grids[0] - grids[1] + 0.5 * grids[2], ext)
        g = sio.resample(f, (9, 4, 11))
        gt = np.meshgrid(np.linspace(0, 1, 9), np.linspace(0, 1, 4),
                         np.linspace(0, 1, 11), indexing="ij")
        want = 2.0 * gt[0] - gt[1] + 0.5 * gt[2]
        np.testing.assert_allclose(g.values.data, want, atol=1e-12)

    def test_matches_scipy_regular_grid_interpolator(self):
        f = rand_field((10, 13), extents=((0.0, 2.0), (0.0, 1.0)), seed=9)
        g = sio.resample(f, (17, 6))
        interp = RegularGridInterpolator(
            (f.coords(0), f.coords(1)), f.values.data, method="linear")
        xt, yt = np.meshgrid(np.linspace(0, 2, 17), np.linspace(0, 1, 6),
                             indexing="ij")
        want = interp(np.stack([xt, yt], axis=-1))
        np.testing.assert_allclose(g.values.data, want, atol=1e-10)

    def test_downsample_upsample_band_limited(self):
        # Angular wavenumbers <= 8 rad/length survive a 128 -> 64 -> 128
        # round trip within 2% (piecewise-linear error ~ (h*k)^2 / 8).
        n = 128
        x = np.linspace(0.0, 1.0, n)[:, None]
        y = np.linspace(0.0, 1.0, n)[None, :]
        f = GridField(np.sin(8.0 * x) * np.cos(5.0 * y),
                      ((0.0, 1.0), (0.0, 1.0)))
        down = sio.resample(f, (64, 64))
        back = sio.resample(down, (128, 128))
        err = np.linalg.norm(back.values.data - f.values.data)
        assert err / np.linalg.norm(f.values.data) < 0.02

    def test_round_trip_error_grows_with_wavenumber(self):
        # Same round trip, increasing integer modes: error is monotone in k,
        # small for well-resolved fields.
        errs = []
        x = np.linspace(0.0, 1.0, 128)[:, None]
        y = np.linspace(0.0, 1.0, 128)[None, :]
        for k in (1, 2, 4):
            f = GridField(np.sin(2 * np.pi * k * x) * np.cos(2 * np.pi * k * y),
                          ((0.0, 1.0), (0.0, 1.0)))
            back = sio.resample(sio.resample(f, (64, 64)), (128, 128))
            errs.append(np.linalg.norm(back.values.data - f.values.data)
                        / np.linalg.norm(f.values.data))
        assert errs[0] < errs[1] < errs[2]
        assert errs[0] < 0.01

    def test_leading_axes_pass_through(self):
        vals = np.random.default_rng(0).standard_normal((3, 2, 6, 6))
        f = GridField(vals, ((0.0, 1.0), (0.0, 1.0)))
        g = sio.resample(f, (6, 6))
        assert g.values.shape == (3, 2, 6, 6)
        np.testing.assert_array_equal(g.values.data, vals)

    def test_scalar_target_broadcasts(self):
        f = rand_field((8, 8))
        g = sio.resample(f, 4)
        assert g.spatial_shape == (4, 4)

    def test_target_too_small(self):
        with pytest.raises(ValueError, match="at least 2"):
            sio.resample(rand_field((8, 8)), (8, 1))

    def test_wrong_target_rank(self):
        with pytest.raises(ValueError, match="per spatial axis"):
            sio.resample(rand_field((8, 8)), (8, 8, 8))

    def test_float32_stays_float32(self):
        f = rand_field((8, 8), dtype=np.float32)
        assert sio.resample(f, (12, 12)).values.dtype == np.float32


class TestCheckpoint:
    def spec(self):
        return md.ModelSpec(variant="static", fourier_modes=2,
                            compression_ratio=2, width=3, seed=1)

    def test_round_trip_params_bitwise(self, tmp_path):
        spec = self.spec()
        params = md.init_params(spec, (8, 8))
        p = sio.save_checkpoint(tmp_path / "c.npz", spec, params, (8, 8),
                                epoch=4, extra={"note": "hi"})
        ck = sio.load_checkpoint(p)
        assert ck.spec.to_dict() == spec.to_dict()
        assert ck.epoch == 4
        assert ck.extra == {"note": "hi"}
        assert ck.spatial_sizes == (8, 8)
        assert ck.state is None
        want = dict(md.iter_tensors(params))
        got = dict(md.iter_tensors(ck.params))
        assert want.keys() == got.keys()
        for k in want:
            assert want[k].data.tobytes() == got[k].data.tobytes()

    def test_state_round_trip(self, tmp_path):
        spec = self.spec()
        params = md.init_params(spec, (8, 8))
        tensors = [t for _, t in md.iter_tensors(params)]
        state = tr.adam_init(tensors)
        rng = np.random.default_rng(123)
        for m, v in zip(state["m"], state["v"]):
            m += rng.standard_normal(m.shape)
            v += rng.random(v.shape)
        state["step"] = 17
        state["rng"] = rng.bit_generator.state
        p = sio.save_checkpoint(tmp_path / "c.npz", spec, params, (8, 8),
                                state=state, epoch=2)
        ck = sio.load_checkpoint(p)
        assert ck.state["step"] == 17
        assert ck.state["rng"] == state["rng"]
        for a, b in zip(ck.state["m"], state["m"]):
            assert a.tobytes() == b.tobytes()
        for a, b in zip(ck.state["v"], state["v"]):
            assert a.tobytes() == b.tobytes()

    def test_resume_reproduces_uninterrupted_history(self, tmp_path):
        # Serialize at epoch 3, reload from disk, finish; losses must match
        # a 6-epoch run that never stopped.
        rng = np.random.default_rng(40)
        snaps = []
        x = np.linspace(0, 1, 8)[:, None]
        y = np.linspace(0, 1, 8)[None, :]
        for k in range(10):
            snaps.append(GridField(
                (np.sin(2 * np.pi * (x + 0.04 * k)) * np.cos(2 * np.pi * y)
                 + 0.1 * rng.standard_normal((8, 8)))[None],
                ((0.0, 1.0), (0.0, 1.0))))
        spec = md.ModelSpec(variant="static", fourier_modes=1,
                            compression_ratio=2, width=2, seed=0)
        cfg = dict(epochs=6, batch_size=4, lr0=1e-3, seed=1)

        params_full = md.init_params(spec, (8, 8))
        full = tr.train(spec, params_full, snaps, tr.TrainConfig(**cfg))

        params_a = md.init_params(spec, (8, 8))
        half_cfg = tr.TrainConfig(**{**cfg, "epochs": 3})
        res_a = tr.train(spec, params_a, snaps, half_cfg)
        sio.save_checkpoint(tmp_path / "c.npz", spec, params_a, (8, 8),
                            state=res_a.state, epoch=3)

        ck = sio.load_checkpoint(tmp_path / "c.npz")
        res_b = tr.train(ck.spec, ck.params, snaps, tr.TrainConfig(**cfg),
                         start_epoch=ck.epoch, state=ck.state)
        history = res_a.history + res_b.history
        assert len(history) == len(full.history) == 6
        for ra, rb in zip(history, full.history):
            assert ra["train_loss"] == rb["train_loss"]
            assert ra["test_loss"] == rb["test_loss"]

    def test_appends_npz_suffix(self, tmp_path):
        spec = self.spec()
        params = md.init_params(spec, (8, 8))
        p = sio.save_checkpoint(tmp_path / "ckpt", spec, params, (8, 8))
        assert p.name == "ckpt.npz"
        assert p.exists()

    def test_bad_magic(self, tmp_path):
        meta = {"magic": "NOTME", "version": 1}
        blob = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        np.savez(tmp_path / "c.npz", meta=blob)
        with pytest.raises(sio.FileFormatError, match="magic"):
            sio.load_checkpoint(tmp_path / "c.npz")

    def test_bad_version(self, tmp_path):
        meta = {"magic": "DIANOCKPT", "version": 99}
        blob = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        np.savez(tmp_path / "c.npz", meta=blob)
        with pytest.raises(sio.FileFormatError, match="version"):
            sio.load_checkpoint(tmp_path / "c.npz")

    def test_missing_meta(self, tmp_path):
        np.savez(tmp_path / "c.npz", x=np.zeros(3))
        with pytest.raises(sio.FileFormatError, match="metadata"):
            sio.load_checkpoint(tmp_path / "c.npz")

    def test_not_an_archive(self, tmp_path):
        p = tmp_path / "c.npz"
        p.write_bytes(b"garbage bytes that are not a zip")
        with pytest.raises(sio.FileFormatError, match="archive"):
            sio.load_checkpoint(p)

    def test_truncated_archive(self, tmp_path):
        spec = self.spec()
        params = md.init_params(spec, (8, 8))
        p = sio.save_checkpoint(tmp_path / "c.npz", spec, params, (8, 8))
        p.write_bytes(p.read_bytes()[:100])
        with pytest.raises(sio.FileFormatError):
            sio.load_checkpoint(p)

    def test_missing_parameter_key(self, tmp_path):
        spec = self.spec()
        params = md.init_params(spec, (8, 8))
        p = sio.save_checkpoint(tmp_path / "c.npz", spec, params, (8, 8))
        with np.load(p) as f:
            arrays = {k: f[k] for k in f.files}
        victim = next(k for k in arrays if k.startswith("param:"))
        del arrays[victim]
        np.savez(p, **arrays)
        with pytest.raises(sio.FileFormatError, match="missing parameter"):
            sio.load_checkpoint(p)

    def test_float32_checkpoint(self, tmp_path):
        spec = self.spec()
        params = md.init_params(spec, (8, 8), dtype=np.float32)
        p = sio.save_checkpoint(tmp_path / "c.npz", spec, params, (8, 8))
        ck = sio.load_checkpoint(p)
        for _, t in md.iter_tensors(ck.params):
            assert t.dtype == np.float32


class TestExportField:
    def test_csv_2x2_rows_and_header(self, tmp_path):
        f = GridField(np.array([[1.0, 2.0], [3.0, 4.0]]),
                      ((0.0, 1.0), (0.0, 1.0)))
        p = sio.export_field(f, tmp_path / "f.csv", "csv")
        lines = p.read_text().strip().split("\n")
        assert lines[0] == "x,y,value"
        assert len(lines) == 5
        assert lines[1] == "0,0,1"
        assert lines[4] == "1,1,4"

    def test_csv_reparse_exact(self, tmp_path):
        f = rand_field((5, 7), extents=((0.0, 2.0), (-1.0, 1.0)), seed=11)
        p = sio.export_field(f, tmp_path / "f.csv", "csv")
        rows = np.loadtxt(p, delimiter=",", skiprows=1)
        vals = rows[:, 2].reshape(5, 7)
        np.testing.assert_array_equal(vals, f.values.data)
        np.testing.assert_array_equal(rows[:, 0].reshape(5, 7)[:, 0],
                                      f.coords(0))

    def test_csv_1d_and_3d_headers(self, tmp_path):
        f1 = rand_field((4,), extents=((0.0, 1.0),))
        p = sio.export_field(f1, tmp_path / "a.csv", "csv")
        assert p.read_text().split("\n")[0] == "x,value"
        f3 = rand_field((2, 2, 2), extents=((0, 1),) * 3)
        p = sio.export_field(f3, tmp_path / "b.csv", "csv")
        head, *rows = p.read_text().strip().split("\n")
        assert head == "x,y,z,value"
        assert len(rows) == 8

    def test_pgm_constant_uniform_gray(self, tmp_path):
        f = GridField(np.full((6, 4), 3.3), ((0, 1), (0, 1)))
        p = sio.export_field(f, tmp_path / "f.pgm", "pgm")
        data = p.read_bytes()
        assert data.startswith(b"P5\n6 4\n255\n")
        raster = data.split(b"255\n", 1)[1]
        assert len(raster) == 24
        assert set(raster) == {128}

    def test_pgm_full_range(self, tmp_path):
        f = GridField(np.linspace(0, 1, 16).reshape(4, 4), ((0, 1), (0, 1)))
        p = sio.export_field(f, tmp_path / "f.pgm", "pgm")
        raster = np.frombuffer(p.read_bytes().split(b"255\n", 1)[1],
                               dtype=np.uint8)
        assert raster.min() == 0
        assert raster.max() == 255

    def test_pgm_needs_2d(self, tmp_path):
        f = rand_field((4,), extents=((0.0, 1.0),))
        with pytest.raises(ValueError, match="2D"):
            sio.export_field(f, tmp_path / "f.pgm", "pgm")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError, match="format"):
            sio.export_field(rand_field((2, 2)), tmp_path / "f.png", "png")

    def test_csv_float32_reparse(self, tmp_path):
        f = rand_field((3, 3), dtype=np.float32, seed=2)
        p = sio.export_field(f, tmp_path / "f.csv", "csv")
        rows = np.loadtxt(p, delimiter=",", skiprows=1)
        vals = rows[:, 2].reshape(3, 3).astype(np.float32)
        np.testing.assert_array_equal(vals, f.values.data)
