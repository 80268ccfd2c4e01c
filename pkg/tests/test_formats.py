import numpy as np
import pytest

import pairscope as ps
from pairscope.formats import (
    QfsWriter,
    image_to_pgm16,
    read_fits,
    read_pgm,
    read_qci,
    read_qfs,
    write_fits,
    write_ledger_csv,
    write_metrics_csv,
    write_pgm,
    write_qci,
    write_qfs,
)

from conftest import make_plan


@pytest.fixture
def frames(rng):
    return rng.integers(0, 65536, size=(5, 6, 8)).astype(np.uint16)


class TestQfs:
    def test_roundtrip_bit_identical(self, tmp_path, frames):
        path = tmp_path / "stack.qfs"
        write_qfs(path, frames)
        back, flags = read_qfs(path)
        assert np.array_equal(back, frames)
        assert flags & 1

    def test_memmap_matches(self, tmp_path, frames):
        path = tmp_path / "stack.qfs"
        write_qfs(path, frames)
        mm, _ = read_qfs(path, memmap=True)
        assert np.array_equal(np.asarray(mm), frames)

    def test_bad_magic(self, tmp_path, frames):
        path = tmp_path / "stack.qfs"
        write_qfs(path, frames)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(ps.FormatError):
            read_qfs(path)

    def test_truncated_payload(self, tmp_path, frames):
        path = tmp_path / "stack.qfs"
        write_qfs(path, frames)
        data = path.read_bytes()
        path.write_bytes(data[:-7])
        with pytest.raises(ps.FormatError):
            read_qfs(path)

    def test_header_layout(self, tmp_path, frames):
        path = tmp_path / "stack.qfs"
        write_qfs(path, frames)
        raw = path.read_bytes()
        assert raw[:4] == b"QFS1"
        assert int.from_bytes(raw[4:8], "little") == 8  # width
        assert int.from_bytes(raw[8:12], "little") == 6  # height
        assert int.from_bytes(raw[12:16], "little") == 5  # frames
        assert len(raw) == 20 + 2 * 5 * 6 * 8

    def test_incremental_writer_matches(self, tmp_path, frames):
        a = tmp_path / "whole.qfs"
        b = tmp_path / "chunks.qfs"
        write_qfs(a, frames)
        with QfsWriter(b, width=8, height=6, n_frames=5) as w:
            w.append(frames[:2])
            w.append(frames[2])
            w.append(frames[3:])
        assert a.read_bytes() == b.read_bytes()

    def test_incremental_writer_count_enforced(self, tmp_path, frames):
        w = QfsWriter(tmp_path / "x.qfs", width=8, height=6, n_frames=5)
        w.append(frames[:3])
        with pytest.raises(ps.ValidationError):
            w.close()


class TestQci:
    def test_roundtrip(self, tmp_path, rng):
        values = rng.normal(size=(7, 9))
        path = tmp_path / "img.qci"
        write_qci(path, values)
        assert np.array_equal(read_qci(path), values)

    def test_header_is_16_bytes(self, tmp_path):
        path = tmp_path / "img.qci"
        write_qci(path, np.zeros((2, 3)))
        raw = path.read_bytes()
        assert raw[:4] == b"QCI1"
        assert int.from_bytes(raw[4:8], "little") == 3
        assert int.from_bytes(raw[8:12], "little") == 2
        assert len(raw) == 16 + 8 * 6

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "img.qci"
        path.write_bytes(b"XXXX" + b"\0" * 12)
        with pytest.raises(ps.FormatError):
            read_qci(path)


class TestPgm:
    def test_roundtrip_16bit(self, tmp_path, rng):
        values = rng.integers(0, 65536, size=(5, 7)).astype(np.uint16)
        path = tmp_path / "img.pgm"
        write_pgm(path, values)
        back, maxval = read_pgm(path)
        assert maxval == 65535
        assert np.array_equal(back, values)

    def test_8bit_with_comment(self, tmp_path):
        payload = bytes(range(12))
        path = tmp_path / "img8.pgm"
        path.write_bytes(b"P5\n# a comment\n4 3\n255\n" + payload)
        back, maxval = read_pgm(path)
        assert maxval == 255
        assert back.shape == (3, 4)
        assert back[2, 3] == 11

    def test_not_p5(self, tmp_path):
        path = tmp_path / "img.pgm"
        path.write_bytes(b"P2\n2 2\n255\n0 1 2 3")
        with pytest.raises(ps.FormatError):
            read_pgm(path)

    def test_scaling_helper(self):
        out = image_to_pgm16(np.array([[-1.0, 0.0, 1.0]]))
        assert list(out[0]) == [0, 32768, 65535]
        assert np.all(image_to_pgm16(np.zeros((2, 2))) == 0)


class TestFits:
    def test_roundtrip_bit_identical(self, tmp_path, frames):
        path = tmp_path / "stack.fits"
        write_fits(path, frames)
        back = read_fits(path)
        assert np.array_equal(back, frames)

    def test_block_alignment(self, tmp_path, frames):
        path = tmp_path / "stack.fits"
        write_fits(path, frames)
        assert len(path.read_bytes()) % 2880 == 0

    def test_single_frame_naxis2(self, tmp_path):
        # Hand-built NAXIS=2 primary HDU without BZERO.
        cards = [
            b"SIMPLE  =                    T".ljust(80),
            b"BITPIX  =                   16".ljust(80),
            b"NAXIS   =                    2".ljust(80),
            b"NAXIS1  =                    3".ljust(80),
            b"NAXIS2  =                    2".ljust(80),
            b"END".ljust(80),
        ]
        header = b"".join(cards)
        header += b" " * (-len(header) % 2880)
        data = np.array([[0, 1, 2], [3, 4, 5]], dtype=">i2").tobytes()
        data += b"\0" * (-len(data) % 2880)
        path = tmp_path / "one.fits"
        path.write_bytes(header + data)
        back = read_fits(path)
        assert back.shape == (1, 2, 3)
        assert back[0, 1, 2] == 5

    def test_rejects_wrong_bitpix(self, tmp_path):
        path = tmp_path / "bad.fits"
        cards = [
            b"SIMPLE  =                    T".ljust(80),
            b"BITPIX  =                  -32".ljust(80),
            b"NAXIS   =                    2".ljust(80),
            b"NAXIS1  =                    2".ljust(80),
            b"NAXIS2  =                    2".ljust(80),
            b"END".ljust(80),
        ]
        header = b"".join(cards)
        header += b" " * (-len(header) % 2880)
        path.write_bytes(header + b"\0" * 2880)
        with pytest.raises(ps.FormatError):
            read_fits(path)

    def test_rejects_non_fits(self, tmp_path):
        path = tmp_path / "junk.fits"
        path.write_bytes(b"\0" * 2880 * 2)
        with pytest.raises(ps.FormatError):
            read_fits(path)


class TestCsv:
    def test_metrics_header_fixed(self, tmp_path):
        path = tmp_path / "m.csv"
        write_metrics_csv(
            path,
            [
                {"metric": "cnr", "value": 3.25, "sem": 0.11, "n": 10,
                 "params": {"estimator": "covariance", "frames": 100}},
                {"metric": "esf_w_px", "value": 1.5, "sem": None, "n": 1, "params": {}},
            ],
        )
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "metric,value,sem,n,params"
        assert lines[1].startswith("cnr,3.25,0.11,10,")
        assert "estimator=covariance" in lines[1]
        assert lines[2] == "esf_w_px,1.5,,1,"

    def test_ledger_csv_schema(self, tmp_path):
        plan = make_plan(n_frames=8, pair_rate=20, record_pairs=True)
        _, ledger = ps.simulate_stack(plan)
        path = tmp_path / "ledger.csv"
        write_ledger_csv(path, ledger)
        lines = path.read_text().strip().splitlines()
        header = lines[0].split(",")
        assert header == [
            "pair_id", "frame", "rho_x_um", "rho_y_um",
            "ps_x", "ps_y", "pi_x", "pi_y", "transmitted", "registered",
        ]
        assert len(lines) - 1 == ledger.total_pairs
        registered = sum(int(line.split(",")[-1]) for line in lines[1:])
        assert registered == ledger.registered_pairs
        pair_ids = [int(line.split(",")[0]) for line in lines[1:]]
        assert pair_ids == list(range(ledger.total_pairs))
