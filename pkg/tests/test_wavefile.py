"""Waveform and table file round-trips and validation."""

import numpy as np
import pytest

from rawgrape.errors import StructuralError
from rawgrape.filters import ControlSequence
from rawgrape.wavefile import read_table, read_waveform, write_table, write_waveform


class TestWaveformFile:
    def test_exact_roundtrip(self, rng, tmp_path):
        seq = ControlSequence(
            2 * np.pi * 70e3 * rng.standard_normal((2, 37)), dt=1.234567890123e-7
        )
        path = tmp_path / "wave.txt"
        write_waveform(path, seq)
        back = read_waveform(path)
        assert np.array_equal(back.values, seq.values)
        assert back.dt == seq.dt
        # write -> read -> write is byte-identical
        path2 = tmp_path / "wave2.txt"
        write_waveform(path2, back)
        assert path.read_text() == path2.read_text()

    def test_header_fields_present(self, rng, tmp_path):
        seq = ControlSequence(rng.standard_normal((2, 4)), dt=1e-6)
        path = tmp_path / "wave.txt"
        write_waveform(path, seq)
        text = path.read_text()
        for token in ("# channels: 2", "# slices: 4", "# dt:", "# units: rad/s"):
            assert token in text
        assert "\r" not in text

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("# channels: 2\n# slices: 1\n0.0\t0.0\n")
        with pytest.raises(StructuralError, match="dt"):
            read_waveform(path)

    def test_row_count_mismatch_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text(
            "# channels: 2\n# slices: 3\n# dt: 1e-6\n# units: rad/s\n0.0\t0.0\n"
        )
        with pytest.raises(StructuralError, match="slices"):
            read_waveform(path)

    def test_bad_data_row_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text(
            "# channels: 2\n# slices: 1\n# dt: 1e-6\n# units: rad/s\nhello\tworld\n"
        )
        with pytest.raises(StructuralError, match="line 5"):
            read_waveform(path)


class TestTableFile:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "table.csv"
        rows = [["1", "2", "d0.s0.c0", "0.99"], ["1", "3", "d1.s0.c0", "0.5"]]
        write_table(path, ["param1", "param2", "member", "fidelity"], rows, {"note": "x"})
        cols, data, comments = read_table(path)
        assert cols == ["param1", "param2", "member", "fidelity"]
        assert data == rows
        assert comments == {"note": "x"}

    def test_empty_table_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(StructuralError):
            read_table(path)
