import json

import pytest

from flowfabric.storage import (
    CorruptJournal,
    NdjsonLog,
    atomic_write_json,
    read_json,
    read_ndjson,
)


class TestNdjsonLog:
    def test_append_then_read_roundtrip(self, tmp_path):
        log = NdjsonLog(tmp_path / "x.ndjson")
        log.append({"a": 1})
        log.append({"b": [1, 2]})
        log.close()
        assert read_ndjson(tmp_path / "x.ndjson") == [{"a": 1}, {"b": [1, 2]}]

    def test_torn_tail_ignored(self, tmp_path):
        path = tmp_path / "torn.ndjson"
        log = NdjsonLog(path)
        log.append({"ok": 1})
        log.close()
        with open(path, "ab") as fh:
            fh.write(b'{"half": tr')  # crash mid-append, no newline
        assert read_ndjson(path) == [{"ok": 1}]

    def test_committed_tail_without_corruption_still_read(self, tmp_path):
        path = tmp_path / "tail.ndjson"
        with open(path, "wb") as fh:
            fh.write(b'{"a": 1}\n{"b": 2}')  # valid JSON tail missing newline
        assert read_ndjson(path) == [{"a": 1}, {"b": 2}]

    def test_mid_file_corruption_fail_stop(self, tmp_path):
        path = tmp_path / "corrupt.ndjson"
        with open(path, "wb") as fh:
            fh.write(b'{"a": 1}\nnot json at all\n{"b": 2}\n')
        with pytest.raises(CorruptJournal):
            read_ndjson(path)

    def test_missing_and_empty_files(self, tmp_path):
        assert read_ndjson(tmp_path / "nope.ndjson") == []
        (tmp_path / "empty.ndjson").write_bytes(b"")
        assert read_ndjson(tmp_path / "empty.ndjson") == []

    def test_reopen_appends_after_existing_records(self, tmp_path):
        path = tmp_path / "again.ndjson"
        log = NdjsonLog(path)
        log.append({"n": 1})
        log.close()
        log2 = NdjsonLog(path)
        log2.append({"n": 2})
        log2.close()
        assert [r["n"] for r in read_ndjson(path)] == [1, 2]


class TestAtomicJson:
    def test_replace_is_all_or_nothing(self, tmp_path):
        path = tmp_path / "doc.json"
        atomic_write_json(path, {"v": 1})
        atomic_write_json(path, {"v": 2})
        assert read_json(path) == {"v": 2}
        assert not path.with_name(path.name + ".tmp").exists()

    def test_read_json_defaults(self, tmp_path):
        assert read_json(tmp_path / "missing.json", default={"d": 1}) == {"d": 1}
        (tmp_path / "bad.json").write_text("{broken")
        assert read_json(tmp_path / "bad.json", default=None) is None
