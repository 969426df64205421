import hashlib
import io
import json
import re

import pytest
from hypothesis import given, strategies as st

from datacommons.errors import MalformedAlias, MalformedRequest, UnsupportedAlgorithm
from datacommons.idmodel import (
    ARK, DOI, PLAIN, DigitalIdRecord, HashRecord, HashSet, canonical_json, compute_rev,
    digest_stream, parse_alias, union_urls,
)

NEXRAD = "ark:/31807/DC0-7b2c1002-e3c4-41ea-8edc-8fcee4ff3f47"
URLS = (
    "https://<osdc>/noaa-nexrad-l2/NWS_NEXRAD_NXL2DP_KDVN_201509_01.tar",
    "https://<osdc>/noaa-nexrad-l2/NWS_NEXRAD_NXL2DP_KDVN_201509_02.tar",
)


def nexrad_record(**overrides):
    fields = dict(name=NEXRAD, hashes=HashSet({"md5": "1e24480435408b664b756be0822028a3"}),
                  size=45893621760, authority="noaa-commons", metadata=None,
                  release="public", urls=URLS)
    fields.update(overrides)
    return DigitalIdRecord.create(**fields)


def test_parse_ark():
    alias = parse_alias(NEXRAD)
    assert alias.scheme == ARK
    assert alias.naan == "31807"
    assert alias.raw == NEXRAD


def test_parse_plain():
    assert parse_alias("my-dataset-v1").scheme == PLAIN


def _doi_ok(text):
    # Written independently of the implementation: "doi:" + "10." + digit
    # groups separated by dots + "/" + a non-empty suffix without spaces.
    if not text.lower().startswith("doi:"):
        return False
    prefix, slash, suffix = text[4:].partition("/")
    if not slash or not suffix or " " in suffix:
        return False
    parts = prefix.split(".")
    return parts[0] == "10" and len(parts) >= 2 and all(p.isdigit() for p in parts[1:])


@pytest.mark.parametrize("raw", [
    "doi:10.5072/FK2TEST", "doi:10.1000.10/abc", "doi:10/abc", "doi:11.5072/x",
    "doi:10.5072/", "doi:10.ab/x", "DOI:10.5072/FK2TEST",
])
def test_doi_classification_agrees_with_hand_validator(raw):
    if _doi_ok(raw):
        assert parse_alias(raw).scheme == DOI
    else:
        with pytest.raises(MalformedAlias):
            parse_alias(raw)


@pytest.mark.parametrize("raw", ["", "has space", "tab\there", "ark:/notdigits/x", "ark:/123/"])
def test_malformed_aliases(raw):
    with pytest.raises(MalformedAlias):
        parse_alias(raw)


def test_canonical_json_shape():
    assert canonical_json({"b": [3, 1], "a": "é"}) == '{"a":"é","b":[3,1]}'.encode()


def test_rev_of_fixture_matches_digest_tool():
    # sha256sum over the hand-written canonical text, first 8 hex chars.
    assert nexrad_record().rev == "c8dd8a36"
    assert nexrad_record(metadata="nexrad-kdvn-201509").rev == "fb2a2288"


def test_rev_is_deterministic_and_order_sensitive():
    assert nexrad_record().rev == nexrad_record().rev
    swapped = nexrad_record(urls=tuple(reversed(URLS)))
    assert swapped.rev != nexrad_record().rev


def test_rev_excludes_itself():
    doc = nexrad_record().to_dict()
    assert compute_rev(doc) == doc["rev"]
    assert compute_rev({**doc, "rev": "00000000"}) == doc["rev"]


def test_record_key_order_matches_published_document():
    assert list(nexrad_record().to_dict()) == [
        "hashes", "authority", "metadata", "name", "release", "rev", "size", "urls"]


def test_empty_stream_md5():
    hashes, size = digest_stream(b"", ["md5"])
    assert hashes.md5 == "d41d8cd98f00b204e9800998ecf8427e"
    assert size == 0


def test_abc_digests_match_coreutils():
    # md5sum / sha256sum / sha1sum of the three bytes "abc"
    hashes, size = digest_stream(io.BytesIO(b"abc"), ["md5", "sha256", "sha1"])
    assert size == 3
    assert hashes.to_dict() == {
        "md5": "900150983cd24fb0d6963f7d28e17f72",
        "sha1": "a9993e364706816aba3e25717850c26c9cd0d89d",
        "sha256": "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad",
    }


def test_digest_stream_accepts_chunk_iterables():
    whole, _ = digest_stream(b"hello world", ["md5"])
    parts, size = digest_stream([b"hello", b" ", b"world"], ["md5"])
    assert whole == parts and size == 11


def test_digest_requires_md5_and_known_algorithms():
    with pytest.raises(UnsupportedAlgorithm):
        digest_stream(b"x", ["sha256"])
    with pytest.raises(UnsupportedAlgorithm):
        digest_stream(b"x", ["md5", "crc32"])


def test_hashset_validation():
    with pytest.raises(MalformedRequest):
        HashSet({"sha256": "0" * 64})
    with pytest.raises(MalformedRequest):
        HashSet({"md5": "abc"})
    assert HashSet({"MD5": "A" * 32}).md5 == "a" * 32


def test_hashset_conflicts_are_per_algorithm():
    a = HashSet({"md5": "0" * 32, "sha256": "1" * 64})
    b = HashSet({"md5": "0" * 32, "sha256": "2" * 64})
    c = HashSet({"md5": "0" * 32, "sha1": "3" * 40})
    assert a.conflicts_with(b) == ["sha256"]
    assert a.conflicts_with(c) == []
    assert a.merged(c).algorithms() == ["md5", "sha1", "sha256"]


def test_union_urls_keeps_first_seen_order():
    assert union_urls(["b", "a"], ["a", "c", "b"]) == ("b", "a", "c")


def test_record_validation():
    with pytest.raises(MalformedRequest):
        nexrad_record(size=-1)
    with pytest.raises(MalformedRequest):
        nexrad_record(release="secret")
    with pytest.raises(MalformedRequest):
        nexrad_record(urls=("has space",))


hex_ = lambda n: st.text("0123456789abcdef", min_size=n, max_size=n)
records = st.builds(
    lambda name, md5, sha, size, auth, meta, rel, urls: DigitalIdRecord.create(
        name=name, hashes=HashSet({"md5": md5, **({"sha256": sha} if sha else {})}),
        size=size, authority=auth, metadata=meta, release=rel, urls=tuple(urls)),
    st.from_regex(r"ark:/[0-9]{3,6}/[A-Za-z0-9-]{1,20}", fullmatch=True)
    | st.from_regex(r"[a-z][a-z0-9-]{0,20}", fullmatch=True),
    hex_(32), st.none() | hex_(64), st.integers(0, 2**50),
    st.from_regex(r"[a-z]{1,10}-commons", fullmatch=True),
    st.none() | st.from_regex(r"[a-z0-9]{1,12}", fullmatch=True),
    st.sampled_from(["public", "controlled"]),
    st.lists(st.from_regex(r"https://h/[a-z0-9/]{1,20}", fullmatch=True), max_size=4),
)


@given(records)
def test_serialize_parse_round_trip(record):
    text = json.dumps(record.to_dict())
    again = DigitalIdRecord.from_dict(json.loads(text))
    assert again == record
    assert again.verify_rev()


@given(records)
def test_rev_is_sha256_prefix_of_canonical_body(record):
    body = {k: v for k, v in record.to_dict().items() if k != "rev"}
    text = json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    assert record.rev == hashlib.sha256(text.encode()).hexdigest()[:8]
    assert re.fullmatch(r"[0-9a-f]{8}", record.rev)


def test_hash_record_round_trip():
    rec = HashRecord(HashSet({"md5": "0" * 32}), 5, ("u1", "u2"))
    assert HashRecord.from_dict(rec.to_dict()) == rec
    assert list(rec.to_dict()) == ["hashes", "size", "urls"]
