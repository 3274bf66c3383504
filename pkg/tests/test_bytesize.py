import pytest

from sllmsim.bytesize import format_bytes, parse_bandwidth, parse_bytes


def test_parse_plain_integer():
    assert parse_bytes("1234") == 1234
    assert parse_bytes(1234) == 1234


@pytest.mark.parametrize(
    "text,expected",
    [
        ("1KB", 1000),
        ("1KiB", 1024),
        ("16MiB", 16 * 1024**2),
        ("10GiB", 10 * 1024**3),
        ("1TB", 10**12),
        ("2.5GB", 2_500_000_000),
        ("1 GiB", 1024**3),
    ],
)
def test_parse_units(text, expected):
    assert parse_bytes(text) == expected


def test_parse_is_case_tolerant():
    assert parse_bytes("1gib") == parse_bytes("1GiB")
    assert parse_bytes("1gb") == parse_bytes("1GB")


def test_parse_rejects_garbage():
    for bad in ("", "GiB", "1.2.3GB", "-5MB", "10parsecs"):
        with pytest.raises(ValueError):
            parse_bytes(bad)


def test_parse_bandwidth_per_second_suffix():
    assert parse_bandwidth("5GB/s") == 5e9
    assert parse_bandwidth("50GB/s") == 50e9
    assert parse_bandwidth("1GiB/s") == float(1024**3)
    # Bare numbers are bytes per second already.
    assert parse_bandwidth(12e9) == 12e9


def test_format_bytes_round_numbers():
    assert format_bytes(1024**3) == "1.00GiB"
    assert format_bytes(16 * 1024**2) == "16.00MiB"
    assert format_bytes(512) == "512B"


def test_format_parse_round_trip_binary_units():
    for n in (1, 1024, 7 * 1024**2, 3 * 1024**3, 2 * 1024**4):
        assert parse_bytes(format_bytes(n)) == n
