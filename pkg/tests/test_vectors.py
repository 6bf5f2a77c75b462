from madtls.vectors import check_vectors, format_vectors, generate_vectors, parse_vectors


def test_vectors_are_deterministic():
    assert generate_vectors(4) == generate_vectors(4)
    assert generate_vectors(4) != generate_vectors(5)


def test_vector_file_verifies_and_detects_corruption():
    text = format_vectors(generate_vectors(1))
    assert check_vectors(text) == []
    pairs = parse_vectors(text)
    labels = [label for label, _ in pairs]
    assert {"kdf.output", "mac.output", "stream.cipher.ctx3.offset5", "record.hop0", "record.hop2"} <= set(labels)
    corrupted = text.replace(dict(pairs)["mac.output"], "00" * 16)
    assert any("mac.output" in p for p in check_vectors(corrupted))
    missing = "\n".join(line for line in text.splitlines() if not line.startswith("key.kd"))
    assert any("missing" in p for p in check_vectors(missing))
    assert check_vectors("garbage line") != []
