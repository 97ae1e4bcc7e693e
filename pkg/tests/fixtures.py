"""Hand-built inputs with hand-derived expected outcomes."""

from webvse.data_io import WebManifestEntry


def filter_fixture():
    """Manifest touching every filter rule; returns (entries, vocabulary, expected rejections).

    Expected accept/reject partition, worked out by hand:
      * ``lone``: one vocabulary tag and no ``:en`` marker -> english
      * ``q000``..``q202``: 203 items for query ``dog`` from distinct owners -> the last 3 hit per_query
      * ``own0``..``own6``: 7 items from owner ``spam`` -> the last 2 hit per_owner
      * ``dupA`` then ``dupB``: same first five tags, reordered and pluralized -> dupB is a duplicate
      * ``dupC``: shares dupA's first five tags but differs in the sixth -> duplicate
      * ``marked``: no vocabulary tags but two ``:en`` markers -> accepted
      * ``late``: over the owner cap only if per_query rejects were counted -> accepted
    """
    vocab = {"dog", "cat", "red", "ball", "grass", "park", "tree"} | {f"t{k}" for k in range(300)}
    entries = [WebManifestEntry("lone", "u_lone", "cat", ["cat", "xyzzy"])]
    for k in range(203):
        owner = "u_late" if k >= 200 else f"u{k:03d}"
        entries.append(WebManifestEntry(f"q{k:03d}", owner, "dog", ["dog", f"t{k}"]))
    for k in range(7):
        entries.append(WebManifestEntry(f"own{k}", "spam", "cat", ["cat", f"t{k + 210}"]))
    entries.append(WebManifestEntry("dupA", "u_a", "ball", ["red", "ball", "grass", "park", "tree"]))
    entries.append(WebManifestEntry("dupB", "u_b", "ball", ["trees", "park", "grass", "balls", "red"]))
    entries.append(WebManifestEntry("dupC", "u_c", "ball", ["red", "ball", "grass", "park", "tree", "t299"]))
    entries.append(WebManifestEntry("marked", "u_m", "kea", ["kea", "tui"], [True, True]))
    for k in range(5):
        entries.append(WebManifestEntry(f"late{k}", "u_late", "park", ["park", f"t{k + 220}"]))
    expected = {"lone": "english", "q200": "per_query", "q201": "per_query", "q202": "per_query",
                "own5": "per_owner", "own6": "per_owner", "dupB": "duplicate", "dupC": "duplicate"}
    return entries, vocab, expected
