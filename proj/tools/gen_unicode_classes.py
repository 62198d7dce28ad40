#!/usr/bin/env python3
"""Regenerates src/unicode_classes.inc (codepoint ranges for \\p{P}, \\p{S}, \\p{N}).

Uses the `regex` module so the tables agree with the tokenizer used by sacrebleu.
"""
import sys
import regex

CLASSES = {"punctuation": r"\p{P}", "symbol": r"\p{S}", "number": r"\p{N}"}


def ranges(pattern):
    rx = regex.compile(pattern)
    out, start, prev = [], None, None
    for cp in range(0x110000):
        if 0xD800 <= cp <= 0xDFFF:
            continue
        hit = rx.fullmatch(chr(cp)) is not None
        if hit and start is None:
            start = cp
        if not hit and start is not None:
            out.append((start, prev))
            start = None
        prev = cp
    if start is not None:
        out.append((start, prev))
    return out


def main(path):
    with open(path, "w") as f:
        f.write("// Generated by tools/gen_unicode_classes.py (regex %s). Do not edit.\n" % regex.__version__)
        for name, pattern in CLASSES.items():
            rs = ranges(pattern)
            f.write("inline constexpr CodepointRange k_%s_ranges[] = {\n" % name)
            for lo, hi in rs:
                f.write("    {0x%X, 0x%X},\n" % (lo, hi))
            f.write("};\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/unicode_classes.inc")
