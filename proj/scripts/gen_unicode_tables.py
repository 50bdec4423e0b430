import sys
import unicodedata

# Collect codepoint ranges for Unicode general categories L* (letters) and
# N* (numbers), plus whitespace, as used by the GPT-2 pre-tokenizer regex.
def ranges_for(pred, limit=0x110000):
    out = []
    start = None
    for cp in range(limit):
        ok = pred(chr(cp))
        if ok and start is None:
            start = cp
        elif not ok and start is not None:
            out.append((start, cp - 1))
            start = None
    if start is not None:
        out.append((start, limit - 1))
    return out

def cat(c):
    return unicodedata.category(c)

letters = ranges_for(lambda c: cat(c).startswith('L'))
numbers = ranges_for(lambda c: cat(c).startswith('N'))
# Python str.isspace covers the \s class of the regex module (which the GPT-2
# tokenizer regex relied on), including 0x1c-0x1f; explicitly list them.
spaces = ranges_for(lambda c: c.isspace())

def emit(name, rr):
    lines = [f"inline constexpr CpRange {name}[] = {{"]
    row = []
    for a, b in rr:
        row.append(f"{{0x{a:x},0x{b:x}}}")
        if len(row) == 6:
            lines.append("    " + ",".join(row) + ",")
            row = []
    if row:
        lines.append("    " + ",".join(row) + ",")
    lines.append("};")
    return "\n".join(lines)

print(f"// Generated by scripts/gen_unicode_tables.py from Python {sys.version.split()[0]}")
print(f"// unicodedata {unicodedata.unidata_version}. Do not edit by hand.")
print("#pragma once")
print("#include <cstdint>")
print()
print("namespace hc::bpe::detail {")
print()
print("struct CpRange { uint32_t lo, hi; };")
print()
print(emit("kLetterRanges", letters))
print()
print(emit("kNumberRanges", numbers))
print()
print(emit("kSpaceRanges", spaces))
print()
print("}  // namespace hc::bpe::detail")
