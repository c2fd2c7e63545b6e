"""Import a wine-review CSV and prepare it for the tokenizer.

Wine reviews arrive with the producer, vintage, wine name, and grape spread
over separate columns. The importer composes an item title from those parts
(skipping blanks, recovering the year from the review headline when no year
column exists) and keeps the tasting note as the description. Rows without
usable text are dropped and counted, never silently patched.
"""

import tempfile
from pathlib import Path

from recobert.catalog import import_wine_csv
from recobert.tokenizer import build_vocab, encode_pair, tokenize

CSV = """\
winery,title,designation,variety,description
Quinta Nova,Quinta Nova 2011 Reserva (Douro),Reserva,Touriga Nacional,"Dense, inky and structured, with black plum and graphite."
Bodega Norton,Norton 2012 Malbec (Mendoza),,Malbec,"Ripe berry aromas lead to a juicy, medium-bodied palate."
Chateau Blank,Blank NV Rouge,,,
Famiglia Rossi,Rossi 2015 Chianti (Tuscany),Riserva,Sangiovese,"Cherry and leather with firm tannins and bright acidity."
"""

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "reviews.csv"
    path.write_text(CSV, encoding="utf-8")
    catalog, stats = import_wine_csv(path)

print(f"imported {stats.imported}/{stats.total_rows} rows "
      f"({stats.dropped_empty_description} dropped for missing text)\n")
for item in catalog:
    print(f"{item.id}: {item.title}")
    print(f"     {item.description}")

# Tokenization lowercases, applies Unicode compatibility normalization, and
# splits punctuation into standalone tokens.
first = catalog.get("0")
tokens = tokenize(first.description)
print(f"\ndescription tokens: {tokens[:10]} ...")

# The vocabulary ranks tokens by frequency (ties alphabetical) after five
# reserved specials; unseen words fall back to the unknown token at encode
# time rather than failing.
vocab = build_vocab(f"{it.title} {it.description}" for it in catalog)
print(f"vocabulary size {len(vocab)} including 5 specials")

# A title-description pair becomes one sequence: [CLS] title [SEP] desc [SEP]
# with segment 0 over the title half and 1 over the description half.
seq = encode_pair(tokenize(first.title), tokenize(first.description), vocab, 24)
print(f"\nencoded ids:      {list(seq.ids)}")
print(f"segments:         {list(seq.segments)}")
print(f"title span {seq.title_span}, desc span {seq.desc_span}, "
      f"{seq.pad_len} padding positions")
