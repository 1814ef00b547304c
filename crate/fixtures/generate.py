#!/usr/bin/env python3
"""Regenerate the scripted fixtures.

inception/  two-hop "spouse of the director of Inception" world
benchmark/  20 synthetic two-hop questions; odd k answer from the index-time
            graph, even k need a fallback and a write-back

Triple ids cited by the stub follow corpus order, so edit this script rather
than the generated files.
"""

import json
from pathlib import Path

ROOT = Path(__file__).resolve().parent


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows))


def write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n")


def verbalize(h, r, t):
    return " ".join(f"{h} {r} {t}".split())


def passage(doc):
    return f"{doc['title']}\n{doc['text']}" if doc["title"] else doc["text"]


CONFIG = """backend = "stub"
stub_script = "stub.json"
embedder = "fixture"
embedding_fixture = "embeddings.json"
"""


def rule(template, responses, when=None, repeat=False):
    r = {"template": template}
    if when:
        r["when"] = when
    r["responses"] = responses
    if repeat:
        r["repeat"] = True
    return r


def inception():
    out = ROOT / "inception"
    out.mkdir(exist_ok=True)
    docs = [
        {"id": "d1", "title": "Inception",
         "text": "Inception is a 2010 science fiction film written and directed by Christopher Nolan."},
        {"id": "d2", "title": "Christopher Nolan",
         "text": "Christopher Nolan is a British-American filmmaker. He is married to Emma Thomas, "
                 "with whom he co-founded the production company Syncopy."},
        {"id": "d3", "title": "Emma Thomas",
         "text": "Emma Thomas is an English film producer. She is married to Christopher Nolan."},
    ]
    extracted = {
        "Inception": [["Inception", "directed by", "Christopher Nolan"], ["Inception", "released in", "2010"]],
        # the index-time extraction misses the marriage on purpose
        "Christopher Nolan": [["Christopher Nolan", "nationality", "British-American"]],
        "Emma Thomas": [["Emma Thomas", "occupation", "film producer"]],
    }
    q1 = "Who directed Inception?"
    q2 = "Who is the spouse of Christopher Nolan?"
    spouse = ["Christopher Nolan", "spouse", "Emma Thomas"]

    rules = [rule("extract_triples", [extracted[d["title"]]], {"title": d["title"]}) for d in docs]
    rules += [
        rule("decompose", [[q1, "Who is the spouse of #1?"]], {"question": "director of Inception"}),
        rule("answer_from_triples",
             [{"answerable": True, "answer": "Christopher Nolan", "used_triple_ids": [0]}],
             {"question": q1}),
        rule("rewrite", [q2], {"question": "spouse of Christopher Nolan"}),
        rule("answer_from_triples",
             [{"answerable": False, "answer": "", "used_triple_ids": []},
              {"answerable": True, "answer": "Emma Thomas", "used_triple_ids": [4]}],
             {"question": q2}),
        rule("answer_from_docs", [{"answer": "Emma Thomas"}], {"question": q2}),
        # one genuinely new triple and one already in the graph
        rule("extract_triples", [[spouse, ["Christopher Nolan", "nationality", "British-American"]]],
             {"text": "married to Emma Thomas"}),
        rule("final_answer", ["Emma Thomas"], {"memory": "spouse | Emma Thomas"}),
    ]

    # axes: film, directed, released, nolan, nationality, emma, spouse, producer
    vectors = {
        verbalize("Inception", "directed by", "Christopher Nolan"): [1, 1, 0, 0.5, 0, 0, 0, 0],
        verbalize("Inception", "released in", "2010"): [1, 0, 1, 0, 0, 0, 0, 0],
        verbalize("Christopher Nolan", "nationality", "British-American"): [0, 0, 0, 1, 1, 0, 0, 0],
        verbalize("Emma Thomas", "occupation", "film producer"): [0, 0, 0, 0, 0, 1, 0, 1],
        verbalize(*spouse): [0, 0, 0, 1, 0, 0.5, 1, 0],
        q1: [1, 1, 0, 0, 0, 0, 0, 0],
        q2: [0, 0, 0, 1, 0, 0, 1, 0],
        passage(docs[0]): [1, 1, 1, 0.3, 0, 0, 0, 0],
        passage(docs[1]): [0, 0, 0, 1, 1, 0.3, 0.3, 0],
        passage(docs[2]): [0, 0, 0, 0.3, 0, 1, 0.3, 1],
    }

    write_jsonl(out / "corpus.jsonl", docs)
    write_json(out / "stub.json", {"rules": rules})
    write_json(out / "embeddings.json", {"dimension": 8, "vectors": vectors})
    (out / "config.toml").write_text(CONFIG)


N = 20


def benchmark():
    out = ROOT / "benchmark"
    out.mkdir(exist_ok=True)
    ks = [f"{k:02d}" for k in range(1, N + 1)]
    dim = N + 4
    DIR, SP, OCC, DOC = N, N + 1, N + 2, N + 3

    def vec(i, extra):
        v = [0.0] * dim
        v[i] = 1.0
        for axis, w in extra.items():
            v[axis] = w
        return v

    docs, extraction, ids = [], {}, {}
    next_id = 0
    for i, k in enumerate(ks):
        film, director, spouse = f"Film {k}", f"Director {k}", f"Spouse {k}"
        docs.append({"id": f"film-{k}", "title": film, "text": f"{film} is a drama film directed by {director}."})
        docs.append({"id": f"director-{k}", "title": director,
                     "text": f"{director} is a filmmaker. {director} is married to {spouse}."})
        extraction[film] = [[film, "directed by", director]]
        ids[("dir", k)] = next_id
        next_id += 1
        extraction[director] = [[director, "occupation", "filmmaker"]]
        next_id += 1
        if (i + 1) % 2 == 1:
            extraction[director].append([director, "spouse", spouse])
            ids[("sp", k)] = next_id
            next_id += 1
    # write-backs happen in dataset order, one per even k
    for i, k in enumerate(ks):
        if (i + 1) % 2 == 0:
            ids[("sp", k)] = next_id
            next_id += 1

    rules = [rule("extract_triples", [extraction[d["title"]]], {"title": d["title"]}) for d in docs]
    vectors = {}
    dataset = []
    for i, k in enumerate(ks):
        film, director, spouse = f"Film {k}", f"Director {k}", f"Spouse {k}"
        odd = (i + 1) % 2 == 1
        q = f"Who is the spouse of the director of {film}?"
        q1 = f"Who directed {film}?"
        q2 = f"Who is the spouse of {director}?"
        dataset.append({"id": f"bench-{k}", "question": q, "answers": [spouse]})
        yes = lambda used, ans: {"answerable": True, "answer": ans, "used_triple_ids": used}
        no = {"answerable": False, "answer": "", "used_triple_ids": []}

        rules.append(rule("decompose", [[q1, "Who is the spouse of #1?"]], {"question": q}, repeat=True))
        rules.append(rule("answer_from_triples", [yes([ids[("dir", k)]], director)], {"question": q1}, repeat=True))
        rules.append(rule("rewrite", [q2], {"question": q2}, repeat=True))
        sp = ids[("sp", k)]
        if odd:
            rules.append(rule("answer_from_triples", [yes([sp], spouse)], {"question": q2}, repeat=True))
            rules.append(rule("answer_from_triples", [yes([ids[("dir", k)], sp], spouse)], {"question": q}, repeat=True))
        else:
            rules.append(rule("answer_from_triples", [no, yes([sp], spouse)], {"question": q2}))
            rules.append(rule("answer_from_triples", [no, yes([ids[("dir", k)], sp], spouse)], {"question": q}))
            rules.append(rule("answer_from_docs", [{"answer": spouse}], {"question": q2}, repeat=True))
            rules.append(rule("answer_from_docs", [{"answer": spouse}], {"question": q}, repeat=True))
            rules.append(rule("extract_triples", [[[director, "spouse", spouse]]],
                              {"text": f"{director} is married to {spouse}"}))
        rules.append(rule("final_answer", [spouse], {"question": q}, repeat=True))

        vectors[verbalize(film, "directed by", director)] = vec(i, {DIR: 1.0})
        vectors[verbalize(director, "occupation", "filmmaker")] = vec(i, {OCC: 1.0})
        vectors[verbalize(director, "spouse", spouse)] = vec(i, {SP: 1.0})
        vectors[q1] = vec(i, {DIR: 1.0})
        vectors[q2] = vec(i, {SP: 1.0})
        vectors[q] = vec(i, {DIR: 0.5, SP: 0.5})
        vectors[passage(docs[2 * i])] = vec(i, {DOC: 1.0})
        vectors[passage(docs[2 * i + 1])] = vec(i, {DOC: 1.0, SP: 0.5})

    write_jsonl(out / "corpus.jsonl", docs)
    write_json(out / "stub.json", {"rules": rules})
    write_json(out / "embeddings.json", {"dimension": dim, "vectors": vectors})
    (out / "config.toml").write_text(CONFIG)
    write_jsonl(out / "dataset.jsonl", dataset)
    # three answered exactly, one gold shares no token with the prediction
    four = [dict(r) for r in dataset[0:8:2]]
    four[3]["answers"] = ["Nobody Known"]
    write_jsonl(out / "dataset4.jsonl", four)


if __name__ == "__main__":
    inception()
    benchmark()
