#!/usr/bin/env python3
"""Independent brute-force oracle for the fixture dump.

Implements the documented pipeline rules directly on the JSONL files and
prints the expected counts as JSON. fixture_golden.json is this script's
frozen output; the test suite compares the Rust pipeline against it.

Rules mirrored here:
  * required fields per record kind; created_utc must be > 0
  * t1_/t3_ prefixes stripped from parent/link ids
  * post text = title, or title + "\n" + selftext when selftext is a real
    body; tombstone = body/selftext of "[deleted]" or "[removed]"
  * filter order: explicit (over_18 flag or blocklist substring), then
    non-text (tombstone / empty / < 5 whitespace tokens / no letters),
    then the English heuristic (>= 10 tokens: >= 2 distinct hits from the
    fixed 50-word stopword list; else >= 90% ASCII among letters)
  * threads: comments attach to their post or an attached comment;
    everything else is an orphan (transitively)
  * instances: only posts with >= 2 surviving top-level comments; one
    instance per comment
  * label: parent > 0 -> 5*score >= 2*parent (the 40% rule, exact);
    parent <= 0 -> score >= 1. Top-level comments use the post score.
"""

import json
import sys

BLOCKLIST = ["zorblatt"]
MIN_TOKENS = 5

STOPWORDS = {
    "a", "about", "all", "an", "and", "as", "at", "be", "but", "by", "do",
    "for", "from", "get", "go", "have", "he", "her", "his", "i", "if", "in",
    "it", "me", "my", "not", "of", "on", "one", "or", "out", "say", "she",
    "so", "that", "the", "their", "there", "they", "this", "to", "up", "we",
    "what", "which", "who", "will", "with", "would", "you",
}
assert len(STOPWORDS) == 50


def strip_prefix(value):
    for p in ("t1_", "t3_"):
        if value.startswith(p):
            return value[len(p):]
    return value


def parse_int(value):
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value == int(value):
        return int(value)
    if isinstance(value, str):
        try:
            return int(value)
        except ValueError:
            return None
    return None


def parse_line(line, kind):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError:
        return None
    if not isinstance(obj, dict):
        return None
    base = ["id", "subreddit", "author"]
    needed = base + (["parent_id", "link_id", "body"] if kind == "comment"
                     else ["title", "selftext", "over_18"])
    for key in needed:
        if key not in obj:
            return None
        if key != "over_18" and not isinstance(obj[key], str):
            return None
    if kind == "post" and not isinstance(obj["over_18"], bool):
        return None
    created = parse_int(obj.get("created_utc"))
    score = parse_int(obj.get("score"))
    if created is None or created <= 0 or score is None or not obj["id"]:
        return None

    if kind == "comment":
        body = obj["body"]
        parent = strip_prefix(obj["parent_id"])
        link = strip_prefix(obj["link_id"])
        if not parent or not link:
            return None
        return {
            "kind": kind, "id": obj["id"], "parent": parent, "link": link,
            "text": body, "score": score, "over_18": bool(obj.get("over_18", False)),
            "tombstone": body.strip() in ("[deleted]", "[removed]"),
            "created": created,
        }
    tombstone = obj["selftext"].strip() in ("[deleted]", "[removed]")
    if obj["selftext"].strip() == "" or tombstone:
        text = obj["title"]
    else:
        text = obj["title"] + "\n" + obj["selftext"]
    return {
        "kind": kind, "id": obj["id"], "parent": None, "link": obj["id"],
        "text": text, "score": score, "over_18": obj["over_18"],
        "tombstone": tombstone, "created": created,
    }


def keep(rec):
    text = rec["text"]
    lowered = text.lower()
    if rec["over_18"] or any(term in lowered for term in BLOCKLIST):
        return "explicit"
    trimmed = text.strip()
    tokens = trimmed.split()
    if rec["tombstone"] or not trimmed or len(tokens) < MIN_TOKENS:
        return "non_text"
    if not any(c.isalpha() for c in trimmed):
        return "non_text"
    if len(tokens) >= 10:
        hits = {word_trim(tok.lower()) for tok in tokens} & STOPWORDS
        if len(hits) < 2:
            return "non_english"
    else:
        letters = [c for c in trimmed if c.isalpha()]
        ascii_letters = [c for c in letters if c.isascii()]
        if letters and len(ascii_letters) / len(letters) < 0.9:
            return "non_english"
    return "keep"


def word_trim(token):
    start, end = 0, len(token)
    while start < end and not token[start].isalnum():
        start += 1
    while end > start and not token[end - 1].isalnum():
        end -= 1
    return token[start:end]


def run_filter(path, kind):
    stats = {"read": 0, "malformed": 0, "explicit": 0, "non_text": 0,
             "non_english": 0, "kept": 0}
    kept = []
    for line in open(path, encoding="utf-8"):
        if not line.strip():
            continue
        stats["read"] += 1
        rec = parse_line(line, kind)
        if rec is None:
            stats["malformed"] += 1
            continue
        verdict = keep(rec)
        if verdict == "keep":
            stats["kept"] += 1
            kept.append(rec)
        else:
            stats[verdict] += 1
    total = sum(v for k, v in stats.items() if k != "read")
    assert total == stats["read"], f"{path}: identity violated"
    return stats, kept


def build_threads(posts, comments):
    post_ids = {p["id"] for p in posts}
    by_link = {}
    orphans = 0
    for c in comments:
        if c["link"] in post_ids:
            by_link.setdefault(c["link"], []).append(c)
        else:
            orphans += 1

    trees = []
    for post in posts:
        pending = by_link.get(post["id"], [])
        attached = {}
        top_level = []
        while True:
            progressed = False
            still = []
            for c in pending:
                if c["parent"] == post["id"] or c["parent"] in attached:
                    if c["parent"] == post["id"]:
                        top_level.append(c["id"])
                    attached[c["id"]] = c
                    progressed = True
                else:
                    still.append(c)
            pending = still
            if not pending or not progressed:
                break
        orphans += len(pending)
        if attached:
            trees.append((post, attached, top_level))
    return trees, orphans


def label(score, parent_score):
    if parent_score > 0:
        return 1 if 5 * score >= 2 * parent_score else 0
    return 1 if score >= 1 else 0


def count_instances(trees):
    n = pos = 0
    for post, attached, top_level in trees:
        if len(top_level) < 2:
            continue
        parent_score = {}
        for c in attached.values():
            parent_score[c["id"]] = (post["score"] if c["parent"] == post["id"]
                                     else attached[c["parent"]]["score"])
        for c in attached.values():
            n += 1
            pos += label(c["score"], parent_score[c["id"]])
    return n, pos


def main():
    post_stats, posts = run_filter("fixture_posts.jsonl", "post")
    comment_stats, comments = run_filter("fixture_comments.jsonl", "comment")
    trees, orphans = build_threads(posts, comments)
    eligible = sum(1 for _, _, top in trees if len(top) >= 2)
    instances, positives = count_instances(trees)
    golden = {
        "post_stats": post_stats,
        "comment_stats": comment_stats,
        "trees": len(trees),
        "eligible_trees": eligible,
        "orphans": orphans,
        "instances": instances,
        "label_positive": positives,
        "label_negative": instances - positives,
    }
    json.dump(golden, sys.stdout, indent=2, sort_keys=True)
    print()


if __name__ == "__main__":
    main()
