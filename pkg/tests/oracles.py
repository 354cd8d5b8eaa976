"""Independent oracles used by the tests.

Everything here is deliberately written from the problem statement, not from
the package implementation: a literal instruction parser + relation checker,
brute-force set/graph metrics, and little helpers. Keeping these separate is
what makes the dual-route comparisons meaningful.
"""

import re

import numpy as np

SHAPE_WORDS = ("cube", "sphere", "cylinder")
COLOR_WORDS = ("gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow")

_REL_TEXT = {
    "to the left of": "left-of",
    "to the right of": "right-of",
    "in front of": "front-of",
    "behind": "behind",
}


def parse_instruction(text):
    """Parse one templated instruction into its semantic pieces.

    Returns dict with keys: color, shape, center (bool), relations (list),
    anchor ("it" or (shape, color)).
    """
    m = re.match(r"add a (\w+) (\w+) (.+)$", text)
    if not m:
        raise ValueError(f"unparseable instruction: {text!r}")
    color, shape, rest = m.groups()
    assert color in COLOR_WORDS and shape in SHAPE_WORDS, text
    if rest == "at the center":
        return {"color": color, "shape": shape, "center": True, "relations": [], "anchor": None}
    m = re.match(r"(.+?) (it|the (\w+) (\w+))$", rest)
    if not m:
        raise ValueError(f"unparseable relation clause: {rest!r}")
    rel_clause = m.group(1)
    rels = []
    for part in rel_clause.split(" and "):
        if part not in _REL_TEXT:
            raise ValueError(f"unknown relation phrase {part!r} in {text!r}")
        rels.append(_REL_TEXT[part])
    if m.group(2) == "it":
        anchor = "it"
    else:
        anchor = (m.group(4), m.group(3))  # (shape, color)
    return {"color": color, "shape": shape, "center": False, "relations": rels, "anchor": anchor}


def relation_holds(cell_a, cell_b, rel):
    """Literal reading of the grid relations: lower rows are in front."""
    if rel == "left-of":
        return cell_a[1] < cell_b[1]
    if rel == "right-of":
        return cell_a[1] > cell_b[1]
    if rel == "front-of":
        return cell_a[0] > cell_b[0]
    if rel == "behind":
        return cell_a[0] < cell_b[0]
    raise ValueError(rel)


def check_episode_consistency(episode, grid_size):
    """Verify every instruction against the cumulative scene; returns a list
    of violation strings (empty when the episode is consistent)."""
    problems = []
    center = ((grid_size - 1) // 2, (grid_size - 1) // 2)
    for t, turn in enumerate(episode.turns):
        parsed = parse_instruction(turn.instruction)
        added = turn.added
        if (parsed["shape"], parsed["color"]) != (added.shape, added.color):
            problems.append(f"turn {t}: instruction names {parsed['shape']}/{parsed['color']}, added {added}")
        if t == 0:
            if not parsed["center"]:
                problems.append(f"turn 0: not a center instruction: {turn.instruction!r}")
            elif added.cell != center:
                problems.append(f"turn 0: object at {added.cell}, center is {center}")
            continue
        if parsed["center"]:
            problems.append(f"turn {t}: unexpected center instruction")
            continue
        prior = turn.objects[:-1]
        if parsed["anchor"] == "it":
            anchor_obj = prior[-1]
        else:
            matches = [o for o in prior if (o.shape, o.color) == parsed["anchor"]]
            if len(matches) != 1:
                problems.append(f"turn {t}: anchor {parsed['anchor']} matches {len(matches)} objects")
                continue
            anchor_obj = matches[0]
        for rel in parsed["relations"]:
            if not relation_holds(added.cell, anchor_obj.cell, rel):
                problems.append(
                    f"turn {t}: '{rel}' false for {added.cell} vs {anchor_obj.cell}: {turn.instruction!r}"
                )
    return problems


# -- brute-force metric oracles -------------------------------------------------


def brute_prf1(gt, gen):
    gt = set(gt)
    gen = set(gen)
    tp = sum(1 for c in gen if c in gt)
    if len(gen) == 0:
        p = 1.0 if len(gt) == 0 else 0.0
    else:
        p = tp / len(gen)
    r = 1.0 if len(gt) == 0 else tp / len(gt)
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f1


def brute_edges(objects):
    """Exhaustive pair enumeration of directed relation edges by category."""
    edges = set()
    for a in objects:
        for b in objects:
            if a is b:
                continue
            for rel in ("left-of", "right-of", "front-of", "behind"):
                if relation_holds((a.row, a.col), (b.row, b.col), rel):
                    edges.add(((a.shape, a.color), (b.shape, b.color), rel))
    return edges


def brute_rsim(gt_objects, gen_objects):
    gt_cats = {(o.shape, o.color) for o in gt_objects}
    gen_cats = {(o.shape, o.color) for o in gen_objects}
    common = gt_cats & gen_cats
    recall = 1.0 if not gt_cats else len(common) / len(gt_cats)
    gt_e = {e for e in brute_edges(gt_objects) if e[0] in common and e[1] in common}
    gen_e = {e for e in brute_edges(gen_objects) if e[0] in common and e[1] in common}
    ratio = 1.0 if not gt_e else len(gt_e & gen_e) / len(gt_e)
    return recall * ratio


def relational_double_loop(h, u, pos_w, pos_h, rel_w, rel_h, mix_w, slope=0.2):
    """Literal double-loop evaluation of the axis pooling + pairwise relation
    equations: pooled rows/columns, F([a_i, a_k, u_i]) summed over partners,
    concatenated per position, then a 1x1 mix.

    rel_w / rel_h: (W1, b1, W2, b2) of the two affine layers with a leaky
    rectifier between.
    """
    b, _c_h, H, W = h.shape

    def mlp(layer_a, bias_a, layer_b, bias_b, vec):
        hidden = layer_a @ vec + bias_a
        hidden = np.where(hidden > 0, hidden, slope * hidden)
        return layer_b @ hidden + bias_b

    out = np.zeros((b, mix_w.shape[0], H, W))
    for bi in range(b):
        hw = h[bi].mean(axis=2)  # [C, H]: mean over columns j
        uw = u[bi].mean(axis=2)
        hh = h[bi].mean(axis=1)  # [C, W]: mean over rows i
        uh = u[bi].mean(axis=1)
        r_w = np.zeros((H, rel_w[3].shape[0]))
        for i in range(H):
            acc = np.zeros(rel_w[3].shape[0])
            for k in range(H):
                a_i = hw[:, i] + pos_w[i]
                a_k = hw[:, k] + pos_w[k]
                acc += mlp(*rel_w, np.concatenate([a_i, a_k, uw[:, i]]))
            r_w[i] = acc
        r_h = np.zeros((W, rel_h[3].shape[0]))
        for j in range(W):
            acc = np.zeros(rel_h[3].shape[0])
            for k in range(W):
                a_j = hh[:, j] + pos_h[j]
                a_k = hh[:, k] + pos_h[k]
                acc += mlp(*rel_h, np.concatenate([a_j, a_k, uh[:, j]]))
            r_h[j] = acc
        for i in range(H):
            for j in range(W):
                r_hw = np.concatenate([r_h[j], r_w[i]])
                out[bi, :, i, j] = mix_w.reshape(mix_w.shape[0], -1) @ r_hw
    return out


def kl_closed_form(mu, logvar):
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    per = 0.5 * (mu ** 2 + np.exp(logvar) - logvar - 1.0)
    per = per.reshape(per.shape[0], -1).sum(axis=1) if per.ndim > 1 else np.array([per.sum()])
    return float(per.mean())
