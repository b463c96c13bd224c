"""Loop-based reference implementations used as test oracles."""
import math
from typing import List


def prototypes(embeddings, labels, num_classes):
    dim = len(embeddings[0])
    sums = [[0.0] * dim for _ in range(num_classes)]
    counts = [0] * num_classes
    for row, label in zip(embeddings, labels):
        counts[label] += 1
        for d in range(dim):
            sums[label][d] += row[d]
    out = []
    for c in range(num_classes):
        if counts[c] == 0:
            out.append([0.0] * dim)
        else:
            out.append([s / counts[c] for s in sums[c]])
    return out, counts


def cosine(protos):
    size = len(protos)
    sim = [[0.0] * size for _ in range(size)]
    for i in range(size):
        for j in range(size):
            dot = sum(a * b for a, b in zip(protos[i], protos[j]))
            norm_i = math.sqrt(sum(a * a for a in protos[i]))
            norm_j = math.sqrt(sum(b * b for b in protos[j]))
            sim[i][j] = dot / (norm_i * norm_j)
    return sim


def modulate(sim, counts, gamma):
    size = len(sim)
    out = []
    for i in range(size):
        exponents = [sim[i][j] / counts[j] ** gamma for j in range(size)]
        top = max(exponents)
        weights = [math.exp(e - top) for e in exponents]
        total = sum(weights)
        out.append([w / total for w in weights])
    return out


def smooth_uniform(labels, num_classes, epsilon):
    out = []
    for label in labels:
        out.append([(1 - epsilon) * (c == label) + epsilon / num_classes for c in range(num_classes)])
    return out


def smooth_row(labels, modulated, epsilon):
    num_classes = len(modulated)
    out = []
    for label in labels:
        out.append([(1 - epsilon) * (c == label) + epsilon * modulated[label][c] for c in range(num_classes)])
    return out


def ccece(scores, labels, num_bins):
    """Signed per-class error with predicted-class grouping."""
    num_classes = len(scores[0])
    stats = {}
    for row, label in zip(scores, labels):
        predicted = max(range(num_classes), key=lambda c: (row[c], -c))
        confidence = row[predicted]
        b = 0
        while b < num_bins - 1 and confidence > (b + 1) / num_bins:
            b += 1
        entry = stats.setdefault((predicted, b), [0, 0.0, 0.0])
        entry[0] += 1
        entry[1] += 1.0 if predicted == label else 0.0
        entry[2] += confidence

    delta = []
    for c in range(num_classes):
        total = sum(stats.get((c, b), [0])[0] for b in range(num_bins))
        if total == 0:
            delta.append(0.0)
            continue
        value = 0.0
        for b in range(num_bins):
            if (c, b) not in stats:
                continue
            n, hits, conf = stats[(c, b)]
            value += (n / total) * (hits / n - conf / n)
        delta.append(value)
    return delta


def correct(scores, delta, lam):
    out = []
    for row in scores:
        raw = [min(1.0, max(0.0, p + lam * d)) for p, d in zip(row, delta)]
        total = sum(raw)
        out.append(list(row) if total == 0 else [r / total for r in raw])
    return out


def retrieve(pool, queries, k) -> List[int]:
    seen, order = set(), []
    for query in queries:
        scored = []
        for index, row in enumerate(pool):
            dot = sum(a * b for a, b in zip(query, row))
            norm = math.sqrt(sum(a * a for a in query)) * math.sqrt(sum(b * b for b in row))
            scored.append((-dot / norm, index))
        scored.sort()
        for _, index in scored[:k]:
            if index not in seen:
                seen.add(index)
                order.append(index)
    return order
