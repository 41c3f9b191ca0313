"""Global instance ids, 2D-3D mask association, class voting and correction."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .instgraph import InstanceClusters, instance_masks
from .rasterizer import IdBuffer
from .scene_io import UNKNOWN, UNLABELED, ClassTable, FormatError, LabelImage
from .superface import SuperfaceSegmentation

DEFAULT_IOU = 0.25
IMAP_FORMAT = "panolabel-instance-map"
IMAP_VERSION = 1


@dataclass
class Instance:
    nodes: np.ndarray  # superface ids
    area: float
    class_id: int = UNKNOWN
    matches: dict[str, set[int]] = field(default_factory=dict)  # frame id -> matched 2D ids


@dataclass
class InstanceMap:
    instances: dict[int, Instance]  # global id (dense from 1) -> instance
    node_to_instance: np.ndarray  # (n_nodes,) global id per superface

    def __len__(self) -> int:
        return len(self.instances)

    def face_instance(self, seg: SuperfaceSegmentation) -> np.ndarray:
        return self.node_to_instance[seg.face_to_sf]

    def classes(self) -> dict[int, int]:
        return {i: inst.class_id for i, inst in self.instances.items()}

    def labelled_ids(self) -> list[int]:
        """Instances that received a class from at least one 2D observation."""
        return [i for i, inst in sorted(self.instances.items()) if inst.class_id != UNKNOWN]

    def to_json(self) -> str:
        doc = {
            "format": IMAP_FORMAT,
            "version": IMAP_VERSION,
            "instances": [
                {
                    "id": i,
                    "class": inst.class_id,
                    "area": round(inst.area, 9),
                    "superfaces": inst.nodes.tolist(),
                    "matches": {fid: sorted(ids) for fid, ids in sorted(inst.matches.items())},
                }
                for i, inst in sorted(self.instances.items())
            ]
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, n_nodes: int | None = None) -> "InstanceMap":
        doc = json.loads(text)
        if doc.get("format") != IMAP_FORMAT or doc.get("version") != IMAP_VERSION:
            raise FormatError(f"not an instance map of version {IMAP_VERSION}")
        inst = {}
        for rec in doc["instances"]:
            inst[rec["id"]] = Instance(
                np.array(rec["superfaces"], dtype=np.int64),
                float(rec["area"]),
                int(rec["class"]),
                {fid: set(ids) for fid, ids in rec["matches"].items()},
            )
        n = n_nodes if n_nodes is not None else 1 + max((int(i.nodes.max()) for i in inst.values() if len(i.nodes)), default=-1)
        lut = np.zeros(n, dtype=np.int64)
        for gid, i in inst.items():
            lut[i.nodes] = gid
        return cls(inst, lut)


def assign_global_ids(clusters: InstanceClusters, node_area: np.ndarray) -> InstanceMap:
    """Ids ordered by descending total area, then lowest member node."""
    members = clusters.members()
    keyed = []
    for cid, nodes in members.items():
        keyed.append((-float(node_area[nodes].sum()), int(nodes.min()), cid))
    keyed.sort()
    lut = np.zeros(len(clusters.node_to_cluster), dtype=np.int64)
    out = {}
    for gid, (neg_area, _, cid) in enumerate(keyed, start=1):
        nodes = members[cid]
        out[gid] = Instance(nodes, -neg_area)
        lut[nodes] = gid
    return InstanceMap(out, lut)


def project_instances(imap: InstanceMap, idbuf: IdBuffer, seg: SuperfaceSegmentation) -> np.ndarray:
    """Per-pixel global instance id of the visible surface (0 = background)."""
    fi = idbuf.face_index
    out = np.zeros(fi.shape, dtype=np.int64)
    hit = fi >= 0
    out[hit] = imap.node_to_instance[seg.face_to_sf[fi[hit]]]
    return out


def iou_table(proj: np.ndarray, masks: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """IoU between every projected 3D instance and every 2D mask id.

    Returns (ids_3d, ids_2d, iou[len(ids_3d), len(ids_2d)]).
    """
    ids3, inv3 = np.unique(proj.reshape(-1), return_inverse=True)
    ids2, inv2 = np.unique(masks.reshape(-1), return_inverse=True)
    inter = np.bincount(inv3 * len(ids2) + inv2, minlength=len(ids3) * len(ids2)).reshape(len(ids3), len(ids2))
    a3 = inter.sum(axis=1)
    a2 = inter.sum(axis=0)
    keep3 = ids3 != 0
    keep2 = ids2 != UNLABELED
    inter = inter[np.ix_(keep3, keep2)].astype(np.float64)
    union = a3[keep3][:, None] + a2[keep2][None, :] - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    return ids3[keep3], ids2[keep2], iou


def greedy_match(iou: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """Injective (row, col) pairs by descending IoU; ties by lower col, then row."""
    r, c = np.nonzero(iou >= threshold)
    order = np.lexsort((r, c, -iou[r, c]))
    used_r, used_c, out = set(), set(), []
    for k in order:
        i, j = int(r[k]), int(c[k])
        if i in used_r or j in used_c:
            continue
        used_r.add(i)
        used_c.add(j)
        out.append((i, j))
    return out


def match_frame(
    imap: InstanceMap,
    idbuf: IdBuffer,
    seg: SuperfaceSegmentation,
    labels: LabelImage,
    iou_threshold: float = DEFAULT_IOU,
    classes: ClassTable | None = None,
) -> dict[int, int]:
    """2D thing-mask id -> global 3D id for one frame; unmatched masks are absent."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou threshold must lie in (0, 1]")
    proj = project_instances(imap, idbuf, seg)
    masks = instance_masks(labels, classes)
    ids3, ids2, iou = iou_table(proj, masks)
    return {int(ids2[j]): int(ids3[i]) for i, j in greedy_match(iou, iou_threshold)}


def vote_class(
    imap: InstanceMap,
    labels: dict[str, LabelImage],
    matches: dict[str, dict[int, int]],
) -> InstanceMap:
    """Pixel-weighted majority class over every matched 2D mask; ties to the lower id."""
    tally: dict[int, dict[int, int]] = {}
    for inst in imap.instances.values():
        inst.matches = {}
        inst.class_id = UNKNOWN
    for fid, m in sorted(matches.items()):
        lab = labels[fid]
        for j, gid in m.items():
            px = lab.class_id[lab.instance_id == j]
            px = px[px != UNKNOWN]
            cnt = np.bincount(px)
            t = tally.setdefault(gid, {})
            for c in np.flatnonzero(cnt):
                t[int(c)] = t.get(int(c), 0) + int(cnt[c])
            imap.instances[gid].matches.setdefault(fid, set()).add(j)
    for gid, t in tally.items():
        if t:
            imap.instances[gid].class_id = min(t, key=lambda c: (-t[c], c))
    return imap


def correct_labels(
    imap: InstanceMap,
    labels: LabelImage,
    match: dict[int, int],
    classes: ClassTable | None = None,
) -> tuple[LabelImage, list[int]]:
    """Rewrite one frame's thing masks to global ids and voted classes.

    Matched masks take their 3D instance's id and class. Unmatched thing masks
    keep their class but lose their (frame-local) id, so every surviving
    instance id is globally unique; they are returned as flagged. Stuff pixels
    are untouched.
    """
    inst = labels.instance_id.copy()
    cls = labels.class_id.copy()
    masks = instance_masks(labels, classes)
    flagged = []
    for j in np.unique(masks[masks != UNLABELED]).tolist():
        m = masks == j
        gid = match.get(int(j))
        if gid is None:
            inst[m] = UNLABELED
            flagged.append(int(j))
            continue
        inst[m] = gid
        voted = imap.instances[gid].class_id
        if voted != UNKNOWN:
            cls[m] = voted
    score = None if labels.score is None else labels.score.copy()
    return LabelImage(inst, cls, score), flagged


@dataclass
class Association:
    imap: InstanceMap
    matches: dict[str, dict[int, int]]
    corrected: dict[str, LabelImage]
    flagged: dict[str, list[int]]


def associate(
    clusters: InstanceClusters,
    node_area: np.ndarray,
    seg: SuperfaceSegmentation,
    frame_ids: Sequence[str],
    idbufs: Sequence[IdBuffer],
    labels: Sequence[LabelImage],
    iou_threshold: float = DEFAULT_IOU,
    classes: ClassTable | None = None,
) -> Association:
    imap = assign_global_ids(clusters, node_area)
    lab = dict(zip(frame_ids, labels))
    matches = {fid: match_frame(imap, ib, seg, l, iou_threshold, classes) for fid, ib, l in zip(frame_ids, idbufs, labels)}
    vote_class(imap, lab, matches)
    corrected, flagged = {}, {}
    for fid in frame_ids:
        corrected[fid], flagged[fid] = correct_labels(imap, lab[fid], matches[fid], classes)
    return Association(imap, matches, corrected, flagged)


def save_imap(path, imap: InstanceMap) -> None:
    Path(path).write_text(imap.to_json())


def load_imap(path, n_nodes: int | None = None) -> InstanceMap:
    return InstanceMap.from_json(Path(path).read_text(), n_nodes)


def fuse_mesh_labels(
    imap: InstanceMap,
    seg: SuperfaceSegmentation,
    idbufs: Sequence[IdBuffer],
    labels: Sequence[LabelImage],
    classes: ClassTable,
) -> tuple[np.ndarray, np.ndarray]:
    """Panoptic label per mesh face: (class id, instance id).

    Superfaces of a classified instance take its id and class. Every other
    superface takes the pixel-majority class of the labels it projects to if
    that class is stuff, else UNKNOWN (a thing without a 3D instance).
    """
    n = seg.n_superfaces
    k = len(classes) + 1
    votes = np.zeros(n * k, dtype=np.int64)
    for ib, lab in zip(idbufs, labels):
        fi = ib.face_index.reshape(-1)
        cls = lab.class_id.reshape(-1).astype(np.int64)
        m = (fi >= 0) & (cls != UNKNOWN) & (cls < k)
        votes += np.bincount(seg.face_to_sf[fi[m]] * k + cls[m], minlength=n * k)
    votes = votes.reshape(n, k)
    sf_class = np.where(votes.sum(axis=1) > 0, votes.argmax(axis=1), UNKNOWN)
    stuff = np.zeros(k, dtype=bool)
    stuff[classes.stuff_ids()] = True
    sf_class = np.where(stuff[sf_class], sf_class, UNKNOWN)
    sf_inst = np.zeros(n, dtype=np.int64)
    for gid, inst in imap.instances.items():
        if inst.class_id != UNKNOWN:
            sf_inst[inst.nodes] = gid
            sf_class[inst.nodes] = inst.class_id
    return sf_class[seg.face_to_sf], sf_inst[seg.face_to_sf]


def labels_from_faces(idbuf: IdBuffer, face_class: np.ndarray, face_instance: np.ndarray) -> LabelImage:
    """Rasterised panoptic labels of a face-labelled mesh."""
    fi = idbuf.face_index
    hit = fi >= 0
    cls = np.zeros(fi.shape, dtype=np.uint32)
    inst = np.zeros(fi.shape, dtype=np.uint32)
    cls[hit] = face_class[fi[hit]]
    inst[hit] = face_instance[fi[hit]]
    return LabelImage(inst, cls)
