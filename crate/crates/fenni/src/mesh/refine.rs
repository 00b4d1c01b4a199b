//! Red-green mesh refinement.
//!
//! Marked elements are split red (four children through edge midpoints).
//! Neighbors left with one bisected edge are split green (two children)
//! to restore conformity; neighbors with two or more bisected edges are
//! promoted to red. Green pairs are bookkeeping, not real refinement:
//! they are collapsed back to their parent before the parent region is
//! refined further, and their children do not count as split.

use std::collections::{BTreeMap, BTreeSet};

use super::{Element, GreenParent, Mesh, MeshError, Node};

/// Result of one refinement pass. Node ids of the input mesh are
/// preserved; new midpoint nodes are appended.
pub struct RefineOutcome {
    pub mesh: Mesh,
    /// (new node id, parent edge endpoints) for every created midpoint.
    pub new_nodes: Vec<(usize, (usize, usize))>,
}

/// Split the marked elements, restoring conformity with green splits.
/// Marked elements already at `max_splits` are skipped. Red children
/// inherit `split_count + 1`; green children keep their parent's count.
pub fn red_green_refine(
    mesh: &Mesh,
    marked: &BTreeSet<usize>,
    max_splits: u32,
) -> Result<RefineOutcome, MeshError> {
    if mesh.dim == 1 {
        refine_1d(mesh, marked, max_splits)
    } else {
        refine_2d(mesh, marked, max_splits)
    }
}

fn refine_1d(
    mesh: &Mesh,
    marked: &BTreeSet<usize>,
    max_splits: u32,
) -> Result<RefineOutcome, MeshError> {
    if mesh.order != 1 {
        return Err(MeshError::UnsupportedRefinement(
            "1D refinement supports linear elements only".to_string(),
        ));
    }
    let mut nodes = mesh.nodes.clone();
    let mut elements = Vec::with_capacity(mesh.n_elements() + marked.len());
    let mut new_nodes = Vec::new();
    for elem in &mesh.elements {
        let splittable = marked.contains(&elem.id) && elem.split_count < max_splits;
        if !splittable {
            elements.push(elem.clone());
            continue;
        }
        let (a, b) = (elem.node_ids[0], elem.node_ids[1]);
        let mid = nodes.len();
        nodes.push(Node {
            id: mid,
            coords: [0.5 * (nodes[a].coords[0] + nodes[b].coords[0]), 0.0],
            on_boundary: false,
            boundary_tag: None,
        });
        new_nodes.push((mid, (a, b)));
        for ids in [[a, mid], [mid, b]] {
            let mut child = Element::new(elements.len(), ids.to_vec());
            child.split_count = elem.split_count + 1;
            elements.push(child);
        }
    }
    let mesh = Mesh::from_raw(1, mesh.order, nodes, elements)?;
    Ok(RefineOutcome { mesh, new_nodes })
}

/// Element of the collapsed ("virtual") mesh in which every green pair is
/// replaced by its parent triangle.
struct VirtElem {
    nodes: [usize; 3],
    split_count: u32,
    jacobian_prev: Option<f64>,
    /// Midpoint of the previously green-bisected edge, if this element is
    /// a collapsed green parent.
    prior_mid: Option<usize>,
    /// The bisected parent edge belonging to `prior_mid`.
    prior_edge: Option<(usize, usize)>,
}

impl VirtElem {
    fn edges(&self) -> [(usize, usize); 3] {
        [
            edge_key(self.nodes[0], self.nodes[1]),
            edge_key(self.nodes[1], self.nodes[2]),
            edge_key(self.nodes[2], self.nodes[0]),
        ]
    }

    /// Halves of the previously bisected edge, as seen by the finer
    /// elements across it.
    fn prior_halves(&self) -> Option<[(usize, usize); 2]> {
        match (self.prior_edge, self.prior_mid) {
            (Some((p, q)), Some(m)) => Some([edge_key(p, m), edge_key(m, q)]),
            _ => None,
        }
    }
}

fn sorted3(n: [usize; 3]) -> [usize; 3] {
    let mut s = n;
    s.sort_unstable();
    s
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

fn refine_2d(
    mesh: &Mesh,
    marked: &BTreeSet<usize>,
    max_splits: u32,
) -> Result<RefineOutcome, MeshError> {
    // Collapse green pairs to their parents.
    let mut virt: Vec<VirtElem> = Vec::new();
    let mut cur2virt: Vec<usize> = vec![usize::MAX; mesh.n_elements()];
    let mut green_groups: BTreeMap<[usize; 3], usize> = BTreeMap::new();
    let mut green_members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for elem in &mesh.elements {
        match &elem.green_parent {
            None => {
                cur2virt[elem.id] = virt.len();
                virt.push(VirtElem {
                    nodes: [elem.node_ids[0], elem.node_ids[1], elem.node_ids[2]],
                    split_count: elem.split_count,
                    jacobian_prev: elem.jacobian_prev,
                    prior_mid: None,
                    prior_edge: None,
                });
            }
            Some(gp) => {
                let key = sorted3(gp.nodes);
                let vid = *green_groups.entry(key).or_insert_with(|| {
                    virt.push(VirtElem {
                        nodes: gp.nodes,
                        split_count: elem.split_count,
                        jacobian_prev: None,
                        prior_mid: Some(gp.mid),
                        prior_edge: None,
                    });
                    virt.len() - 1
                });
                cur2virt[elem.id] = vid;
                green_members.entry(vid).or_default().push(elem.id);
                if virt[vid].prior_mid != Some(gp.mid) {
                    return Err(MeshError::NonConforming(
                        "green siblings disagree on their parent midpoint".to_string(),
                    ));
                }
            }
        }
    }
    // Edges that already carry a midpoint (from collapsed greens). The
    // bisected parent edge is the one opposite the vertex shared by both
    // children besides the midpoint.
    let mut edge_mid: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut mandatory: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (vid, members) in &green_members {
        if members.len() != 2 {
            return Err(MeshError::NonConforming(format!(
                "green parent {:?} has {} children",
                virt[*vid].nodes,
                members.len()
            )));
        }
        let mid = virt[*vid].prior_mid.expect("collapsed parent has a midpoint");
        let set1: BTreeSet<usize> = mesh.elements[members[0]].node_ids.iter().copied().collect();
        let set2: BTreeSet<usize> = mesh.elements[members[1]].node_ids.iter().copied().collect();
        let shared: Vec<usize> = set1
            .intersection(&set2)
            .copied()
            .filter(|&n| n != mid)
            .collect();
        let opposite = match shared.as_slice() {
            [o] => *o,
            _ => {
                return Err(MeshError::NonConforming(
                    "green siblings do not share exactly one parent vertex".to_string(),
                ))
            }
        };
        let pq: Vec<usize> = virt[*vid]
            .nodes
            .iter()
            .copied()
            .filter(|&n| n != opposite)
            .collect();
        let e = edge_key(pq[0], pq[1]);
        edge_mid.insert(e, mid);
        mandatory.insert(e);
        virt[*vid].prior_edge = Some(e);
    }

    // Criterion marks mapped through the collapse, cap-filtered.
    let mut red: BTreeSet<usize> = marked
        .iter()
        .filter(|&&e| e < mesh.n_elements())
        .map(|&e| cur2virt[e])
        .filter(|&v| virt[v].split_count < max_splits)
        .collect();

    // Mark closure with cap suppression. An unmarked element is promoted
    // to red when two of its edges are bisected, or when the finer side
    // of its previously green edge splits one of the halves (the hanging
    // point then sits inside the parent edge and only a red split of the
    // parent, followed by a green patch on the affected child, restores
    // conformity). If a promotion would push an element past its split
    // cap, the criterion marks feeding it are withdrawn and the closure
    // restarts.
    let red_edges = |red: &BTreeSet<usize>, virt: &[VirtElem]| -> BTreeSet<(usize, usize)> {
        let mut s = BTreeSet::new();
        for &v in red {
            for e in virt[v].edges() {
                s.insert(e);
            }
        }
        s
    };
    'outer: loop {
        let mut cut = red_edges(&red, &virt);
        let mut promoted = red.clone();
        loop {
            let mut changed = false;
            for (vid, v) in virt.iter().enumerate() {
                if promoted.contains(&vid) {
                    continue;
                }
                let own_cuts = v
                    .edges()
                    .iter()
                    .filter(|e| cut.contains(e) || mandatory.contains(e))
                    .count();
                let half_cut = v
                    .prior_halves()
                    .map(|hs| hs.iter().any(|h| cut.contains(h)))
                    .unwrap_or(false);
                if own_cuts >= 2 || half_cut {
                    promoted.insert(vid);
                    for e in v.edges() {
                        cut.insert(e);
                    }
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        // Elements promoted past their cap force the marks near them to
        // be withdrawn ("cannot be split but can be further deformed").
        let violators: Vec<usize> = promoted
            .iter()
            .copied()
            .filter(|&v| virt[v].split_count >= max_splits)
            .collect();
        if violators.is_empty() {
            red = promoted;
            break 'outer;
        }
        let mut shrunk = false;
        for &v in &violators {
            let mut guarded: BTreeSet<(usize, usize)> = virt[v].edges().into_iter().collect();
            if let Some(halves) = virt[v].prior_halves() {
                guarded.extend(halves);
            }
            let offenders: Vec<usize> = red
                .iter()
                .copied()
                .filter(|&r| virt[r].edges().iter().any(|e| guarded.contains(e)))
                .collect();
            for o in offenders {
                shrunk |= red.remove(&o);
            }
        }
        if !shrunk {
            return Err(MeshError::NonConforming(
                "split-cap suppression failed to converge".to_string(),
            ));
        }
    }

    // Final bisected edge set (red-split element edges; mandatory edges
    // keep their existing midpoints).
    let mut bisected: BTreeSet<(usize, usize)> = mandatory.clone();
    for e in red_edges(&red, &virt) {
        bisected.insert(e);
    }

    // Virtual-mesh edge census decides boundary classification for new
    // midpoints: a count-1 edge lies on the domain boundary unless it is
    // a collapsed-green edge or a half of one (those are interior seams
    // against the finer side).
    let mut census: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut interior_halves: BTreeSet<(usize, usize)> = BTreeSet::new();
    for v in &virt {
        for e in v.edges() {
            *census.entry(e).or_insert(0) += 1;
        }
        if let Some(halves) = v.prior_halves() {
            interior_halves.extend(halves);
        }
    }

    let mut nodes = mesh.nodes.clone();
    let mut new_nodes = Vec::new();
    for &(a, b) in &bisected {
        if edge_mid.contains_key(&(a, b)) {
            continue;
        }
        let id = nodes.len();
        let pa = nodes[a].coords;
        let pb = nodes[b].coords;
        let on_boundary = census.get(&(a, b)).copied() == Some(1)
            && !mandatory.contains(&(a, b))
            && !interior_halves.contains(&(a, b));
        let tag = if on_boundary {
            match (&nodes[a].boundary_tag, &nodes[b].boundary_tag) {
                (Some(ta), Some(tb)) if ta == tb => Some(ta.clone()),
                _ => None,
            }
        } else {
            None
        };
        nodes.push(Node {
            id,
            coords: [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])],
            on_boundary,
            boundary_tag: tag,
        });
        edge_mid.insert((a, b), id);
        new_nodes.push((id, (a, b)));
    }

    let mut elements: Vec<Element> = Vec::new();
    // Emit a child; when one of its edges already carries a midpoint
    // (the finer side across split it this pass), patch the child with a
    // green pair instead so no hanging node remains.
    let push_child = |ids: [usize; 3],
                          split_count: u32,
                          jacobian_prev: Option<f64>,
                          green: Option<GreenParent>,
                          elements: &mut Vec<Element>,
                          edge_mid: &BTreeMap<(usize, usize), usize>|
     -> Result<(), MeshError> {
        let cut: Vec<usize> = (0..3)
            .filter(|&k| edge_mid.contains_key(&edge_key(ids[k], ids[(k + 1) % 3])))
            .collect();
        match (cut.len(), green) {
            (0, green) => {
                let mut child = Element::new(elements.len(), ids.to_vec());
                child.split_count = split_count;
                child.jacobian_prev = jacobian_prev;
                child.green_parent = green;
                elements.push(child);
                Ok(())
            }
            (1, None) => {
                let k = cut[0];
                let p = ids[k];
                let q = ids[(k + 1) % 3];
                let o = ids[(k + 2) % 3];
                let m = edge_mid[&edge_key(p, q)];
                let marker = GreenParent { nodes: ids, mid: m };
                for child_ids in [[p, m, o], [m, q, o]] {
                    let mut child = Element::new(elements.len(), child_ids.to_vec());
                    child.split_count = split_count;
                    child.green_parent = Some(marker.clone());
                    elements.push(child);
                }
                Ok(())
            }
            (n, _) => Err(MeshError::NonConforming(format!(
                "child {ids:?} left with {n} unresolved bisected edges"
            ))),
        }
    };

    for (vid, v) in virt.iter().enumerate() {
        let [a, b, c] = v.nodes;
        if red.contains(&vid) {
            let mab = edge_mid[&edge_key(a, b)];
            let mbc = edge_mid[&edge_key(b, c)];
            let mca = edge_mid[&edge_key(c, a)];
            for ids in [[a, mab, mca], [mab, b, mbc], [mca, mbc, c], [mab, mbc, mca]] {
                push_child(ids, v.split_count + 1, None, None, &mut elements, &edge_mid)?;
            }
        } else {
            let es = v.edges();
            let cuts: Vec<usize> = (0..3).filter(|&k| bisected.contains(&es[k])).collect();
            match cuts.as_slice() {
                [] => {
                    let mut copy = Element::new(elements.len(), vec![a, b, c]);
                    copy.split_count = v.split_count;
                    copy.jacobian_prev = v.jacobian_prev;
                    elements.push(copy);
                }
                [k] => {
                    let (p, q, o) = (v.nodes[*k], v.nodes[(k + 1) % 3], v.nodes[(k + 2) % 3]);
                    let m = edge_mid[&edge_key(p, q)];
                    let marker = GreenParent { nodes: v.nodes, mid: m };
                    for ids in [[p, m, o], [m, q, o]] {
                        push_child(
                            ids,
                            v.split_count,
                            None,
                            Some(marker.clone()),
                            &mut elements,
                            &edge_mid,
                        )?;
                    }
                }
                more => {
                    return Err(MeshError::NonConforming(format!(
                        "unmarked element left with {} bisected edges",
                        more.len()
                    )));
                }
            }
        }
    }

    // Children must keep positive orientation; midpoints of straight
    // edges guarantee it unless a previously green midpoint has drifted
    // too far. Report instead of silently flipping.
    let refined = Mesh::from_raw_unoriented(2, mesh.order, nodes, elements)?;
    for e in 0..refined.n_elements() {
        if refined.signed_jacobian(e) <= 0.0 {
            return Err(MeshError::NonConforming(format!(
                "refinement would invert child element {e}"
            )));
        }
    }
    Ok(RefineOutcome {
        mesh: refined,
        new_nodes,
    })
}
