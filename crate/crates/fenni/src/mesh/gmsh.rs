//! Gmsh MSH 2.2 ASCII reader and writer (subset: $MeshFormat, $Nodes,
//! $Elements, optional $PhysicalNames; element types 1 and 2).

use std::collections::BTreeMap;
use std::path::Path;

use super::{Element, Mesh, MeshError, Node};

/// Result of parsing an MSH file.
#[derive(Debug)]
pub struct GmshRead {
    pub mesh: Mesh,
    /// Count of elements whose type is outside the supported subset.
    pub skipped_elements: usize,
}

pub fn read_gmsh(path: &Path) -> Result<GmshRead, MeshError> {
    let text = std::fs::read_to_string(path)?;
    read_gmsh_str(&text)
}

pub fn read_gmsh_str(text: &str) -> Result<GmshRead, MeshError> {
    let mut lines = text.lines().map(str::trim).peekable();

    expect_line(&mut lines, "$MeshFormat")?;
    let fmt = next_line(&mut lines, "$MeshFormat body")?;
    let mut fmt_parts = fmt.split_whitespace();
    let version = fmt_parts.next().unwrap_or("");
    if version != "2.2" {
        return Err(MeshError::UnsupportedVersion(version.to_string()));
    }
    let file_type = fmt_parts.next().unwrap_or("");
    if file_type != "0" {
        return Err(MeshError::MalformedHeader(
            "binary MSH files are not supported".to_string(),
        ));
    }
    expect_line(&mut lines, "$EndMeshFormat")?;

    let mut physical_names: BTreeMap<i64, String> = BTreeMap::new();
    let mut raw_nodes: Vec<(i64, [f64; 2])> = Vec::new();
    let mut raw_elements: Vec<(u32, Vec<i64>, Option<i64>)> = Vec::new();
    let mut skipped = 0usize;

    while let Some(section) = lines.next() {
        match section {
            "" => continue,
            "$PhysicalNames" => {
                let count: usize = parse_count(next_line(&mut lines, "$PhysicalNames count")?)?;
                for _ in 0..count {
                    let line = next_line(&mut lines, "physical name entry")?;
                    let mut parts = line.split_whitespace();
                    let _dim = parts.next();
                    let id: i64 = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| malformed("physical name id"))?;
                    let name = line
                        .split('"')
                        .nth(1)
                        .ok_or_else(|| malformed("physical name string"))?;
                    physical_names.insert(id, name.to_string());
                }
                expect_line(&mut lines, "$EndPhysicalNames")?;
            }
            "$Nodes" => {
                let count: usize = parse_count(next_line(&mut lines, "$Nodes count")?)?;
                for _ in 0..count {
                    let line = next_line(&mut lines, "node entry")?;
                    let mut parts = line.split_whitespace();
                    let id: i64 = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| malformed("node id"))?;
                    let x: f64 = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| malformed("node x"))?;
                    let y: f64 = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| malformed("node y"))?;
                    raw_nodes.push((id, [x, y]));
                }
                expect_line(&mut lines, "$EndNodes")?;
            }
            "$Elements" => {
                let count: usize = parse_count(next_line(&mut lines, "$Elements count")?)?;
                for _ in 0..count {
                    let line = next_line(&mut lines, "element entry")?;
                    let mut parts = line.split_whitespace();
                    let _id = parts.next().ok_or_else(|| malformed("element id"))?;
                    let etype: u32 = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| malformed("element type"))?;
                    let ntags: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| malformed("element tag count"))?;
                    let mut tags = Vec::with_capacity(ntags);
                    for _ in 0..ntags {
                        let t: i64 = parts
                            .next()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| malformed("element tag"))?;
                        tags.push(t);
                    }
                    let node_refs: Vec<i64> = parts.map(|s| s.parse().unwrap_or(-1)).collect();
                    match etype {
                        1 | 2 => {
                            let expect_n = if etype == 1 { 2 } else { 3 };
                            if node_refs.len() != expect_n || node_refs.contains(&-1) {
                                return Err(malformed("element node list"));
                            }
                            raw_elements.push((etype, node_refs, tags.first().copied()));
                        }
                        _ => skipped += 1,
                    }
                }
                expect_line(&mut lines, "$EndElements")?;
            }
            other if other.starts_with('$') && !other.starts_with("$End") => {
                // Skip unknown sections up to their matching end marker.
                let end = format!("$End{}", &other[1..]);
                loop {
                    match lines.next() {
                        Some(l) if l == end => break,
                        Some(_) => continue,
                        None => {
                            return Err(MeshError::MalformedHeader(format!("missing {end}")));
                        }
                    }
                }
            }
            other => {
                return Err(MeshError::MalformedHeader(format!(
                    "unexpected content: {other}"
                )));
            }
        }
    }

    if raw_nodes.is_empty() {
        return Err(MeshError::MalformedHeader("no $Nodes section".to_string()));
    }

    // Remap arbitrary 1-based (possibly sparse) node ids to dense 0-based
    // indices in file order.
    let mut id_map: BTreeMap<i64, usize> = BTreeMap::new();
    let mut nodes: Vec<Node> = Vec::with_capacity(raw_nodes.len());
    for (i, (id, coords)) in raw_nodes.iter().enumerate() {
        id_map.insert(*id, i);
        nodes.push(Node {
            id: i,
            coords: *coords,
            on_boundary: false,
            boundary_tag: None,
        });
    }

    let dim = if raw_elements.iter().any(|(t, _, _)| *t == 2) {
        2
    } else {
        1
    };

    let mut elements = Vec::new();
    for (ei, (etype, node_refs, phys)) in raw_elements.iter().enumerate() {
        let mapped: Result<Vec<usize>, MeshError> = node_refs
            .iter()
            .map(|r| {
                id_map
                    .get(r)
                    .copied()
                    .ok_or(MeshError::DanglingNodeReference {
                        elem: ei,
                        node: *r as usize,
                    })
            })
            .collect();
        let mapped = mapped?;
        if dim == 2 && *etype == 1 {
            // Boundary edge: flags its nodes, carries the physical name.
            let tag = phys.and_then(|p| physical_names.get(&p).cloned());
            for &n in &mapped {
                nodes[n].on_boundary = true;
                if nodes[n].boundary_tag.is_none() {
                    nodes[n].boundary_tag = tag.clone();
                }
            }
        } else {
            elements.push(Element::new(elements.len(), mapped));
        }
    }

    if elements.is_empty() {
        return Err(MeshError::InvalidDiscretization(
            "file contains no domain elements".to_string(),
        ));
    }

    let mut mesh = Mesh::from_raw(dim, 1, nodes, elements)?;
    flag_topological_boundary(&mut mesh);
    Ok(GmshRead {
        mesh,
        skipped_elements: skipped,
    })
}

/// Flag boundary nodes the file did not tag: 1D endpoints (degree-1
/// nodes, tagged left/right by coordinate) and 2D nodes on edges with a
/// single incident triangle.
fn flag_topological_boundary(mesh: &mut Mesh) {
    if mesh.dim == 1 {
        let mut degree = vec![0usize; mesh.n_nodes()];
        for e in &mesh.elements {
            for &n in e.node_ids.iter().take(2) {
                degree[n] += 1;
            }
        }
        let endpoints: Vec<usize> = (0..mesh.n_nodes()).filter(|&n| degree[n] == 1).collect();
        if let (Some(&left), Some(&right)) = (
            endpoints
                .iter()
                .min_by(|&&a, &&b| mesh.nodes[a].coords[0].total_cmp(&mesh.nodes[b].coords[0])),
            endpoints
                .iter()
                .max_by(|&&a, &&b| mesh.nodes[a].coords[0].total_cmp(&mesh.nodes[b].coords[0])),
        ) {
            for (n, tag) in [(left, "left"), (right, "right")] {
                mesh.nodes[n].on_boundary = true;
                if mesh.nodes[n].boundary_tag.is_none() {
                    mesh.nodes[n].boundary_tag = Some(tag.to_string());
                }
            }
        }
    } else {
        for ((a, b), count) in mesh.edge_census() {
            if count == 1 {
                mesh.nodes[a].on_boundary = true;
                mesh.nodes[b].on_boundary = true;
            }
        }
    }
}

/// Write the same MSH 2.2 subset. 2D boundary edges are emitted as type-1
/// elements grouped by tag, with a $PhysicalNames table, so tags survive a
/// round trip.
pub fn write_gmsh(mesh: &Mesh, path: &Path) -> Result<(), MeshError> {
    use std::fmt::Write as _;
    let mut out = String::new();
    out.push_str("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n");

    let mut tags: Vec<String> = mesh
        .nodes
        .iter()
        .filter_map(|n| n.boundary_tag.clone())
        .collect();
    tags.sort();
    tags.dedup();
    let tag_id = |t: &str| tags.iter().position(|s| s == t).map(|i| i + 1);
    if !tags.is_empty() {
        let _ = writeln!(out, "$PhysicalNames\n{}", tags.len());
        let phys_dim = if mesh.dim == 2 { 1 } else { 0 };
        for (i, t) in tags.iter().enumerate() {
            let _ = writeln!(out, "{} {} \"{}\"", phys_dim, i + 1, t);
        }
        out.push_str("$EndPhysicalNames\n");
    }

    let _ = writeln!(out, "$Nodes\n{}", mesh.n_nodes());
    for n in &mesh.nodes {
        let _ = writeln!(out, "{} {:.17} {:.17} 0", n.id + 1, n.coords[0], n.coords[1]);
    }
    out.push_str("$EndNodes\n");

    // Boundary edges carrying a shared tag (2D only).
    let mut boundary_edges: Vec<(usize, usize, usize)> = Vec::new();
    if mesh.dim == 2 {
        for ((a, b), count) in mesh.edge_census() {
            if count == 1 {
                let ta = mesh.nodes[a].boundary_tag.as_deref();
                let tb = mesh.nodes[b].boundary_tag.as_deref();
                if let (Some(ta), Some(tb)) = (ta, tb) {
                    if ta == tb {
                        if let Some(id) = tag_id(ta) {
                            boundary_edges.push((a, b, id));
                        }
                    }
                }
            }
        }
    }

    let _ = writeln!(out, "$Elements\n{}", boundary_edges.len() + mesh.n_elements());
    let mut eid = 1;
    for (a, b, phys) in &boundary_edges {
        let _ = writeln!(out, "{} 1 2 {} {} {} {}", eid, phys, phys, a + 1, b + 1);
        eid += 1;
    }
    for e in &mesh.elements {
        let etype = if mesh.dim == 1 { 1 } else { 2 };
        let ids: Vec<String> = e
            .node_ids
            .iter()
            .take(if mesh.dim == 1 { 2 } else { 3 })
            .map(|n| (n + 1).to_string())
            .collect();
        let _ = writeln!(out, "{} {} 2 0 0 {}", eid, etype, ids.join(" "));
        eid += 1;
    }
    out.push_str("$EndElements\n");

    std::fs::write(path, out)?;
    Ok(())
}

fn malformed(what: &str) -> MeshError {
    MeshError::MalformedHeader(format!("could not parse {what}"))
}

fn parse_count(line: &str) -> Result<usize, MeshError> {
    line.split_whitespace()
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| malformed("section count"))
}

fn next_line<'a>(
    lines: &mut impl Iterator<Item = &'a str>,
    what: &str,
) -> Result<&'a str, MeshError> {
    lines
        .next()
        .ok_or_else(|| MeshError::MalformedHeader(format!("unexpected end of file at {what}")))
}

fn expect_line<'a>(
    lines: &mut impl Iterator<Item = &'a str>,
    expected: &str,
) -> Result<(), MeshError> {
    loop {
        let line = next_line(lines, expected)?;
        if line.is_empty() {
            continue;
        }
        if line == expected {
            return Ok(());
        }
        return Err(MeshError::MalformedHeader(format!(
            "expected {expected}, found {line}"
        )));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SINGLE_TRIANGLE: &str = "\
$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
3
1 0 0 0
2 1 0 0
3 0 1 0
$EndNodes
$Elements
1
1 2 2 0 0 1 2 3
$EndElements
";

    const BAR_TWO_ELEMENTS: &str = "\
$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
3
1 0 0 0
2 5 0 0
3 10 0 0
$EndNodes
$Elements
2
1 1 2 0 1 1 2
2 1 2 0 1 2 3
$EndElements
";

    #[test]
    fn single_triangle_all_boundary() {
        let read = read_gmsh_str(SINGLE_TRIANGLE).unwrap();
        assert_eq!(read.mesh.n_nodes(), 3);
        assert_eq!(read.mesh.n_elements(), 1);
        assert!(read.mesh.nodes.iter().all(|n| n.on_boundary));
        assert_eq!(read.skipped_elements, 0);
    }

    #[test]
    fn missing_end_nodes_is_malformed() {
        let text = SINGLE_TRIANGLE.replace("$EndNodes\n", "");
        match read_gmsh_str(&text) {
            Err(MeshError::MalformedHeader(_)) => {}
            other => panic!("expected MalformedHeader, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let text = SINGLE_TRIANGLE.replace("2.2 0 8", "4.1 0 8");
        match read_gmsh_str(&text) {
            Err(MeshError::UnsupportedVersion(v)) => assert_eq!(v, "4.1"),
            other => panic!("expected UnsupportedVersion, got {other:?}"),
        }
    }

    #[test]
    fn bar_connectivity_from_fixture() {
        let read = read_gmsh_str(BAR_TWO_ELEMENTS).unwrap();
        let m = &read.mesh;
        assert_eq!(m.dim, 1);
        let conn: Vec<Vec<usize>> = m.elements.iter().map(|e| e.node_ids.clone()).collect();
        assert_eq!(conn, vec![vec![0, 1], vec![1, 2]]);
        assert_eq!(m.nodes[0].boundary_tag.as_deref(), Some("left"));
        assert_eq!(m.nodes[2].boundary_tag.as_deref(), Some("right"));
    }

    #[test]
    fn dangling_node_reference() {
        let text = BAR_TWO_ELEMENTS.replace("2 1 2 0 1 2 3", "2 1 2 0 1 2 9");
        match read_gmsh_str(&text) {
            Err(MeshError::DanglingNodeReference { node, .. }) => assert_eq!(node, 9),
            other => panic!("expected DanglingNodeReference, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_types_skipped_with_count() {
        let text = "\
$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
4
1 0 0 0
2 1 0 0
3 0 1 0
4 1 1 0
$EndNodes
$Elements
3
1 15 2 0 0 1
2 2 2 0 0 1 2 3
3 3 2 0 0 1 2 4 3
$EndElements
";
        let read = read_gmsh_str(text).unwrap();
        assert_eq!(read.skipped_elements, 2);
        assert_eq!(read.mesh.n_elements(), 1);
    }

    #[test]
    fn physical_names_applied_to_boundary_nodes() {
        let text = "\
$MeshFormat
2.2 0 8
$EndMeshFormat
$PhysicalNames
1
1 7 \"clamped\"
$EndPhysicalNames
$Nodes
3
1 0 0 0
2 1 0 0
3 0 1 0
$EndNodes
$Elements
2
1 2 2 0 0 1 2 3
2 1 2 7 1 1 2
$EndElements
";
        let read = read_gmsh_str(text).unwrap();
        let m = &read.mesh;
        assert_eq!(m.nodes[0].boundary_tag.as_deref(), Some("clamped"));
        assert_eq!(m.nodes[1].boundary_tag.as_deref(), Some("clamped"));
        assert_eq!(m.nodes[2].boundary_tag, None);
    }

    #[test]
    fn write_read_roundtrip_preserves_structure() {
        let geom = crate::mesh::PlateGeometry::default();
        let mesh = crate::mesh::generate_plate_with_hole(&geom, 0).unwrap();
        let dir = std::env::temp_dir().join("fenni-gmsh-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("plate0.msh");
        write_gmsh(&mesh, &path).unwrap();
        let read = read_gmsh(&path).unwrap();
        assert_eq!(read.mesh.n_nodes(), mesh.n_nodes());
        assert_eq!(read.mesh.n_elements(), mesh.n_elements());
        for (a, b) in mesh.nodes.iter().zip(&read.mesh.nodes) {
            assert_eq!(a.coords, b.coords);
            assert_eq!(a.on_boundary, b.on_boundary);
        }
        let conn_a: Vec<_> = mesh.elements.iter().map(|e| e.node_ids.clone()).collect();
        let conn_b: Vec<_> = read.mesh.elements.iter().map(|e| e.node_ids.clone()).collect();
        assert_eq!(conn_a, conn_b);
    }
}
