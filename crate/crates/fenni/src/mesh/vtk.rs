//! Legacy-VTK ASCII UNSTRUCTURED_GRID writer plus a reader for the same
//! subset, so emitted files can be loaded back and checked in-repo.

use std::path::Path;

use super::{Mesh, MeshError};

/// Field data attached to a grid on export.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VtkData {
    pub point_vectors: Vec<(String, Vec<[f64; 3]>)>,
    pub point_scalars: Vec<(String, Vec<f64>)>,
    pub cell_scalars: Vec<(String, Vec<f64>)>,
}

/// Parsed form of a legacy VTK unstructured grid (the subset this crate
/// writes).
#[derive(Debug, Clone, PartialEq)]
pub struct VtkGrid {
    pub points: Vec<[f64; 3]>,
    pub cells: Vec<Vec<usize>>,
    pub cell_types: Vec<u32>,
    pub data: VtkData,
}

/// Write mesh + fields as legacy ASCII VTK. 1D meshes emit line cells
/// (corner nodes only), 2D meshes emit triangles.
pub fn write_vtk(mesh: &Mesh, data: &VtkData, title: &str, path: &Path) -> Result<(), MeshError> {
    use std::fmt::Write as _;
    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\n");
    let _ = writeln!(out, "{title}");
    out.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\n");

    let _ = writeln!(out, "POINTS {} double", mesh.n_nodes());
    for n in &mesh.nodes {
        let _ = writeln!(out, "{:.17} {:.17} 0", n.coords[0], n.coords[1]);
    }

    let per_cell = if mesh.dim == 1 { 2 } else { 3 };
    let ne = mesh.n_elements();
    let _ = writeln!(out, "CELLS {} {}", ne, ne * (per_cell + 1));
    for e in &mesh.elements {
        let ids: Vec<String> = e
            .node_ids
            .iter()
            .take(per_cell)
            .map(|n| n.to_string())
            .collect();
        let _ = writeln!(out, "{} {}", per_cell, ids.join(" "));
    }
    let cell_type = if mesh.dim == 1 { 3 } else { 5 };
    let _ = writeln!(out, "CELL_TYPES {ne}");
    for _ in 0..ne {
        let _ = writeln!(out, "{cell_type}");
    }

    if !data.point_vectors.is_empty() || !data.point_scalars.is_empty() {
        let _ = writeln!(out, "POINT_DATA {}", mesh.n_nodes());
        for (name, vecs) in &data.point_vectors {
            let _ = writeln!(out, "VECTORS {name} double");
            for v in vecs {
                let _ = writeln!(out, "{:.17} {:.17} {:.17}", v[0], v[1], v[2]);
            }
        }
        for (name, vals) in &data.point_scalars {
            let _ = writeln!(out, "SCALARS {name} double 1\nLOOKUP_TABLE default");
            for v in vals {
                let _ = writeln!(out, "{v:.17}");
            }
        }
    }
    if !data.cell_scalars.is_empty() {
        let _ = writeln!(out, "CELL_DATA {ne}");
        for (name, vals) in &data.cell_scalars {
            let _ = writeln!(out, "SCALARS {name} double 1\nLOOKUP_TABLE default");
            for v in vals {
                let _ = writeln!(out, "{v:.17}");
            }
        }
    }

    std::fs::write(path, out)?;
    Ok(())
}

/// Read back a legacy ASCII VTK unstructured grid written by this crate.
pub fn read_vtk(path: &Path) -> Result<VtkGrid, MeshError> {
    let text = std::fs::read_to_string(path)?;
    let mut tokens = text
        .lines()
        .skip(2) // header comment + title
        .flat_map(|l| l.split_whitespace())
        .peekable();

    fn expect<'a>(
        tokens: &mut impl Iterator<Item = &'a str>,
        what: &str,
    ) -> Result<&'a str, MeshError> {
        tokens
            .next()
            .ok_or_else(|| MeshError::MalformedHeader(format!("VTK: unexpected EOF at {what}")))
    }
    fn parse<T: std::str::FromStr>(tok: &str, what: &str) -> Result<T, MeshError> {
        tok.parse()
            .map_err(|_| MeshError::MalformedHeader(format!("VTK: bad {what}: {tok}")))
    }

    for kw in ["ASCII", "DATASET", "UNSTRUCTURED_GRID", "POINTS"] {
        let t = expect(&mut tokens, kw)?;
        if t != kw {
            return Err(MeshError::MalformedHeader(format!(
                "VTK: expected {kw}, found {t}"
            )));
        }
    }
    let np: usize = parse(expect(&mut tokens, "point count")?, "point count")?;
    let _dtype = expect(&mut tokens, "point type")?;
    let mut points = Vec::with_capacity(np);
    for _ in 0..np {
        let mut p = [0.0f64; 3];
        for c in &mut p {
            *c = parse(expect(&mut tokens, "coordinate")?, "coordinate")?;
        }
        points.push(p);
    }

    let t = expect(&mut tokens, "CELLS")?;
    if t != "CELLS" {
        return Err(MeshError::MalformedHeader(format!(
            "VTK: expected CELLS, found {t}"
        )));
    }
    let nc: usize = parse(expect(&mut tokens, "cell count")?, "cell count")?;
    let _total: usize = parse(expect(&mut tokens, "cell total")?, "cell total")?;
    let mut cells = Vec::with_capacity(nc);
    for _ in 0..nc {
        let k: usize = parse(expect(&mut tokens, "cell size")?, "cell size")?;
        let mut ids = Vec::with_capacity(k);
        for _ in 0..k {
            ids.push(parse(expect(&mut tokens, "cell node")?, "cell node")?);
        }
        cells.push(ids);
    }

    let t = expect(&mut tokens, "CELL_TYPES")?;
    if t != "CELL_TYPES" {
        return Err(MeshError::MalformedHeader(format!(
            "VTK: expected CELL_TYPES, found {t}"
        )));
    }
    let ntypes: usize = parse(expect(&mut tokens, "type count")?, "type count")?;
    let mut cell_types = Vec::with_capacity(ntypes);
    for _ in 0..ntypes {
        cell_types.push(parse(expect(&mut tokens, "cell type")?, "cell type")?);
    }

    let mut data = VtkData::default();
    let mut section = 0usize; // 1 = POINT_DATA, 2 = CELL_DATA
    while let Some(tok) = tokens.next() {
        match tok {
            "POINT_DATA" => {
                let _n: usize = parse(expect(&mut tokens, "count")?, "count")?;
                section = 1;
            }
            "CELL_DATA" => {
                let _n: usize = parse(expect(&mut tokens, "count")?, "count")?;
                section = 2;
            }
            "VECTORS" => {
                let name = expect(&mut tokens, "name")?.to_string();
                let _dtype = expect(&mut tokens, "type")?;
                let mut vals = Vec::with_capacity(np);
                for _ in 0..np {
                    let mut v = [0.0f64; 3];
                    for c in &mut v {
                        *c = parse(expect(&mut tokens, "vector entry")?, "vector entry")?;
                    }
                    vals.push(v);
                }
                data.point_vectors.push((name, vals));
            }
            "SCALARS" => {
                let name = expect(&mut tokens, "name")?.to_string();
                let _dtype = expect(&mut tokens, "type")?;
                let _ncomp = expect(&mut tokens, "components")?;
                let lt = expect(&mut tokens, "LOOKUP_TABLE")?;
                if lt != "LOOKUP_TABLE" {
                    return Err(MeshError::MalformedHeader(
                        "VTK: SCALARS without LOOKUP_TABLE".to_string(),
                    ));
                }
                let _table = expect(&mut tokens, "table name")?;
                let count = if section == 2 { nc } else { np };
                let mut vals = Vec::with_capacity(count);
                for _ in 0..count {
                    vals.push(parse(expect(&mut tokens, "scalar entry")?, "scalar entry")?);
                }
                if section == 2 {
                    data.cell_scalars.push((name, vals));
                } else {
                    data.point_scalars.push((name, vals));
                }
            }
            other => {
                return Err(MeshError::MalformedHeader(format!(
                    "VTK: unsupported attribute {other}"
                )));
            }
        }
    }

    Ok(VtkGrid {
        points,
        cells,
        cell_types,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_plate_with_fields() {
        let mesh =
            crate::mesh::generate_plate_with_hole(&crate::mesh::PlateGeometry::default(), 0)
                .unwrap();
        let data = VtkData {
            point_vectors: vec![(
                "displacement".to_string(),
                (0..mesh.n_nodes())
                    .map(|i| [i as f64 * 0.1, -(i as f64), 0.0])
                    .collect(),
            )],
            point_scalars: vec![],
            cell_scalars: vec![(
                "von_mises".to_string(),
                (0..mesh.n_elements()).map(|e| e as f64).collect(),
            )],
        };
        let dir = std::env::temp_dir().join("fenni-vtk-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("plate.vtk");
        write_vtk(&mesh, &data, "plate", &path).unwrap();
        let grid = read_vtk(&path).unwrap();
        assert_eq!(grid.points.len(), mesh.n_nodes());
        assert_eq!(grid.cells.len(), mesh.n_elements());
        assert!(grid.cell_types.iter().all(|&t| t == 5));
        assert_eq!(grid.data.point_vectors[0].1.len(), mesh.n_nodes());
        assert_eq!(grid.data.cell_scalars[0].1, data.cell_scalars[0].1);
        for (p, n) in grid.points.iter().zip(&mesh.nodes) {
            assert_eq!(p[0], n.coords[0]);
            assert_eq!(p[1], n.coords[1]);
        }
    }

    #[test]
    fn roundtrip_bar() {
        let mesh = crate::mesh::generate_bar_1d(10.0, 5, 1).unwrap();
        let dir = std::env::temp_dir().join("fenni-vtk-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bar.vtk");
        write_vtk(&mesh, &VtkData::default(), "bar", &path).unwrap();
        let grid = read_vtk(&path).unwrap();
        assert_eq!(grid.cells.len(), 4);
        assert!(grid.cell_types.iter().all(|&t| t == 3));
    }
}
